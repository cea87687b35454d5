//! Pairing of Alice/Bob detections and joint-outcome tallies.
//!
//! The coincidence window is a full width: two detections of the same pulse
//! pair up when their offsets differ by at most `window_ns / 2`. With this
//! convention the chance rate of uncorrelated counts is exactly
//! `r_a · r_b · window · T`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::types::{Bit, CoincidenceRecord, DetectionEvent, SettingKey, SettingPair, SlotConfig};

pub const DEFAULT_WINDOW_NS: f64 = 2.0;

/// Joint outcome counts; `p` is outcome 1, `m` is outcome 0, Alice first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoincidenceCounts {
    pub c_pp: u64,
    pub c_mm: u64,
    pub c_pm: u64,
    pub c_mp: u64,
}

impl CoincidenceCounts {
    pub fn new(c_pp: u64, c_mm: u64, c_pm: u64, c_mp: u64) -> Self {
        Self { c_pp, c_mm, c_pm, c_mp }
    }

    pub fn add(&mut self, a: Bit, b: Bit) {
        match (a, b) {
            (1, 1) => self.c_pp += 1,
            (0, 0) => self.c_mm += 1,
            (1, 0) => self.c_pm += 1,
            _ => self.c_mp += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.c_pp + self.c_mm + self.c_pm + self.c_mp
    }

    pub fn merge(&mut self, other: &Self) {
        self.c_pp += other.c_pp;
        self.c_mm += other.c_mm;
        self.c_pm += other.c_pm;
        self.c_mp += other.c_mp;
    }

    /// Counts as seen with Alice and Bob exchanged.
    pub fn transposed(&self) -> Self {
        Self::new(self.c_pp, self.c_mm, self.c_mp, self.c_pm)
    }
}

/// Matching diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchStats {
    /// Pulses discarded because both outcome detectors of Alice fired.
    pub ambiguous_a: u64,
    pub ambiguous_b: u64,
    /// Candidate pairs lost because a detection was already used.
    pub contended: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoincidenceSet {
    pub records: Vec<CoincidenceRecord>,
    pub stats: MatchStats,
}

fn is_ambiguous(group: &[DetectionEvent]) -> bool {
    let first = group[0].outcome;
    group.iter().any(|e| e.outcome != first)
}

fn pulse_groups(events: &[DetectionEvent]) -> impl Iterator<Item = &[DetectionEvent]> + '_ {
    events.chunk_by(|x, y| x.pulse_index == y.pulse_index)
}

/// Pairs detections with equal pulse index whose offsets differ by at most
/// half the (full-width) window. Each detection is used at most once; within
/// a pulse, pairs are taken greedily in order of increasing offset difference.
///
/// Both inputs must be sorted by pulse index.
pub fn find_coincidences(
    events_a: &[DetectionEvent],
    events_b: &[DetectionEvent],
    window_ns: f64,
    settings: SettingPair,
) -> CoincidenceSet {
    debug_assert!(events_a.windows(2).all(|w| w[0].pulse_index <= w[1].pulse_index));
    debug_assert!(events_b.windows(2).all(|w| w[0].pulse_index <= w[1].pulse_index));
    let half = 0.5 * window_ns;
    let mut out = CoincidenceSet::default();

    let mut ga = pulse_groups(events_a).peekable();
    let mut gb = pulse_groups(events_b).peekable();

    // ambiguity is tallied for every pulse, matched or not
    let consume = |g: &[DetectionEvent], tally: &mut u64| -> bool {
        let amb = is_ambiguous(g);
        if amb {
            *tally += 1;
        }
        !amb
    };

    let mut candidates: Vec<(f64, f64, usize, usize)> = Vec::new();
    let mut used_a: Vec<bool> = Vec::new();
    let mut used_b: Vec<bool> = Vec::new();
    loop {
        let (a, b) = match (ga.peek(), gb.peek()) {
            (None, None) => break,
            (Some(_), None) => {
                let g = ga.next().unwrap();
                consume(g, &mut out.stats.ambiguous_a);
                continue;
            }
            (None, Some(_)) => {
                let g = gb.next().unwrap();
                consume(g, &mut out.stats.ambiguous_b);
                continue;
            }
            (Some(a), Some(b)) => (a[0].pulse_index, b[0].pulse_index),
        };
        if a < b {
            let g = ga.next().unwrap();
            consume(g, &mut out.stats.ambiguous_a);
            continue;
        }
        if b < a {
            let g = gb.next().unwrap();
            consume(g, &mut out.stats.ambiguous_b);
            continue;
        }
        let (pa, pb) = (ga.next().unwrap(), gb.next().unwrap());
        let keep_a = consume(pa, &mut out.stats.ambiguous_a);
        let keep_b = consume(pb, &mut out.stats.ambiguous_b);
        if !(keep_a && keep_b) {
            continue;
        }

        if pa.len() == 1 && pb.len() == 1 {
            if (pa[0].offset_ns - pb[0].offset_ns).abs() <= half {
                out.records.push(record(&pa[0], &pb[0], settings));
            }
            continue;
        }

        candidates.clear();
        for (i, ea) in pa.iter().enumerate() {
            for (j, eb) in pb.iter().enumerate() {
                let d = (ea.offset_ns - eb.offset_ns).abs();
                if d <= half {
                    candidates.push((d, ea.offset_ns + eb.offset_ns, i, j));
                }
            }
        }
        // (|Δ|, offset sum) is symmetric under exchanging the stations
        candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
        used_a.clear();
        used_a.resize(pa.len(), false);
        used_b.clear();
        used_b.resize(pb.len(), false);
        for &(_, _, i, j) in &candidates {
            if used_a[i] || used_b[j] {
                out.stats.contended += 1;
                continue;
            }
            used_a[i] = true;
            used_b[j] = true;
            out.records.push(record(&pa[i], &pb[j], settings));
        }
    }
    out
}

fn record(a: &DetectionEvent, b: &DetectionEvent, settings: SettingPair) -> CoincidenceRecord {
    CoincidenceRecord {
        pulse_index: a.pulse_index,
        offset_a_ns: a.offset_ns,
        offset_b_ns: b.offset_ns,
        outcome_a: a.outcome,
        outcome_b: b.outcome,
        settings,
    }
}

/// Coincidence counts keyed by setting pair and slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CountTable {
    pub counts: BTreeMap<(SettingKey, usize), CoincidenceCounts>,
    /// Records whose slot-assignment time falls outside the pulse.
    pub unslotted: u64,
}

impl CountTable {
    pub fn get(&self, settings: SettingPair, slot: usize) -> CoincidenceCounts {
        self.counts.get(&(settings.key(), slot)).copied().unwrap_or_default()
    }

    pub fn merge(&mut self, other: &CountTable) {
        for (k, c) in &other.counts {
            self.counts.entry(*k).or_default().merge(c);
        }
        self.unslotted += other.unslotted;
    }

    /// Sum over slots for one setting pair.
    pub fn setting_total(&self, settings: SettingPair) -> CoincidenceCounts {
        let key = settings.key();
        let mut acc = CoincidenceCounts::default();
        for ((k, _), c) in &self.counts {
            if *k == key {
                acc.merge(c);
            }
        }
        acc
    }

    pub fn settings(&self) -> Vec<SettingPair> {
        let mut keys: Vec<SettingKey> = self.counts.keys().map(|(k, _)| *k).collect();
        keys.dedup();
        keys.into_iter().map(|k| k.settings()).collect()
    }
}

/// Tallies joint outcomes per (setting pair, slot).
pub fn classify_counts(records: &[CoincidenceRecord], slot_cfg: &SlotConfig) -> CountTable {
    let mut table = CountTable::default();
    for r in records {
        match slot_cfg.slot_of(r.offset_ns()) {
            Some(slot) => table
                .counts
                .entry((r.settings.key(), slot))
                .or_default()
                .add(r.outcome_a, r.outcome_b),
            None => table.unslotted += 1,
        }
    }
    table
}

/// Expected number of chance coincidences between two uncorrelated count
/// streams for a full-width window.
pub fn expected_accidentals(rate_a_hz: f64, rate_b_hz: f64, window_ns: f64, duration_s: f64) -> f64 {
    rate_a_hz * rate_b_hz * window_ns * 1e-9 * duration_s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Station;
    use proptest::prelude::*;

    fn ev(pulse: u64, offset: f64, outcome: Bit, station: Station) -> DetectionEvent {
        DetectionEvent {
            pulse_index: pulse,
            offset_ns: offset,
            outcome,
            station,
        }
    }

    fn s0() -> SettingPair {
        SettingPair::new(0.0, 22.5)
    }

    #[test]
    fn simple_match_and_slot_time() {
        let a = [ev(7, 100.0, 1, Station::Alice)];
        let b = [ev(7, 101.0, 0, Station::Bob)];
        let set = find_coincidences(&a, &b, 2.0, s0());
        assert_eq!(set.records.len(), 1);
        let r = set.records[0];
        assert_eq!((r.outcome_a, r.outcome_b), (1, 0));
        assert_eq!(r.offset_ns(), 100.5);
        assert_eq!(r.settings, s0());
    }

    #[test]
    fn different_pulses_never_match() {
        let a = [ev(7, 100.0, 1, Station::Alice)];
        let b = [ev(8, 100.0, 1, Station::Bob)];
        assert!(find_coincidences(&a, &b, 2.0, s0()).records.is_empty());
    }

    #[test]
    fn window_is_full_width() {
        let a = [ev(1, 100.0, 1, Station::Alice), ev(2, 100.0, 1, Station::Alice)];
        let b = [ev(1, 101.0, 1, Station::Bob), ev(2, 101.01, 1, Station::Bob)];
        let set = find_coincidences(&a, &b, 2.0, s0());
        assert_eq!(set.records.len(), 1);
        assert_eq!(set.records[0].pulse_index, 1);
    }

    #[test]
    fn double_fire_discards_the_pulse() {
        let a = [ev(3, 100.0, 1, Station::Alice), ev(3, 300.0, 0, Station::Alice)];
        let b = [ev(3, 100.2, 1, Station::Bob)];
        let set = find_coincidences(&a, &b, 2.0, s0());
        assert!(set.records.is_empty());
        assert_eq!(set.stats.ambiguous_a, 1);
        assert_eq!(set.stats.ambiguous_b, 0);
        // also tallied when the other station saw nothing
        let set = find_coincidences(&a, &[], 2.0, s0());
        assert_eq!(set.stats.ambiguous_a, 1);
    }

    #[test]
    fn greedy_nearest_within_pulse() {
        let a = [ev(5, 100.0, 1, Station::Alice), ev(5, 100.8, 1, Station::Alice)];
        let b = [ev(5, 100.7, 0, Station::Bob)];
        let set = find_coincidences(&a, &b, 2.0, s0());
        assert_eq!(set.records.len(), 1);
        assert_eq!(set.records[0].offset_a_ns, 100.8);
        assert_eq!(set.stats.contended, 1);
    }

    #[test]
    fn count_classification() {
        let recs: Vec<_> = (0..10)
            .map(|i| CoincidenceRecord {
                pulse_index: i,
                offset_a_ns: 10.0,
                offset_b_ns: 10.5,
                outcome_a: 1,
                outcome_b: 1,
                settings: s0(),
            })
            .collect();
        let cfg = SlotConfig::new(5, 100.0).unwrap();
        let t = classify_counts(&recs, &cfg);
        assert_eq!(t.get(s0(), 0), CoincidenceCounts::new(10, 0, 0, 0));
        assert_eq!(t.get(s0(), 1), CoincidenceCounts::default());

        let empty = classify_counts(&[], &cfg);
        assert!(empty.counts.is_empty());
        assert_eq!(empty.get(s0(), 0).total(), 0);
    }

    #[test]
    fn mixed_counts_match_brute_force_tally() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let settings = [SettingPair::new(0.0, 22.5), SettingPair::new(45.0, 67.5)];
        let cfg = SlotConfig::new(5, 100.0).unwrap();
        let recs: Vec<_> = (0..5000)
            .map(|i| {
                let off: f64 = rng.random_range(-50.0..600.0);
                CoincidenceRecord {
                    pulse_index: i,
                    offset_a_ns: off,
                    offset_b_ns: off + rng.random_range(-1.0..1.0),
                    outcome_a: rng.random_range(0..2),
                    outcome_b: rng.random_range(0..2),
                    settings: settings[rng.random_range(0..2)],
                }
            })
            .collect();
        let table = classify_counts(&recs, &cfg);
        let mut unslotted = 0;
        for s in settings {
            for slot in 0..5 {
                let lo = slot as f64 * 100.0;
                let mut brute = [0u64; 4];
                for r in &recs {
                    let t = 0.5 * (r.offset_a_ns + r.offset_b_ns);
                    if r.settings.key() == s.key() && t >= lo && t < lo + 100.0 {
                        let idx = match (r.outcome_a, r.outcome_b) {
                            (1, 1) => 0,
                            (0, 0) => 1,
                            (1, 0) => 2,
                            _ => 3,
                        };
                        brute[idx] += 1;
                    }
                }
                assert_eq!(table.get(s, slot), CoincidenceCounts::new(brute[0], brute[1], brute[2], brute[3]));
            }
        }
        for r in &recs {
            let t = 0.5 * (r.offset_a_ns + r.offset_b_ns);
            if !(0.0..500.0).contains(&t) {
                unslotted += 1;
            }
        }
        assert_eq!(table.unslotted, unslotted);
    }

    #[test]
    fn accidental_formula() {
        let x = expected_accidentals(200.0, 200.0, 2.0, 30.0);
        assert!((x - 2.4e-3).abs() < 1e-15);
        assert_eq!(expected_accidentals(0.0, 200.0, 2.0, 30.0), 0.0);
        assert!((expected_accidentals(1000.0, 1000.0, 1.0, 1.0) - 1.0e-3).abs() < 1e-15);
    }

    fn arb_events(station: Station) -> impl Strategy<Value = Vec<DetectionEvent>> {
        proptest::collection::vec((0u64..40, 0.0f64..8.0, 0u8..2), 0..60).prop_map(move |mut v| {
            v.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)));
            v.into_iter().map(|(p, o, b)| ev(p, o, b, station)).collect()
        })
    }

    proptest! {
        #[test]
        fn matching_symmetric_and_injective(a in arb_events(Station::Alice), b in arb_events(Station::Bob)) {
            let ab = find_coincidences(&a, &b, 2.0, s0());
            let ba = find_coincidences(&b, &a, 2.0, s0().swapped());
            let key = |p: u64, x: f64, y: f64, oa: u8, ob: u8| (p, x.to_bits(), y.to_bits(), oa, ob);
            let mut fwd: Vec<_> = ab.records.iter()
                .map(|r| key(r.pulse_index, r.offset_a_ns, r.offset_b_ns, r.outcome_a, r.outcome_b)).collect();
            let mut rev: Vec<_> = ba.records.iter()
                .map(|r| key(r.pulse_index, r.offset_b_ns, r.offset_a_ns, r.outcome_b, r.outcome_a)).collect();
            fwd.sort();
            rev.sort();
            prop_assert_eq!(&fwd, &rev);
            prop_assert_eq!(ab.stats.ambiguous_a, ba.stats.ambiguous_b);

            // no detection used twice
            let mut used_a: Vec<_> = ab.records.iter().map(|r| (r.pulse_index, r.offset_a_ns.to_bits())).collect();
            let n = used_a.len();
            used_a.sort();
            used_a.dedup();
            let dup_a_in_input = a.windows(2).any(|w| w[0].pulse_index == w[1].pulse_index && w[0].offset_ns == w[1].offset_ns);
            if !dup_a_in_input {
                prop_assert_eq!(used_a.len(), n);
            }
            for r in &ab.records {
                prop_assert!((r.offset_a_ns - r.offset_b_ns).abs() <= 1.0);
            }
        }
    }
}
