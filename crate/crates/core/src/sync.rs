//! Pulse numbering across two independently clocked stations.
//!
//! The pump repetition rate is switched between blocks of pulses. Each
//! station sees the rate changes as abrupt jumps of its inter-trigger
//! interval; matching those jumps between the two trigger lists fixes the
//! relative pulse numbering without scanning coincidence delays. An affine
//! clock model (offset + rate ratio) is then fitted to the matched triggers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DetectionEvent, Station, TimeTagStream, PS_PER_NS};

/// Relative interval jump that marks a block edge.
pub const EDGE_THRESHOLD: f64 = 0.05;

pub const DEFAULT_TRIGGER_DELAY_NS: f64 = 57.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBlock {
    pub rate_hz: f64,
    pub pulses: u64,
}

/// Cyclic sequence of constant-rate blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationPattern {
    pub blocks: Vec<RateBlock>,
}

impl Default for ModulationPattern {
    fn default() -> Self {
        Self {
            blocks: vec![
                RateBlock {
                    rate_hz: 500e3,
                    pulses: 1000,
                },
                RateBlock {
                    rate_hz: 450e3,
                    pulses: 1000,
                },
            ],
        }
    }
}

impl ModulationPattern {
    /// A single fixed rate. Useful for simulations; not synchronizable.
    pub fn constant(rate_hz: f64) -> Self {
        Self {
            blocks: vec![RateBlock { rate_hz, pulses: 1 }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("modulation pattern has no blocks".into()));
        }
        for b in &self.blocks {
            if !(b.rate_hz.is_finite() && b.rate_hz > 0.0) {
                return Err(Error::Config(format!("invalid repetition rate {} Hz", b.rate_hz)));
            }
            if b.pulses == 0 {
                return Err(Error::Config("modulation block with zero pulses".into()));
            }
        }
        Ok(())
    }

    /// Checks the pattern can be used for synchronization: at least two
    /// rates that are told apart by the edge threshold.
    pub fn validate_for_sync(&self) -> Result<()> {
        self.validate()?;
        let mut rates: Vec<f64> = self.blocks.iter().map(|b| b.rate_hz).collect();
        rates.sort_by(f64::total_cmp);
        rates.dedup();
        if rates.len() < 2 {
            return Err(Error::Config("modulation pattern needs at least two distinct rates".into()));
        }
        for w in self.blocks.windows(2).chain(std::iter::once(
            [self.blocks[self.blocks.len() - 1], self.blocks[0]].as_slice(),
        )) {
            let (p0, p1) = (1.0 / w[0].rate_hz, 1.0 / w[1].rate_hz);
            if p0 != p1 && (p0 - p1).abs() <= EDGE_THRESHOLD * p0.min(p1) {
                return Err(Error::Config(format!(
                    "rates {} Hz and {} Hz differ by less than the {}% edge threshold",
                    w[0].rate_hz,
                    w[1].rate_hz,
                    EDGE_THRESHOLD * 100.0
                )));
            }
        }
        Ok(())
    }

    pub fn cycle_pulses(&self) -> u64 {
        self.blocks.iter().map(|b| b.pulses).sum()
    }

    /// Time from pulse `index` to pulse `index + 1`, in picoseconds.
    pub fn period_ps(&self, index: u64) -> f64 {
        let mut phase = index % self.cycle_pulses();
        for b in &self.blocks {
            if phase < b.pulses {
                return 1e12 / b.rate_hz;
            }
            phase -= b.pulses;
        }
        unreachable!("phase is below the cycle length")
    }

    pub fn mean_period_ps(&self) -> f64 {
        let total: f64 = self.blocks.iter().map(|b| b.pulses as f64 * 1e12 / b.rate_hz).sum();
        total / self.cycle_pulses() as f64
    }

    pub fn min_period_ps(&self) -> f64 {
        self.blocks.iter().map(|b| 1e12 / b.rate_hz).fold(f64::INFINITY, f64::min)
    }

    fn classify(&self, interval_ps: f64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, b) in self.blocks.iter().enumerate() {
            let p = 1e12 / b.rate_hz;
            let rel = (interval_ps - p).abs() / p;
            if best.is_none_or(|(_, r)| rel < r) {
                best = Some((k, rel));
            }
        }
        // rate classes are identified by rate value, not block position
        best.filter(|&(_, rel)| rel < 0.5 * EDGE_THRESHOLD).map(|(k, _)| {
            let rate = self.blocks[k].rate_hz;
            self.blocks.iter().position(|b| b.rate_hz == rate).unwrap_or(k)
        })
    }
}

/// A detected rate change inside one trigger list.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Boundary {
    /// Ordinal of the first trigger of the new block.
    ordinal: usize,
    from: usize,
    to: usize,
    time_ps: u64,
}

fn median(values: &mut [f64]) -> f64 {
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

fn find_boundaries(triggers: &[u64], pattern: &ModulationPattern, station: Station) -> Result<Vec<Boundary>> {
    if triggers.len() < 3 {
        return Err(Error::SyncAmbiguous(format!(
            "{station} has only {} triggers",
            triggers.len()
        )));
    }
    let intervals: Vec<f64> = triggers
        .windows(2)
        .map(|w| w[1].checked_sub(w[0]).map(|d| d as f64))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::SyncFailure(format!("{station} trigger times are not increasing")))?;
    let nominal = median(&mut intervals.clone());
    let threshold = EDGE_THRESHOLD * nominal;

    // block starts in interval-index space
    let mut starts = vec![0usize];
    for i in 1..intervals.len() {
        if (intervals[i] - intervals[i - 1]).abs() > threshold {
            starts.push(i);
        }
    }
    starts.push(intervals.len());

    let mut classes = Vec::with_capacity(starts.len() - 1);
    for w in starts.windows(2) {
        let block = &intervals[w[0]..w[1]];
        let mean = block.iter().sum::<f64>() / block.len() as f64;
        let class = pattern.classify(mean).ok_or_else(|| {
            Error::SyncFailure(format!(
                "{station}: block of {} intervals starting at trigger {} has mean period {:.1} ps, \
                 which matches no modulation rate (missing or spurious triggers?)",
                block.len(),
                w[0],
                mean
            ))
        })?;
        classes.push(class);
    }

    let mut out = Vec::new();
    for k in 1..classes.len() {
        if classes[k] == classes[k - 1] {
            return Err(Error::SyncFailure(format!(
                "{station}: interval jump at trigger {} without a rate change",
                starts[k]
            )));
        }
        out.push(Boundary {
            ordinal: starts[k],
            from: classes[k - 1],
            to: classes[k],
            time_ps: triggers[starts[k]],
        });
    }
    Ok(out)
}

/// Mapping of both stations' trigger ordinals onto a shared pulse numbering
/// plus the fitted clock model `t_bob ≈ offset_ps + rate_ratio · t_alice`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseIndexMap {
    /// Pulse index of Alice's first trigger.
    pub first_index_a: u64,
    /// Pulse index of Bob's first trigger.
    pub first_index_b: u64,
    pub triggers_a: usize,
    pub triggers_b: usize,
    pub rate_ratio: f64,
    pub offset_ps: f64,
    pub residual_rms_ps: f64,
    pub residual_max_ps: f64,
    pub matched_boundaries: usize,
    pub matched_triggers: usize,
}

impl PulseIndexMap {
    pub fn first_index(&self, station: Station) -> u64 {
        match station {
            Station::Alice => self.first_index_a,
            Station::Bob => self.first_index_b,
        }
    }

    pub fn trigger_count(&self, station: Station) -> usize {
        match station {
            Station::Alice => self.triggers_a,
            Station::Bob => self.triggers_b,
        }
    }

    /// Pulse index of the `ordinal`-th trigger of `station`.
    pub fn pulse_index(&self, station: Station, ordinal: usize) -> u64 {
        self.first_index(station) + ordinal as u64
    }
}

fn boundaries_agree(
    a: &[Boundary],
    b: &[Boundary],
    by_ordinal_a: &HashMap<usize, usize>,
    by_ordinal_b: &HashMap<usize, usize>,
    shift: i64,
    len_a: usize,
    len_b: usize,
) -> Option<usize> {
    // shift maps a B ordinal onto the A ordinal of the same pulse
    let mut matched = 0;
    for bb in b {
        let oa = bb.ordinal as i64 + shift;
        if oa < 1 || oa >= len_a as i64 - 1 {
            continue;
        }
        let ia = *by_ordinal_a.get(&(oa as usize))?;
        if (a[ia].from, a[ia].to) != (bb.from, bb.to) {
            return None;
        }
        matched += 1;
    }
    for ba in a {
        let ob = ba.ordinal as i64 - shift;
        if ob < 1 || ob >= len_b as i64 - 1 {
            continue;
        }
        by_ordinal_b.get(&(ob as usize))?;
    }
    Some(matched)
}

/// Recovers the relative pulse numbering of two trigger lists.
pub fn recover_pulse_numbering(
    triggers_a: &[u64],
    triggers_b: &[u64],
    pattern: &ModulationPattern,
) -> Result<PulseIndexMap> {
    pattern.validate()?;
    if triggers_a.is_empty() || triggers_b.is_empty() {
        return Err(Error::SyncAmbiguous("a station has no triggers".into()));
    }
    let edges_a = find_boundaries(triggers_a, pattern, Station::Alice)?;
    let edges_b = find_boundaries(triggers_b, pattern, Station::Bob)?;
    if edges_a.is_empty() || edges_b.is_empty() {
        return Err(Error::SyncAmbiguous(format!(
            "no rate change detected (alice: {} edges, bob: {} edges)",
            edges_a.len(),
            edges_b.len()
        )));
    }

    let by_ord_a: HashMap<usize, usize> = edges_a.iter().enumerate().map(|(i, e)| (e.ordinal, i)).collect();
    let by_ord_b: HashMap<usize, usize> = edges_b.iter().enumerate().map(|(i, e)| (e.ordinal, i)).collect();

    // candidate alignments: each station's first edge against every
    // compatible edge of the other; one of the two lies inside the overlap
    let mut shifts: Vec<i64> = Vec::new();
    let (first_a, first_b) = (edges_a[0], edges_b[0]);
    for ea in edges_a.iter().filter(|e| (e.from, e.to) == (first_b.from, first_b.to)) {
        shifts.push(ea.ordinal as i64 - first_b.ordinal as i64);
    }
    for eb in edges_b.iter().filter(|e| (e.from, e.to) == (first_a.from, first_a.to)) {
        shifts.push(first_a.ordinal as i64 - eb.ordinal as i64);
    }
    shifts.sort_unstable();
    shifts.dedup();
    let mut best: Option<(i64, usize, f64)> = None;
    let mut consistent = 0usize;
    for shift in shifts {
        let Some(matched) = boundaries_agree(
            &edges_a,
            &edges_b,
            &by_ord_a,
            &by_ord_b,
            shift,
            triggers_a.len(),
            triggers_b.len(),
        ) else {
            continue;
        };
        if matched == 0 {
            continue;
        }
        let lo = shift.max(0);
        if lo >= triggers_a.len() as i64 || lo - shift >= triggers_b.len() as i64 {
            continue;
        }
        consistent += 1;
        let dt = (triggers_b[(lo - shift) as usize] as f64 - triggers_a[lo as usize] as f64).abs();
        if best.is_none_or(|(_, _, d)| dt < d) {
            best = Some((shift, matched, dt));
        }
    }
    let Some((shift, matched, _)) = best else {
        return Err(Error::SyncFailure(format!(
            "block structures disagree: alice has {} edges, bob has {}, no alignment is consistent",
            edges_a.len(),
            edges_b.len()
        )));
    };
    if consistent > 1 {
        log::debug!("{consistent} cycle-equivalent alignments; chose the one with the smallest clock offset");
    }

    // overlap in A ordinals
    let lo = shift.max(0) as usize;
    let hi = (triggers_b.len() as i64 + shift).min(triggers_a.len() as i64);
    if hi <= lo as i64 + 1 {
        return Err(Error::SyncFailure("trigger lists do not overlap".into()));
    }
    let hi = hi as usize;
    let pairs = || (lo..hi).map(|ia| (triggers_a[ia], triggers_b[(ia as i64 - shift) as usize]));
    let (rate_ratio, offset_ps, rms, max) = fit_affine(pairs, hi - lo);

    let base = (-shift).max(0) as u64;
    Ok(PulseIndexMap {
        first_index_a: base,
        first_index_b: (base as i64 + shift) as u64,
        triggers_a: triggers_a.len(),
        triggers_b: triggers_b.len(),
        rate_ratio,
        offset_ps,
        residual_rms_ps: rms,
        residual_max_ps: max,
        matched_boundaries: matched,
        matched_triggers: hi - lo,
    })
}

/// Least-squares `y = offset + ratio · x` with residual statistics.
fn fit_affine<I, F>(pairs: F, n: usize) -> (f64, f64, f64, f64)
where
    F: Fn() -> I,
    I: Iterator<Item = (u64, u64)>,
{
    let (x0, y0) = pairs().next().expect("non-empty overlap");
    let rel = |(x, y): (u64, u64)| (x as f64 - x0 as f64, y as f64 - y0 as f64);
    let nf = n as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for p in pairs() {
        let (x, y) = rel(p);
        sx += x;
        sy += y;
    }
    let (mx, my) = (sx / nf, sy / nf);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for p in pairs() {
        let (x, y) = rel(p);
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let ratio = if sxx > 0.0 { sxy / sxx } else { 1.0 };
    let intercept_rel = my - ratio * mx;
    let (mut ss, mut max) = (0.0f64, 0.0f64);
    for p in pairs() {
        let (x, y) = rel(p);
        let r = y - (intercept_rel + ratio * x);
        ss += r * r;
        max = max.max(r.abs());
    }
    // back to absolute coordinates: y0 + c + ratio (x - x0)
    let offset = y0 as f64 + intercept_rel - ratio * x0 as f64;
    (ratio, offset, (ss / nf).sqrt(), max)
}

/// Detections of one station split by whether they fall inside a pulse.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    pub in_pulse: Vec<DetectionEvent>,
    pub out_of_pulse: Vec<DetectionEvent>,
}

impl Assignment {
    pub fn total(&self) -> usize {
        self.in_pulse.len() + self.out_of_pulse.len()
    }
}

/// Positions every detection of `stream` relative to the start of its pulse
/// (`trigger − trigger_delay`). Detections outside `[0, pulse_duration)` of the
/// latest started pulse, or before the first pulse, are out-of-pulse.
pub fn assign_detections(
    stream: &TimeTagStream,
    station: Station,
    map: &PulseIndexMap,
    trigger_delay_ns: f64,
    pulse_duration_ns: f64,
) -> Result<Assignment> {
    let triggers = stream.trigger_times();
    if triggers.len() != map.trigger_count(station) {
        return Err(Error::SyncFailure(format!(
            "{station}: index map covers {} triggers but the stream has {}",
            map.trigger_count(station),
            triggers.len()
        )));
    }
    if triggers.is_empty() {
        return Err(Error::SyncFailure(format!("{station}: no triggers")));
    }
    let delay_ps = (trigger_delay_ns * PS_PER_NS).round() as i128;
    let starts: Vec<i128> = triggers.iter().map(|&t| t as i128 - delay_ps).collect();

    let mut out = Assignment::default();
    for rec in stream.detections() {
        let outcome = rec.channel.outcome().expect("detections carry an outcome");
        let t = rec.time_ps as i128;
        let after = starts.partition_point(|&s| s <= t);
        let (ordinal, in_range) = if after == 0 { (0, false) } else { (after - 1, true) };
        let offset_ns = (t - starts[ordinal]) as f64 / PS_PER_NS;
        let ev = DetectionEvent {
            pulse_index: map.pulse_index(station, ordinal),
            offset_ns,
            outcome,
            station,
        };
        if in_range && offset_ns < pulse_duration_ns {
            out.in_pulse.push(ev);
        } else {
            out.out_of_pulse.push(ev);
        }
    }
    let key = |e: &DetectionEvent| (e.pulse_index, e.offset_ns);
    out.in_pulse.sort_by(|x, y| key(x).partial_cmp(&key(y)).expect("finite offsets"));
    out.out_of_pulse.sort_by(|x, y| key(x).partial_cmp(&key(y)).expect("finite offsets"));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeHistogram {
    pub start_ns: f64,
    pub bin_ns: f64,
    pub counts: Vec<u64>,
}

impl TimeHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_start(&self, k: usize) -> f64 {
        self.start_ns + k as f64 * self.bin_ns
    }
}

/// Histogram of offsets over `[start_ns, end_ns)`; offsets outside the range
/// are not counted.
pub fn build_time_histogram<I>(offsets_ns: I, bin_ns: f64, start_ns: f64, end_ns: f64) -> Result<TimeHistogram>
where
    I: IntoIterator<Item = f64>,
{
    if !(bin_ns > 0.0) || !(end_ns > start_ns) {
        return Err(Error::Config(format!(
            "histogram needs bin > 0 and a non-empty range, got bin {bin_ns} over [{start_ns}, {end_ns})"
        )));
    }
    let n_bins = ((end_ns - start_ns) / bin_ns).ceil() as usize;
    let mut counts = vec![0u64; n_bins];
    for x in offsets_ns {
        if x >= start_ns && x < end_ns {
            let k = (((x - start_ns) / bin_ns) as usize).min(n_bins - 1);
            counts[k] += 1;
        }
    }
    Ok(TimeHistogram {
        start_ns,
        bin_ns,
        counts,
    })
}

/// Estimates the trigger delay from the detection-time profile: the square
/// window of one pulse duration that holds the most detections, measured
/// relative to the nearest trigger, starts `delay` before the trigger.
pub fn estimate_trigger_delay(stream: &TimeTagStream, pulse_duration_ns: f64, bin_ns: f64) -> Result<f64> {
    let triggers = stream.trigger_times();
    if triggers.len() < 2 {
        return Err(Error::InsufficientData("need at least two triggers".into()));
    }
    let min_period_ns = triggers
        .windows(2)
        .map(|w| (w[1] - w[0]) as f64 / PS_PER_NS)
        .fold(f64::INFINITY, f64::min);
    let half = 0.5 * min_period_ns;
    let rel = stream.detections().filter_map(|r| {
        let t = r.time_ps;
        let i = triggers.partition_point(|&s| s <= t);
        let mut best: Option<f64> = None;
        for j in [i.wrapping_sub(1), i] {
            if let Some(&s) = triggers.get(j) {
                let d = (t as f64 - s as f64) / PS_PER_NS;
                if best.is_none_or(|b| d.abs() < b.abs()) {
                    best = Some(d);
                }
            }
        }
        best
    });
    let hist = build_time_histogram(rel, bin_ns, -half, half)?;
    let width = ((pulse_duration_ns / bin_ns).round() as usize).max(1);
    if width > hist.counts.len() {
        return Err(Error::Config("pulse duration exceeds half the trigger period".into()));
    }
    let mut window: u64 = hist.counts[..width].iter().sum();
    let (mut best_k, mut best) = (0usize, window);
    for k in 1..=hist.counts.len() - width {
        window = window + hist.counts[k + width - 1] - hist.counts[k - 1];
        if window > best {
            best = window;
            best_k = k;
        }
    }
    if best == 0 {
        return Err(Error::InsufficientData("no detections".into()));
    }
    Ok(-hist.bin_start(best_k))
}
