//! Shared domain vocabulary: time tags, detections, coincidences, settings
//! and the slot partition of a pulse.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// A single measurement outcome, always `0` or `1`.
pub type Bit = u8;

pub const PS_PER_NS: f64 = 1_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Station {
    Alice,
    Bob,
}

impl Station {
    pub fn as_str(self) -> &'static str {
        match self {
            Station::Alice => "alice",
            Station::Bob => "bob",
        }
    }
}

impl fmt::Display for Station {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Station {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alice" | "a" => Ok(Station::Alice),
            "bob" | "b" => Ok(Station::Bob),
            other => Err(Error::Config(format!("unknown station `{other}`"))),
        }
    }
}

/// Converter input channel. Channel ids on disk are 1, 2 and 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    /// Detector of outcome "1".
    Out1,
    /// Detector of outcome "0".
    Out0,
    /// Pulse start signal.
    Trigger,
}

impl Channel {
    pub fn id(self) -> u8 {
        match self {
            Channel::Out1 => 1,
            Channel::Out0 => 2,
            Channel::Trigger => 3,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(Channel::Out1),
            2 => Some(Channel::Out0),
            3 => Some(Channel::Trigger),
            _ => None,
        }
    }

    /// Outcome bit recorded by a detection on this channel.
    pub fn outcome(self) -> Option<Bit> {
        match self {
            Channel::Out1 => Some(1),
            Channel::Out0 => Some(0),
            Channel::Trigger => None,
        }
    }

    pub fn for_outcome(bit: Bit) -> Self {
        if bit == 0 {
            Channel::Out0
        } else {
            Channel::Out1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeTagRecord {
    /// Picoseconds since the stream origin.
    pub time_ps: u64,
    pub channel: Channel,
}

impl TimeTagRecord {
    pub fn new(time_ps: u64, channel: Channel) -> Self {
        Self { time_ps, channel }
    }
}

/// All records of one station's converter for one run, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TimeTagStream {
    pub records: Vec<TimeTagRecord>,
}

impl TimeTagStream {
    pub fn new(records: Vec<TimeTagRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Trigger timestamps in stream order.
    pub fn trigger_times(&self) -> Vec<u64> {
        self.records
            .iter()
            .filter(|r| r.channel == Channel::Trigger)
            .map(|r| r.time_ps)
            .collect()
    }

    pub fn detections(&self) -> impl Iterator<Item = &TimeTagRecord> + '_ {
        self.records.iter().filter(|r| r.channel != Channel::Trigger)
    }

    /// Number of places where a timestamp is smaller than its predecessor.
    pub fn order_violations(&self) -> usize {
        self.records
            .windows(2)
            .filter(|w| w[1].time_ps < w[0].time_ps)
            .count()
    }
}

/// A photon detection positioned relative to the start of its pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub pulse_index: u64,
    /// Nanoseconds since the start of pulse `pulse_index`; negative only for
    /// detections that precede the first pulse of the run.
    pub offset_ns: f64,
    pub outcome: Bit,
    pub station: Station,
}

/// Analyzer angles in degrees, reduced modulo 180.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettingPair {
    pub alpha_deg: f64,
    pub beta_deg: f64,
}

fn reduce_angle(deg: f64) -> f64 {
    let r = deg.rem_euclid(180.0);
    // tiny negative inputs land at (or just below) 180
    if r >= 180.0 - 1e-9 {
        0.0
    } else {
        r
    }
}

impl SettingPair {
    pub fn new(alpha_deg: f64, beta_deg: f64) -> Self {
        Self {
            alpha_deg: reduce_angle(alpha_deg),
            beta_deg: reduce_angle(beta_deg),
        }
    }

    /// Analyzer angle difference α − β in degrees.
    pub fn delta_deg(&self) -> f64 {
        self.alpha_deg - self.beta_deg
    }

    pub fn key(&self) -> SettingKey {
        SettingKey::from(*self)
    }

    /// The same physical setting seen with the stations exchanged.
    pub fn swapped(&self) -> Self {
        Self::new(self.beta_deg, self.alpha_deg)
    }
}

/// Hashable, totally ordered identity of a [`SettingPair`] (micro-degrees).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SettingKey {
    alpha_udeg: i64,
    beta_udeg: i64,
}

impl From<SettingPair> for SettingKey {
    fn from(s: SettingPair) -> Self {
        let q = |d: f64| ((d * 1e6).round() as i64).rem_euclid(180_000_000);
        Self {
            alpha_udeg: q(s.alpha_deg),
            beta_udeg: q(s.beta_deg),
        }
    }
}

impl SettingKey {
    pub fn settings(&self) -> SettingPair {
        SettingPair::new(self.alpha_udeg as f64 * 1e-6, self.beta_udeg as f64 * 1e-6)
    }
}

/// A matched Alice/Bob detection pair from the same pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceRecord {
    pub pulse_index: u64,
    pub offset_a_ns: f64,
    pub offset_b_ns: f64,
    pub outcome_a: Bit,
    pub outcome_b: Bit,
    pub settings: SettingPair,
}

impl CoincidenceRecord {
    /// Time used for slot assignment: the mean of both stations' offsets.
    pub fn offset_ns(&self) -> f64 {
        0.5 * (self.offset_a_ns + self.offset_b_ns)
    }

    pub fn outcome(&self, station: Station) -> Bit {
        match station {
            Station::Alice => self.outcome_a,
            Station::Bob => self.outcome_b,
        }
    }
}

/// Partition of the pulse into `n_slots` equal half-open intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotConfig {
    pub n_slots: usize,
    pub slot_width_ns: f64,
    pub pulse_duration_ns: f64,
}

impl SlotConfig {
    pub fn new(n_slots: usize, slot_width_ns: f64) -> Result<Self> {
        Self::with_duration(n_slots, slot_width_ns, n_slots as f64 * slot_width_ns)
    }

    /// Builds a slot partition that must tile `pulse_duration_ns` exactly.
    pub fn with_duration(n_slots: usize, slot_width_ns: f64, pulse_duration_ns: f64) -> Result<Self> {
        let cfg = Self {
            n_slots,
            slot_width_ns,
            pulse_duration_ns,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_slots == 0 {
            return Err(Error::Config("slot count must be positive".into()));
        }
        if !(self.slot_width_ns.is_finite() && self.slot_width_ns > 0.0) {
            return Err(Error::Config(format!(
                "slot width must be positive, got {} ns",
                self.slot_width_ns
            )));
        }
        let covered = self.n_slots as f64 * self.slot_width_ns;
        if (covered - self.pulse_duration_ns).abs() > 1e-9 * self.pulse_duration_ns.abs().max(1.0) {
            return Err(Error::Config(format!(
                "{} slots x {} ns = {} ns does not match the pulse duration of {} ns",
                self.n_slots, self.slot_width_ns, covered, self.pulse_duration_ns
            )));
        }
        Ok(())
    }

    /// Slot containing `offset_ns`, or `None` outside `[0, pulse_duration)`.
    pub fn slot_of(&self, offset_ns: f64) -> Option<usize> {
        if !(offset_ns >= 0.0 && offset_ns < self.pulse_duration_ns) {
            return None;
        }
        let k = (offset_ns / self.slot_width_ns).floor() as usize;
        Some(k.min(self.n_slots - 1))
    }

    /// Short label such as `5x100`.
    pub fn label(&self) -> String {
        format!("{}x{}", self.n_slots, crate::format::trim_float(self.slot_width_ns))
    }

    /// Parses `<n>x<width_ns>`, e.g. `10x50`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (n, w) = spec
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Config(format!("slot spec `{spec}` is not of the form <n>x<width_ns>")))?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad slot count in `{spec}`")))?;
        let w: f64 = w
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad slot width in `{spec}`")))?;
        Self::new(n, w)
    }
}

/// One binary outcome series: one station, one run, one slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSeries {
    pub station: Station,
    pub run_id: String,
    pub slot_index: usize,
    pub bits: Vec<Bit>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five_by_100() -> SlotConfig {
        SlotConfig::new(5, 100.0).unwrap()
    }

    #[test]
    fn slot_boundaries_are_half_open() {
        let cfg = five_by_100();
        assert_eq!(cfg.slot_of(0.0), Some(0));
        assert_eq!(cfg.slot_of(99.999), Some(0));
        assert_eq!(cfg.slot_of(100.0), Some(1));
        assert_eq!(cfg.slot_of(499.9), Some(4));
        assert_eq!(cfg.slot_of(500.0), None);
        assert_eq!(cfg.slot_of(600.0), None);
        assert_eq!(cfg.slot_of(-0.001), None);
        assert_eq!(cfg.slot_of(f64::NAN), None);
    }

    #[test]
    fn zero_width_is_a_config_error() {
        assert!(matches!(SlotConfig::new(5, 0.0), Err(Error::Config(_))));
        assert!(matches!(SlotConfig::new(0, 100.0), Err(Error::Config(_))));
        assert!(SlotConfig::with_duration(5, 50.0, 500.0).is_err());
        assert!(SlotConfig::with_duration(10, 50.0, 500.0).is_ok());
    }

    #[test]
    fn slot_spec_parsing() {
        let cfg = SlotConfig::parse("10x50").unwrap();
        assert_eq!(cfg.n_slots, 10);
        assert_eq!(cfg.pulse_duration_ns, 500.0);
        assert_eq!(cfg.label(), "10x50");
        assert!(SlotConfig::parse("10-50").is_err());
        assert!(SlotConfig::parse("ax50").is_err());
    }

    #[test]
    fn angles_reduce_modulo_180() {
        let s = SettingPair::new(202.5, -22.5);
        assert!((s.alpha_deg - 22.5).abs() < 1e-12);
        assert!((s.beta_deg - 157.5).abs() < 1e-12);
        assert_eq!(SettingPair::new(180.0, 0.0).key(), SettingPair::new(0.0, 0.0).key());
        assert_eq!(SettingPair::new(-1e-13, 0.0).alpha_deg, 0.0);
    }

    #[test]
    fn channel_ids_round_trip() {
        for ch in [Channel::Out1, Channel::Out0, Channel::Trigger] {
            assert_eq!(Channel::from_id(ch.id()), Some(ch));
        }
        assert_eq!(Channel::from_id(0), None);
        assert_eq!(Channel::from_id(4), None);
        assert_eq!(Channel::Out1.outcome(), Some(1));
        assert_eq!(Channel::Out0.outcome(), Some(0));
    }

    proptest::proptest! {
        #[test]
        fn every_in_pulse_offset_gets_exactly_one_slot(
            n in 1usize..20,
            w in 1.0f64..200.0,
            frac in 0.0f64..1.0,
        ) {
            let cfg = SlotConfig::new(n, w).unwrap();
            let offset = frac * cfg.pulse_duration_ns;
            let slot = cfg.slot_of(offset);
            proptest::prop_assert!(slot.is_some());
            let k = slot.unwrap();
            proptest::prop_assert!(k < n);
            // the offset lies in [k w, (k+1) w) up to rounding at the last slot
            proptest::prop_assert!(offset >= k as f64 * w - 1e-9);
            proptest::prop_assert!(offset < (k + 1) as f64 * w + 1e-9);
        }
    }
}
