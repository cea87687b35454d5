//! Monte-Carlo model of the pulsed two-station setup.
//!
//! Pulses are emitted on an ideal time base following the modulation
//! pattern. Each pulse carries at most one photon pair with probability
//! `pair_yield_per_pulse`; the pair's emission time is uniform inside the
//! square pulse and its joint polarization outcome follows the selected
//! source model. Each arm thins its photon by detector efficiency, adds
//! Gaussian jitter and Poisson dark counts, and timestamps everything with
//! its own clock: Alice's clock is the ideal time base, Bob's is affinely
//! distorted. Triggers arrive `trigger_delay_ns` after their pulse starts.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::bell::ChshSchedule;
use crate::error::{Error, Result};
use crate::ingest::{self, ExperimentManifest, RunManifest};
use crate::randomness::MAX_CENSUS_WORD;
use crate::sync::ModulationPattern;
use crate::types::{Bit, Channel, DetectionEvent, SettingPair, Station, TimeTagRecord, TimeTagStream, PS_PER_NS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub efficiency: f64,
    pub jitter_sigma_ns: f64,
    /// Dark count rate of each of the station's two detectors.
    pub dark_rate_hz: f64,
    /// Relative efficiency loss of the outcome-0 detector, skewing the
    /// station's outcome frequencies. 0 leaves the marginals at 50/50.
    pub outcome_bias: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            efficiency: 0.5,
            jitter_sigma_ns: 0.2,
            dark_rate_hz: 100.0,
            outcome_bias: 0.0,
        }
    }
}

/// Bob's clock: `t_bob = t · (1 + rate_offset_ppm · 1e-6) + offset_ns`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClockDistortion {
    pub rate_offset_ppm: f64,
    pub offset_ns: f64,
}

impl Default for ClockDistortion {
    fn default() -> Self {
        Self {
            rate_offset_ppm: 10.0,
            offset_ns: 1000.0,
        }
    }
}

impl ClockDistortion {
    pub const IDEAL: Self = Self {
        rate_offset_ppm: 0.0,
        offset_ns: 0.0,
    };

    fn apply(&self, true_ps: f64) -> f64 {
        true_ps * (1.0 + self.rate_offset_ppm * 1e-6) + self.offset_ns * PS_PER_NS
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum SourceModel {
    /// Polarization-entangled pairs: `P(s,t) = ¼[1 + s t V cos 2(α − β)]`.
    Qm,
    /// Deterministic local hidden variable: a shared polarization angle λ
    /// uniform on [0, π), outcomes `sign cos 2(angle − λ)`.
    LocalDeterministic,
    /// Outcome series with forbidden words, generated per station and slot
    /// over the pairs detected at both arms.
    NonErgodic { forbidden: Vec<String>, n_slots: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// Cycles through the four CHSH settings `runs_per_setting` times.
    Chsh {
        #[serde(default)]
        settings: ChshSchedule,
        runs_per_setting: usize,
    },
    /// Explicit list of settings, one run each.
    Scan { settings: Vec<SettingPair> },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Chsh {
            settings: ChshSchedule::default(),
            runs_per_setting: 1,
        }
    }
}

impl Schedule {
    /// Uniform scan of Bob's analyzer over [0°, 180°) with Alice fixed.
    pub fn uniform_scan(alpha_deg: f64, n_runs: usize) -> Self {
        let settings = (0..n_runs)
            .map(|k| SettingPair::new(alpha_deg, 180.0 * k as f64 / n_runs as f64))
            .collect();
        Schedule::Scan { settings }
    }

    pub fn run_settings(&self) -> Vec<SettingPair> {
        match self {
            Schedule::Chsh {
                settings,
                runs_per_setting,
            } => (0..*runs_per_setting).flat_map(|_| settings.pairs).collect(),
            Schedule::Scan { settings } => settings.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub pulse_duration_ns: f64,
    /// Used when `modulation` is absent.
    pub repetition_rate_hz: f64,
    pub modulation: Option<ModulationPattern>,
    pub n_pulses: u64,
    pub pair_yield_per_pulse: f64,
    pub visibility: f64,
    pub detector_a: DetectorConfig,
    pub detector_b: DetectorConfig,
    pub clock_b: ClockDistortion,
    pub trigger_delay_ns: f64,
    pub trigger_jitter_ns: f64,
    /// Bob's converter starts recording at this pulse.
    pub bob_start_pulse: u64,
    pub schedule: Schedule,
    pub source_model: SourceModel,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            pulse_duration_ns: 500.0,
            repetition_rate_hz: 5e5,
            modulation: Some(ModulationPattern::default()),
            n_pulses: 1_000_000,
            // 2.67% pairs, 50% efficiency per arm: ≈2% of pulses give a detection
            pair_yield_per_pulse: 0.0267,
            visibility: 0.966,
            detector_a: DetectorConfig::default(),
            detector_b: DetectorConfig::default(),
            clock_b: ClockDistortion::default(),
            trigger_delay_ns: crate::sync::DEFAULT_TRIGGER_DELAY_NS,
            trigger_jitter_ns: 0.0,
            bob_start_pulse: 0,
            schedule: Schedule::default(),
            source_model: SourceModel::Qm,
            seed: 1,
        }
    }
}

/// First pulse starts this late so that dark counts before it exist.
const ORIGIN_PS: f64 = 1e6;

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::json("experiment config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pattern(&self) -> ModulationPattern {
        self.modulation
            .clone()
            .unwrap_or_else(|| ModulationPattern::constant(self.repetition_rate_hz))
    }

    pub fn validate(&self) -> Result<()> {
        let p = |name: &str, x: f64| -> Result<()> {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be a probability, got {x}")))
            }
        };
        p("pair_yield_per_pulse", self.pair_yield_per_pulse)?;
        p("visibility", self.visibility)?;
        for (tag, d) in [("alice", &self.detector_a), ("bob", &self.detector_b)] {
            p(&format!("{tag} efficiency"), d.efficiency)?;
            p(&format!("{tag} outcome_bias"), d.outcome_bias)?;
            if !(d.jitter_sigma_ns >= 0.0 && d.dark_rate_hz >= 0.0) {
                return Err(Error::Config(format!("{tag} detector jitter and dark rate must be >= 0")));
            }
        }
        if !(self.pulse_duration_ns > 0.0) {
            return Err(Error::Config("pulse duration must be positive".into()));
        }
        if self.trigger_jitter_ns < 0.0 || self.trigger_delay_ns < 0.0 {
            return Err(Error::Config("trigger delay and jitter must be >= 0".into()));
        }
        let pattern = self.pattern();
        pattern.validate()?;
        if pattern.min_period_ps() <= self.pulse_duration_ns * PS_PER_NS {
            return Err(Error::Config(format!(
                "pulse period {} ns does not exceed the pulse duration {} ns",
                pattern.min_period_ps() / PS_PER_NS,
                self.pulse_duration_ns
            )));
        }
        if self.n_pulses < 2 || self.bob_start_pulse >= self.n_pulses {
            return Err(Error::Config("need at least two pulses, and Bob must start before the last".into()));
        }
        if self.clock_b.rate_offset_ppm.abs() > 1e4 {
            return Err(Error::Config("clock rate offset above 1% is not supported".into()));
        }
        if let Schedule::Chsh { settings, .. } = &self.schedule {
            settings.validate()?;
        }
        if self.schedule.run_settings().is_empty() {
            return Err(Error::Config("schedule produces no runs".into()));
        }
        if let SourceModel::NonErgodic { forbidden, n_slots } = &self.source_model {
            if *n_slots == 0 {
                return Err(Error::Config("non-ergodic source needs n_slots >= 1".into()));
            }
            NonErgodicSource::new(&parse_words(forbidden)?)?;
        }
        Ok(())
    }

    pub fn n_runs(&self) -> usize {
        self.schedule.run_settings().len()
    }

    fn origin_ps(&self) -> f64 {
        ORIGIN_PS.max(ORIGIN_PS - self.clock_b.offset_ns * PS_PER_NS)
    }
}

/// Deterministic per-run random stream.
pub fn run_rng(seed: u64, run_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run_index as u64 + 1);
    rng
}

/// Ideal pulse start times (ps) of a train.
pub fn pulse_start_times(pattern: &ModulationPattern, n_pulses: u64, origin_ps: f64) -> Vec<f64> {
    let mut t = origin_ps;
    (0..n_pulses)
        .map(|j| {
            let now = t;
            t += pattern.period_ps(j);
            now
        })
        .collect()
}

/// Per-station trigger streams with ground-truth pulse indices.
#[derive(Debug, Clone)]
pub struct PulseTrain {
    pub starts_ps: Vec<f64>,
    pub alice: Vec<u64>,
    pub bob: Vec<u64>,
    /// Pulse index of Bob's first trigger.
    pub bob_first_pulse: u64,
}

pub fn generate_pulse_train<R: Rng>(cfg: &ExperimentConfig, rng: &mut R) -> Result<PulseTrain> {
    cfg.validate()?;
    let starts = pulse_start_times(&cfg.pattern(), cfg.n_pulses, cfg.origin_ps());
    let delay = cfg.trigger_delay_ns * PS_PER_NS;
    let jitter = Normal::new(0.0, cfg.trigger_jitter_ns * PS_PER_NS).expect("valid sigma");
    let mut stamp = |t: f64| -> u64 {
        let j = if cfg.trigger_jitter_ns > 0.0 { jitter.sample(rng) } else { 0.0 };
        (t + j).round().max(0.0) as u64
    };
    let alice: Vec<u64> = starts.iter().map(|&t| stamp(t + delay)).collect();
    let bob: Vec<u64> = starts[cfg.bob_start_pulse as usize..]
        .iter()
        .map(|&t| stamp(cfg.clock_b.apply(t + delay)))
        .collect();
    Ok(PulseTrain {
        starts_ps: starts,
        alice,
        bob,
        bob_first_pulse: cfg.bob_start_pulse,
    })
}

/// Hidden polarization angle of the local model, uniform on [0, π).
#[derive(Debug, Clone, Copy, Default)]
pub struct HiddenAngle;

impl HiddenAngle {
    pub fn density(&self, lambda: f64) -> f64 {
        if (0.0..PI).contains(&lambda) {
            1.0 / PI
        } else {
            0.0
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        rng.random_range(0.0..PI)
    }

    /// Outcome of an analyzer at `angle_deg` for hidden angle `lambda`.
    pub fn outcome(angle_deg: f64, lambda: f64) -> Bit {
        ((2.0 * (angle_deg.to_radians() - lambda)).cos() >= 0.0) as Bit
    }
}

/// Joint outcome law for a single emitted pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairModel {
    Qm { visibility: f64 },
    LocalDeterministic,
    /// Independent fair coins (used for detections outside the pair model).
    Uncorrelated,
}

pub fn sample_joint_outcome<R: Rng>(settings: SettingPair, model: PairModel, rng: &mut R) -> (Bit, Bit) {
    match model {
        PairModel::Qm { visibility } => {
            let corr = visibility * (2.0 * settings.delta_deg().to_radians()).cos();
            let a: Bit = rng.random_range(0..2);
            let same = rng.random::<f64>() < 0.5 * (1.0 + corr);
            (a, if same { a } else { 1 - a })
        }
        PairModel::LocalDeterministic => {
            let lambda = HiddenAngle.sample(rng);
            (
                HiddenAngle::outcome(settings.alpha_deg, lambda),
                HiddenAngle::outcome(settings.beta_deg, lambda),
            )
        }
        PairModel::Uncorrelated => (rng.random_range(0..2), rng.random_range(0..2)),
    }
}

/// `"0110"` style words to bit vectors.
pub fn parse_words(words: &[String]) -> Result<Vec<Vec<Bit>>> {
    words
        .iter()
        .map(|w| {
            if w.is_empty() || !w.bytes().all(|b| b == b'0' || b == b'1') {
                return Err(Error::Config(format!("forbidden word `{w}` is not a non-empty binary string")));
            }
            Ok(w.bytes().map(|b| b - b'0').collect())
        })
        .collect()
}

pub const MAX_FORBIDDEN_LEN: usize = 12;

/// Coin-flip generator that never completes any of a set of forbidden
/// words. States are the last `L = max_len − 1` emitted bits (fewer at the
/// start); a proposed bit is replaced by its complement when it would
/// complete a forbidden word or lead into a state from which every
/// continuation eventually must.
#[derive(Debug, Clone)]
pub struct NonErgodicSource {
    words: Vec<Vec<Bit>>,
    hist_len: usize,
    /// `alive[len][bits]`
    alive: Vec<Vec<bool>>,
}

impl NonErgodicSource {
    pub fn new(words: &[Vec<Bit>]) -> Result<Self> {
        let max_len = words.iter().map(Vec::len).max().unwrap_or(1);
        if max_len > MAX_FORBIDDEN_LEN || words.iter().any(|w| w.is_empty()) {
            return Err(Error::Config(format!(
                "forbidden words must have length 1..={MAX_FORBIDDEN_LEN}"
            )));
        }
        debug_assert!(MAX_FORBIDDEN_LEN <= MAX_CENSUS_WORD);
        let hist_len = max_len - 1;
        let mut src = Self {
            words: words.to_vec(),
            hist_len,
            alive: (0..=hist_len).map(|len| vec![true; 1 << len]).collect(),
        };
        // greatest fixed point: drop states without a live successor
        loop {
            let mut changed = false;
            for len in (0..=hist_len).rev() {
                for bits in 0..(1usize << len) {
                    if !src.alive[len][bits] {
                        continue;
                    }
                    let ok = (0..2).any(|b| src.step(len, bits, b).is_some_and(|(l, x)| src.alive[l][x]));
                    if !ok {
                        src.alive[len][bits] = false;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if !src.alive[0][0] {
            return Err(Error::Config(
                "forbidden words exclude every infinite binary series".into(),
            ));
        }
        Ok(src)
    }

    /// Successor state after appending `b`, or `None` if that completes a
    /// forbidden word.
    fn step(&self, len: usize, bits: usize, b: Bit) -> Option<(usize, usize)> {
        let ext = (bits << 1) | b as usize;
        let ext_len = len + 1;
        for w in &self.words {
            if w.len() <= ext_len {
                let tail = ext & ((1usize << w.len()) - 1);
                let word = w.iter().fold(0usize, |acc, &x| (acc << 1) | x as usize);
                if tail == word {
                    return None;
                }
            }
        }
        let new_len = ext_len.min(self.hist_len);
        Some((new_len, ext & ((1usize << new_len) - 1)))
    }

    /// Generator state before any bit has been emitted.
    pub fn start(&self) -> NonErgodicState {
        NonErgodicState { len: 0, bits: 0 }
    }

    pub fn next_bit<R: Rng>(&self, state: &mut NonErgodicState, rng: &mut R) -> Bit {
        let b: Bit = rng.random_range(0..2);
        let pick = |b: Bit| self.step(state.len, state.bits, b).filter(|&(l, x)| self.alive[l][x]);
        let (bit, (len, bits)) = match pick(b) {
            Some(s) => (b, s),
            None => (1 - b, pick(1 - b).expect("alive state has a live successor")),
        };
        *state = NonErgodicState { len, bits };
        bit
    }

    pub fn generate<R: Rng>(&self, len: usize, rng: &mut R) -> Vec<Bit> {
        let mut state = self.start();
        (0..len).map(|_| self.next_bit(&mut state, rng)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonErgodicState {
    len: usize,
    bits: usize,
}

/// Binary series of length `len` in which none of `forbidden` occurs.
pub fn sample_nonergodic_series<R: Rng>(len: usize, forbidden: &[Vec<Bit>], rng: &mut R) -> Result<Vec<Bit>> {
    Ok(NonErgodicSource::new(forbidden)?.generate(len, rng))
}

/// One emitted pair, as the simulator knows it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruePair {
    pub pulse_index: u64,
    /// Emission time inside the pulse.
    pub offset_ns: f64,
    pub outcome_a: Bit,
    pub outcome_b: Bit,
    pub detected_a: bool,
    pub detected_b: bool,
    /// Jittered detection times after the pulse start, on the ideal clock.
    pub arrival_a_ns: Option<f64>,
    pub arrival_b_ns: Option<f64>,
}

impl TruePair {
    /// Whether both detections fall inside the pulse and within the
    /// full-width coincidence window of each other.
    pub fn coincides(&self, window_ns: f64, pulse_duration_ns: f64) -> bool {
        let inside = |t: f64| (0.0..pulse_duration_ns).contains(&t);
        match (self.arrival_a_ns, self.arrival_b_ns) {
            (Some(a), Some(b)) => inside(a) && inside(b) && (a - b).abs() <= 0.5 * window_ns,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub run_id: String,
    pub settings: SettingPair,
    pub n_pulses: u64,
    pub bob_first_pulse: u64,
    pub dark_counts_a: u64,
    pub dark_counts_b: u64,
    pub pairs: Vec<TruePair>,
}

#[derive(Debug, Clone)]
pub struct SimulatedRun {
    pub manifest: RunManifest,
    pub alice: TimeTagStream,
    pub bob: TimeTagStream,
    pub truth: GroundTruth,
}

fn run_id(index: usize) -> String {
    format!("run{index:03}")
}

fn add_dark_counts<R: Rng>(
    records: &mut Vec<TimeTagRecord>,
    det: &DetectorConfig,
    span_ps: (f64, f64),
    clock: &ClockDistortion,
    rng: &mut R,
) -> u64 {
    if det.dark_rate_hz <= 0.0 {
        return 0;
    }
    let gap = Exp::new(det.dark_rate_hz * 1e-12).expect("positive rate");
    let mut n = 0;
    for ch in [Channel::Out1, Channel::Out0] {
        let mut t = span_ps.0 + gap.sample(rng);
        while t < span_ps.1 {
            records.push(TimeTagRecord::new(clock.apply(t).round() as u64, ch));
            n += 1;
            t += gap.sample(rng);
        }
    }
    n
}

/// Simulates run `index` of the experiment in memory.
pub fn simulate_run(cfg: &ExperimentConfig, index: usize) -> Result<SimulatedRun> {
    cfg.validate()?;
    let settings = *cfg
        .schedule
        .run_settings()
        .get(index)
        .ok_or_else(|| Error::Config(format!("run index {index} beyond the schedule")))?;
    let mut rng = run_rng(cfg.seed, index);
    let train = generate_pulse_train(cfg, &mut rng)?;
    let pattern = cfg.pattern();
    let duration = cfg.pulse_duration_ns * PS_PER_NS;
    let bob_from = cfg.bob_start_pulse as usize;

    let mut rec_a: Vec<TimeTagRecord> = train.alice.iter().map(|&t| TimeTagRecord::new(t, Channel::Trigger)).collect();
    let mut rec_b: Vec<TimeTagRecord> = train.bob.iter().map(|&t| TimeTagRecord::new(t, Channel::Trigger)).collect();

    let pair_model = match cfg.source_model {
        SourceModel::Qm => PairModel::Qm {
            visibility: cfg.visibility,
        },
        SourceModel::LocalDeterministic => PairModel::LocalDeterministic,
        SourceModel::NonErgodic { .. } => PairModel::Uncorrelated,
    };
    let nonergodic = match &cfg.source_model {
        SourceModel::NonErgodic { forbidden, n_slots } => {
            let src = NonErgodicSource::new(&parse_words(forbidden)?)?;
            Some((src, *n_slots))
        }
        _ => None,
    };
    let mut ne_state: Vec<NonErgodicState> = match &nonergodic {
        Some((src, n_slots)) => vec![src.start(); 2 * n_slots],
        None => Vec::new(),
    };

    let jit_a = Normal::new(0.0, cfg.detector_a.jitter_sigma_ns * PS_PER_NS).expect("valid sigma");
    let jit_b = Normal::new(0.0, cfg.detector_b.jitter_sigma_ns * PS_PER_NS).expect("valid sigma");
    let detect = |det: &DetectorConfig, bit: Bit, rng: &mut ChaCha8Rng| -> bool {
        let eff = if bit == 0 { det.efficiency * (1.0 - det.outcome_bias) } else { det.efficiency };
        rng.random::<f64>() < eff
    };

    let mut pairs = Vec::new();
    for (j, &start) in train.starts_ps.iter().enumerate() {
        if rng.random::<f64>() >= cfg.pair_yield_per_pulse {
            continue;
        }
        let u = rng.random::<f64>() * duration;
        let (mut oa, mut ob) = sample_joint_outcome(settings, pair_model, &mut rng);
        let (da, db) = if let Some((src, n_slots)) = &nonergodic {
            let da = rng.random::<f64>() < cfg.detector_a.efficiency;
            let db = rng.random::<f64>() < cfg.detector_b.efficiency;
            if da && db {
                let slot = ((u / duration * *n_slots as f64) as usize).min(n_slots - 1);
                for (station, out) in [(0usize, &mut oa), (1usize, &mut ob)] {
                    *out = src.next_bit(&mut ne_state[station * n_slots + slot], &mut rng);
                }
            }
            (da, db)
        } else {
            (detect(&cfg.detector_a, oa, &mut rng), detect(&cfg.detector_b, ob, &mut rng))
        };
        let t_emit = start + u;
        let mut arrival_a = None;
        if da {
            let t = t_emit + jit_a.sample(&mut rng);
            rec_a.push(TimeTagRecord::new(t.round().max(0.0) as u64, Channel::for_outcome(oa)));
            arrival_a = Some((t - start) / PS_PER_NS);
        }
        let db = db && j >= bob_from;
        let mut arrival_b = None;
        if db {
            let t = t_emit + jit_b.sample(&mut rng);
            rec_b.push(TimeTagRecord::new(cfg.clock_b.apply(t).round().max(0.0) as u64, Channel::for_outcome(ob)));
            arrival_b = Some((t - start) / PS_PER_NS);
        }
        pairs.push(TruePair {
            pulse_index: j as u64,
            offset_ns: u / PS_PER_NS,
            outcome_a: oa,
            outcome_b: ob,
            detected_a: da,
            detected_b: db,
            arrival_a_ns: arrival_a,
            arrival_b_ns: arrival_b,
        });
    }

    let last = *train.starts_ps.last().expect("at least two pulses");
    let end = last + pattern.period_ps(cfg.n_pulses - 1);
    let lead = ORIGIN_PS;
    let begin_a = train.starts_ps[0] - lead;
    let begin_b = train.starts_ps[bob_from] - lead;
    let dark_a = add_dark_counts(&mut rec_a, &cfg.detector_a, (begin_a, end), &ClockDistortion::IDEAL, &mut rng);
    let dark_b = add_dark_counts(&mut rec_b, &cfg.detector_b, (begin_b, end), &cfg.clock_b, &mut rng);

    let order = |r: &TimeTagRecord| (r.time_ps, r.channel.id());
    rec_a.sort_unstable_by_key(order);
    rec_b.sort_unstable_by_key(order);

    let id = run_id(index);
    let duration_s = (end - train.starts_ps[0]) * 1e-12;
    Ok(SimulatedRun {
        manifest: RunManifest {
            run_id: id.clone(),
            duration_s,
            alpha_deg: settings.alpha_deg,
            beta_deg: settings.beta_deg,
            alice_file: PathBuf::from(format!("{id}_alice.btt")),
            bob_file: PathBuf::from(format!("{id}_bob.btt")),
        },
        alice: TimeTagStream::new(rec_a),
        bob: TimeTagStream::new(rec_b),
        truth: GroundTruth {
            run_id: id,
            settings,
            n_pulses: cfg.n_pulses,
            bob_first_pulse: train.bob_first_pulse,
            dark_counts_a: dark_a,
            dark_counts_b: dark_b,
            pairs,
        },
    })
}

pub fn truth_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("{run_id}_truth.json"))
}

/// Simulates every run and writes the manifest, `.btt` files and
/// ground-truth sidecars into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut runs = Vec::with_capacity(cfg.n_runs());
    // sequential: one run's streams in memory at a time
    for index in 0..cfg.n_runs() {
        let run = simulate_run(cfg, index)?;
        ingest::write_timetag_path(&out_dir.join(&run.manifest.alice_file), &run.alice)?;
        ingest::write_timetag_path(&out_dir.join(&run.manifest.bob_file), &run.bob)?;
        let truth = serde_json::to_string(&run.truth).expect("truth serializes");
        let path = truth_path(out_dir, &run.manifest.run_id);
        std::fs::write(&path, truth).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        runs.push(run.manifest);
    }
    let manifest = ExperimentManifest { runs };
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

/// Dark counts only, on an ideal common clock with a fixed-rate pulse grid:
/// events of both stations already positioned in their pulses. Rates are
/// per station (both detectors together).
pub fn dark_count_events<R: Rng>(
    rate_a_hz: f64,
    rate_b_hz: f64,
    duration_s: f64,
    pulse_period_ns: f64,
    rng: &mut R,
) -> (Vec<DetectionEvent>, Vec<DetectionEvent>) {
    let mut one = |rate: f64, station: Station| -> Vec<DetectionEvent> {
        if rate <= 0.0 {
            return Vec::new();
        }
        let gap = Exp::new(rate).expect("positive rate");
        let mut out = Vec::new();
        let mut t = gap.sample(rng);
        while t < duration_s {
            let t_ns = t * 1e9;
            let pulse = (t_ns / pulse_period_ns).floor();
            out.push(DetectionEvent {
                pulse_index: pulse as u64,
                offset_ns: t_ns - pulse * pulse_period_ns,
                outcome: rng.random_range(0..2),
                station,
            });
            t += gap.sample(rng);
        }
        out
    };
    let a = one(rate_a_hz, Station::Alice);
    let b = one(rate_b_hz, Station::Bob);
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randomness::{string_census, word_index};

    #[test]
    fn unmodulated_train_spacing() {
        let cfg = ExperimentConfig {
            modulation: None,
            n_pulses: 10,
            clock_b: ClockDistortion::IDEAL,
            ..Default::default()
        };
        let train = generate_pulse_train(&cfg, &mut run_rng(1, 0)).unwrap();
        assert_eq!(train.alice.len(), 10);
        for w in train.alice.windows(2) {
            assert_eq!(w[1] - w[0], 2_000_000);
        }
        assert_eq!(train.alice, train.bob);
        assert_eq!(train.alice[0] as f64, ORIGIN_PS + 57_000.0);
    }

    #[test]
    fn drift_accumulates() {
        let cfg = ExperimentConfig {
            modulation: None,
            n_pulses: 1_000_000,
            clock_b: ClockDistortion {
                rate_offset_ppm: 10.0,
                offset_ns: 0.0,
            },
            ..Default::default()
        };
        let train = generate_pulse_train(&cfg, &mut run_rng(1, 0)).unwrap();
        let (a0, b0) = (train.alice[0] as f64, train.bob[0] as f64);
        let (a1, b1) = (*train.alice.last().unwrap() as f64, *train.bob.last().unwrap() as f64);
        let shift = (b1 - a1) - (b0 - a0);
        // 1e-5 × (999 999 × 2 µs) ≈ 20 µs
        assert!((shift - 1e-5 * 999_999.0 * 2e6).abs() < 2.0, "{shift}");
    }

    #[test]
    fn modulated_intervals_follow_pattern() {
        let cfg = ExperimentConfig {
            n_pulses: 5000,
            clock_b: ClockDistortion::IDEAL,
            ..Default::default()
        };
        let pattern = cfg.pattern();
        let train = generate_pulse_train(&cfg, &mut run_rng(1, 0)).unwrap();
        for (j, w) in train.alice.windows(2).enumerate() {
            let want = pattern.period_ps(j as u64);
            assert!(((w[1] - w[0]) as f64 - want).abs() <= 1.0);
        }
    }

    #[test]
    fn qm_outcome_limits() {
        let mut rng = run_rng(3, 0);
        let v1 = PairModel::Qm { visibility: 1.0 };
        for _ in 0..1000 {
            let (a, b) = sample_joint_outcome(SettingPair::new(10.0, 10.0), v1, &mut rng);
            assert_eq!(a, b);
        }
        let mut cells = [0usize; 4];
        let n = 40_000;
        for _ in 0..n {
            let (a, b) = sample_joint_outcome(SettingPair::new(0.0, 45.0), v1, &mut rng);
            cells[(a * 2 + b) as usize] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in cells {
            assert!((c as f64 - n as f64 / 4.0).abs() < 4.0 * sigma, "{cells:?}");
        }
    }

    #[test]
    fn hidden_angle_density_normalized() {
        // midpoint rule over a slightly wider interval
        let n = 100_000;
        let (lo, hi) = (-0.5, PI + 0.5);
        let h = (hi - lo) / n as f64;
        let integral: f64 = (0..n).map(|k| HiddenAngle.density(lo + (k as f64 + 0.5) * h) * h).sum();
        assert!((integral - 1.0).abs() < 1e-4);
    }

    #[test]
    fn local_model_is_deterministic_per_lambda() {
        assert_eq!(HiddenAngle::outcome(0.0, 0.0), 1);
        assert_eq!(HiddenAngle::outcome(90.0, 0.0), 0);
        assert_eq!(HiddenAngle::outcome(30.0, 30f64.to_radians()), 1);
    }

    #[test]
    fn forbidden_word_never_occurs() {
        let mut rng = run_rng(5, 0);
        let f = parse_words(&["11".into()]).unwrap();
        let s = sample_nonergodic_series(10_000, &f, &mut rng).unwrap();
        assert_eq!(string_census(&s, 2).unwrap()[word_index("11").unwrap()], 0);

        let f = parse_words(&["1010".into(), "0000".into()]).unwrap();
        let s = sample_nonergodic_series(20_000, &f, &mut rng).unwrap();
        let c = string_census(&s, 4).unwrap();
        assert_eq!(c[word_index("1010").unwrap()], 0);
        assert_eq!(c[word_index("0000").unwrap()], 0);
    }

    #[test]
    fn impossible_forbidden_sets() {
        let all = parse_words(&["0".into(), "1".into()]).unwrap();
        assert!(NonErgodicSource::new(&all).is_err());
        // after any 0 both continuations are forbidden, so only 111... survives
        let f = parse_words(&["00".into(), "01".into()]).unwrap();
        let s = sample_nonergodic_series(100, &f, &mut run_rng(1, 0)).unwrap();
        assert!(s.iter().all(|&b| b == 1));
        let too_long = parse_words(&["0".repeat(13)]).unwrap();
        assert!(NonErgodicSource::new(&too_long).is_err());
        assert!(parse_words(&["01a".into()]).is_err());
    }

    #[test]
    fn pass_through_is_fair() {
        let mut rng = run_rng(8, 0);
        let n = 200_000;
        let s = sample_nonergodic_series(n, &[], &mut rng).unwrap();
        for k in 1..=4usize {
            let counts = string_census(&s, k).unwrap();
            let total = (n - k + 1) as f64;
            let e = total / (1 << k) as f64;
            let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
            let dof = ((1 << k) - 1) as f64;
            // overlapping windows inflate the variance somewhat; 3σ of χ²_dof is conservative enough here
            assert!(chi2 < dof + 3.0 * (2.0 * dof).sqrt() * 2.0, "k={k} chi2={chi2}");
        }
    }

    #[test]
    fn noise_free_run_gives_perfect_pairs() {
        let cfg = ExperimentConfig {
            n_pulses: 20_000,
            pair_yield_per_pulse: 0.05,
            visibility: 1.0,
            detector_a: DetectorConfig {
                efficiency: 1.0,
                jitter_sigma_ns: 0.0,
                dark_rate_hz: 0.0,
                outcome_bias: 0.0,
            },
            detector_b: DetectorConfig {
                efficiency: 1.0,
                jitter_sigma_ns: 0.0,
                dark_rate_hz: 0.0,
                outcome_bias: 0.0,
            },
            schedule: Schedule::Scan {
                settings: vec![SettingPair::new(30.0, 30.0)],
            },
            ..Default::default()
        };
        let run = simulate_run(&cfg, 0).unwrap();
        assert!(run.truth.pairs.iter().all(|p| p.detected_a && p.detected_b && p.outcome_a == p.outcome_b));
        let det_a = run.alice.detections().count();
        assert_eq!(det_a, run.truth.pairs.len());
        assert_eq!(run.bob.detections().count(), det_a);
    }

    #[test]
    fn identical_seed_identical_streams() {
        let cfg = ExperimentConfig {
            n_pulses: 30_000,
            ..Default::default()
        };
        let a = simulate_run(&cfg, 2).unwrap();
        let b = simulate_run(&cfg, 2).unwrap();
        assert_eq!(a.alice, b.alice);
        assert_eq!(a.bob, b.bob);
        assert_eq!(a.truth, b.truth);
        let c = simulate_run(&cfg, 3).unwrap();
        assert_ne!(a.alice, c.alice);
    }

    #[test]
    fn config_validation() {
        let bad = ExperimentConfig {
            pulse_duration_ns: 2500.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ExperimentConfig {
            visibility: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"n_pulses": 1000, "source_model": {"model": "local_deterministic"}}"#;
        let cfg = ExperimentConfig::from_json(json).unwrap();
        assert_eq!(cfg.n_pulses, 1000);
        assert_eq!(cfg.source_model, SourceModel::LocalDeterministic);
        assert_eq!(cfg.pulse_duration_ns, 500.0);
        assert!(ExperimentConfig::from_json(r#"{"n_pulse": 3}"#).is_ok());
    }

    #[test]
    fn uniform_scan_schedule() {
        let s = Schedule::uniform_scan(0.0, 34);
        let settings = s.run_settings();
        assert_eq!(settings.len(), 34);
        assert!(settings.iter().all(|p| p.alpha_deg == 0.0 && p.beta_deg < 180.0));
    }
}
