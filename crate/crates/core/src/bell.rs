//! Correlation parameters, the CHSH combination and its time-resolved form.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::coincidence::{CoincidenceCounts, CountTable};
use crate::error::{Error, Result};
use crate::types::{SettingKey, SettingPair, SlotConfig};

pub const TSIRELSON: f64 = 2.0 * std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub e: f64,
    /// Binomial standard error, `sqrt((1 − E²) / N)`.
    pub sigma: f64,
    pub total: u64,
}

/// `E = (c++ + c-- − c+- − c-+) / (c++ + c-- + c+- + c-+)`.
pub fn correlation_e(counts: &CoincidenceCounts, settings: SettingPair) -> Result<Correlation> {
    let n = counts.total();
    if n == 0 {
        return Err(Error::UndefinedCorrelation {
            alpha_deg: settings.alpha_deg,
            beta_deg: settings.beta_deg,
        });
    }
    let same = (counts.c_pp + counts.c_mm) as f64;
    let diff = (counts.c_pm + counts.c_mp) as f64;
    let nf = n as f64;
    let e = ((same - diff) / nf).clamp(-1.0, 1.0);
    Ok(Correlation {
        e,
        sigma: ((1.0 - e * e).max(0.0) / nf).sqrt(),
        total: n,
    })
}

/// The four setting pairs `(α,β), (α,β′), (α′,β), (α′,β′)`, in that order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChshSchedule {
    pub pairs: [SettingPair; 4],
}

impl Default for ChshSchedule {
    fn default() -> Self {
        Self::from_angles(0.0, 45.0, 22.5, 67.5)
    }
}

impl ChshSchedule {
    pub fn from_angles(alpha: f64, alpha_prime: f64, beta: f64, beta_prime: f64) -> Self {
        Self {
            pairs: [
                SettingPair::new(alpha, beta),
                SettingPair::new(alpha, beta_prime),
                SettingPair::new(alpha_prime, beta),
                SettingPair::new(alpha_prime, beta_prime),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut keys: Vec<SettingKey> = self.pairs.iter().map(|p| p.key()).collect();
        keys.sort();
        keys.dedup();
        if keys.len() != 4 {
            return Err(Error::Config("CHSH schedule needs four distinct setting pairs".into()));
        }
        Ok(())
    }

    /// The schedule seen with Alice and Bob exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            pairs: self.pairs.map(|p| p.swapped()),
        }
    }
}

/// `S = |E(α,β) − E(α,β′)| + |E(α′,β) + E(α′,β′)|`.
pub fn chsh_combination(e: [f64; 4]) -> f64 {
    (e[0] - e[1]).abs() + (e[2] + e[3]).abs()
}

/// Plain CHSH value from correlations keyed by setting pair.
pub fn s_chsh(schedule: &ChshSchedule, e_values: &BTreeMap<SettingKey, f64>) -> Result<f64> {
    let mut e = [0.0; 4];
    for (slot, pair) in e.iter_mut().zip(schedule.pairs.iter()) {
        *slot = *e_values.get(&pair.key()).ok_or(Error::MissingSetting {
            alpha_deg: pair.alpha_deg,
            beta_deg: pair.beta_deg,
        })?;
    }
    Ok(chsh_combination(e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChshValue {
    pub s: f64,
    pub sigma: f64,
    pub total: u64,
}

/// CHSH value with propagated binomial uncertainty from four count sets.
pub fn s_from_counts(schedule: &ChshSchedule, counts: &[CoincidenceCounts; 4]) -> Result<ChshValue> {
    let mut e = [0.0; 4];
    let mut var = 0.0;
    let mut total = 0;
    for k in 0..4 {
        let c = correlation_e(&counts[k], schedule.pairs[k])?;
        e[k] = c.e;
        var += c.sigma * c.sigma;
        total += c.total;
    }
    Ok(ChshValue {
        s: chsh_combination(e),
        sigma: var.sqrt(),
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SigmaMethod {
    Binomial,
    /// Multinomial resampling of each setting's counts.
    Bootstrap { resamples: usize, seed: u64 },
}

fn bootstrap_sigma<R: Rng>(schedule: &ChshSchedule, counts: &[CoincidenceCounts; 4], resamples: usize, rng: &mut R) -> f64 {
    let draw = |c: &CoincidenceCounts, rng: &mut R| -> CoincidenceCounts {
        let n = c.total();
        let cells = [c.c_pp, c.c_mm, c.c_pm, c.c_mp];
        let mut out = [0u64; 4];
        let mut left = n;
        let mut mass = n as f64;
        for k in 0..3 {
            if left == 0 || mass <= 0.0 {
                break;
            }
            let p = (cells[k] as f64 / mass).clamp(0.0, 1.0);
            let x = Binomial::new(left, p).expect("valid binomial").sample(rng);
            out[k] = x;
            left -= x;
            mass -= cells[k] as f64;
        }
        out[3] = left;
        CoincidenceCounts::new(out[0], out[1], out[2], out[3])
    };
    let mut vals = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let re = [
            draw(&counts[0], rng),
            draw(&counts[1], rng),
            draw(&counts[2], rng),
            draw(&counts[3], rng),
        ];
        if let Ok(v) = s_from_counts(schedule, &re) {
            vals.push(v.s);
        }
    }
    if vals.len() < 2 {
        return 0.0;
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotS {
    pub slot: usize,
    pub s: f64,
    pub sigma: f64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlaggedSlot {
    pub slot: usize,
    pub settings: SettingPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SParameterSeries {
    pub slot_config: SlotConfig,
    /// One entry per slot that has coincidences at all four settings.
    pub slots: Vec<SlotS>,
    /// Slot/setting combinations with no coincidences; those slots carry no S.
    pub flagged: Vec<FlaggedSlot>,
    /// Count-weighted time average of the per-slot S.
    pub mean: f64,
    /// Propagated uncertainty of `mean`.
    pub mean_sigma: f64,
    /// Count-weighted spread of the per-slot values around `mean`.
    pub dispersion: f64,
}

impl SParameterSeries {
    pub fn is_complete(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Per-slot CHSH values from a count table.
pub fn s_time_resolved(
    table: &CountTable,
    schedule: &ChshSchedule,
    slot_cfg: &SlotConfig,
    method: SigmaMethod,
) -> Result<SParameterSeries> {
    schedule.validate()?;
    slot_cfg.validate()?;
    let mut rng = match method {
        SigmaMethod::Bootstrap { seed, .. } => Some(<rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed)),
        SigmaMethod::Binomial => None,
    };
    let mut slots = Vec::new();
    let mut flagged = Vec::new();
    for slot in 0..slot_cfg.n_slots {
        let counts = schedule.pairs.map(|p| table.get(p, slot));
        let empty: Vec<_> = schedule
            .pairs
            .iter()
            .zip(counts.iter())
            .filter(|(_, c)| c.total() == 0)
            .map(|(p, _)| FlaggedSlot { slot, settings: *p })
            .collect();
        if !empty.is_empty() {
            flagged.extend(empty);
            continue;
        }
        let mut v = s_from_counts(schedule, &counts)?;
        if let (SigmaMethod::Bootstrap { resamples, .. }, Some(rng)) = (method, rng.as_mut()) {
            v.sigma = bootstrap_sigma(schedule, &counts, resamples, rng);
        }
        slots.push(SlotS {
            slot,
            s: v.s,
            sigma: v.sigma,
            total: v.total,
        });
    }
    let w_sum: f64 = slots.iter().map(|s| s.total as f64).sum();
    let (mean, mean_sigma, dispersion) = if w_sum > 0.0 {
        let mean = slots.iter().map(|s| s.total as f64 * s.s).sum::<f64>() / w_sum;
        let var = slots.iter().map(|s| (s.total as f64 * s.sigma).powi(2)).sum::<f64>() / (w_sum * w_sum);
        let disp = (slots.iter().map(|s| s.total as f64 * (s.s - mean).powi(2)).sum::<f64>() / w_sum).sqrt();
        (mean, var.sqrt(), disp)
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    Ok(SParameterSeries {
        slot_config: *slot_cfg,
        slots,
        flagged,
        mean,
        mean_sigma,
        dispersion,
    })
}

/// Lower bound on min-entropy certified by a CHSH value:
/// `1 − log2(1 + sqrt(2 − S²/4))`. Values below 2 are clamped to 2 (no
/// certificate); values above 2√2 beyond rounding are rejected.
pub fn pironio_bound(s: f64) -> Result<f64> {
    const TOL: f64 = 1e-9;
    if !s.is_finite() || s > TSIRELSON + TOL {
        return Err(Error::Domain(format!("S = {s} exceeds the quantum maximum 2√2")));
    }
    let s = if s < 2.0 {
        if s < 2.0 - TOL {
            log::warn!("S = {s} is below the local bound; min-entropy bound clamped to 0");
        }
        2.0
    } else {
        s.min(TSIRELSON)
    };
    let inner = (2.0 - s * s / 4.0).max(0.0);
    Ok((1.0 - (1.0 + inner.sqrt()).log2()).clamp(0.0, 1.0))
}

/// Weighted least-squares amplitude of `E(Δ) = V cos 2Δ`.
pub fn fit_visibility(points: &[(SettingPair, Correlation)]) -> Result<(f64, f64)> {
    let (mut num, mut den) = (0.0, 0.0);
    for (p, c) in points {
        let x = (2.0 * p.delta_deg().to_radians()).cos();
        // a vanishing binomial sigma (|E| = 1) would dominate; floor it at 1/N
        let sigma = c.sigma.max(1.0 / c.total.max(1) as f64);
        let w = 1.0 / (sigma * sigma);
        num += w * x * c.e;
        den += w * x * x;
    }
    if den <= 0.0 {
        return Err(Error::InsufficientData("no setting with cos 2Δ ≠ 0".into()));
    }
    Ok((num / den, den.sqrt().recip()))
}
