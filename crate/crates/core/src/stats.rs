//! Slot comparison battery: two-sample t-tests, critical values, weighted
//! slope fits and the overlap questions asked of the slot profiles.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const DEFAULT_CONFIDENCE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TTestMode {
    #[default]
    Welch,
    Pooled,
}

/// Degrees-of-freedom convention reported next to the standard test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DfConvention {
    /// From the sample sizes (Welch-Satterthwaite or `n_a + n_b − 2`).
    #[default]
    Sample,
    /// `n_slots − 1`, independent of the sample sizes.
    Slots,
}

impl std::str::FromStr for DfConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Self::Sample),
            "slots" => Ok(Self::Slots),
            other => Err(Error::Config(format!("unknown df convention `{other}` (sample|slots)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    /// `(mean_a − mean_b) / se`; ±∞ when both samples have zero variance
    /// and different means.
    pub t_value: f64,
    pub df: f64,
    pub t_critical: f64,
    pub significant: bool,
}

impl TTestResult {
    pub fn is_infinite(&self) -> bool {
        self.t_value.is_infinite()
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance (n − 1 denominator).
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// Two-sided critical value of Student's t at the given confidence
/// (0.95 → the 97.5% quantile).
pub fn t_critical(df: f64, confidence: f64) -> Result<f64> {
    if !(df.is_finite() && df >= 1.0) {
        return Err(Error::Domain(format!("degrees of freedom must be >= 1, got {df}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Domain(format!("confidence must be in (0, 1), got {confidence}")));
    }
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(dist.inverse_cdf(0.5 + 0.5 * confidence))
}

pub fn t_test_two_sample(a: &[f64], b: &[f64], mode: TTestMode, confidence: f64) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "t-test needs two samples of at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (variance(a), variance(b));
    let (se, df) = match mode {
        TTestMode::Welch => {
            let (qa, qb) = (va / na, vb / nb);
            let se2 = qa + qb;
            let denom = qa * qa / (na - 1.0) + qb * qb / (nb - 1.0);
            let df = if denom > 0.0 { se2 * se2 / denom } else { na + nb - 2.0 };
            (se2.sqrt(), df)
        }
        TTestMode::Pooled => {
            let sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
            ((sp2 * (1.0 / na + 1.0 / nb)).sqrt(), na + nb - 2.0)
        }
    };
    let diff = ma - mb;
    let t_value = if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    };
    let crit = t_critical(df, confidence)?;
    Ok(TTestResult {
        t_value,
        df,
        t_critical: crit,
        significant: t_value.abs() > crit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
}

impl SlopeFit {
    /// Slopes agree when they differ by no more than the sum of their errors.
    pub fn overlaps(&self, other: &SlopeFit) -> bool {
        (self.slope - other.slope).abs() <= self.stderr + other.stderr
    }
}

/// Straight-line fit of `(x, y, sigma)` points. With every sigma positive
/// the fit is weighted by `1/σ²` and the slope error follows from the
/// weights; otherwise an unweighted fit with residual-based error is used.
pub fn slope_fit(points: &[(f64, f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "slope fit needs at least 2 points, got {}",
            points.len()
        )));
    }
    let weighted = points.iter().all(|p| p.2 > 0.0 && p.2.is_finite());
    let w = |p: &(f64, f64, f64)| if weighted { 1.0 / (p.2 * p.2) } else { 1.0 };
    let (mut s, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for p in points {
        let wi = w(p);
        s += wi;
        sx += wi * p.0;
        sy += wi * p.1;
    }
    let (mx, my) = (sx / s, sy / s);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for p in points {
        let wi = w(p);
        sxx += wi * (p.0 - mx).powi(2);
        sxy += wi * (p.0 - mx) * (p.1 - my);
    }
    if sxx <= 0.0 {
        return Err(Error::InsufficientData("slope fit needs at least two distinct x".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if weighted {
        (1.0 / sxx).sqrt()
    } else if points.len() > 2 {
        let ssr: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (ssr / (points.len() as f64 - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(SlopeFit {
        slope,
        stderr,
        intercept,
    })
}

/// Estimator values of one slot (one value per run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSample {
    pub slot_index: usize,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation of `values`.
    pub dispersion: f64,
}

impl SlotSample {
    pub fn new(slot_index: usize, values: Vec<f64>) -> Self {
        let m = if values.is_empty() { f64::NAN } else { mean(&values) };
        let d = if values.len() > 1 { variance(&values).sqrt() } else { 0.0 };
        Self {
            slot_index,
            values,
            mean: m,
            dispersion: d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryOptions {
    pub mode: TTestMode,
    pub confidence: f64,
    pub df_convention: DfConvention,
}

impl Default for BatteryOptions {
    fn default() -> Self {
        Self {
            mode: TTestMode::Welch,
            confidence: DEFAULT_CONFIDENCE,
            df_convention: DfConvention::Sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub slot_index: usize,
    pub test: TTestResult,
    /// `n_slots − 1` and its critical value, reported alongside.
    pub slots_df: f64,
    pub slots_t_critical: f64,
    pub slots_significant: bool,
}

impl ComparisonRow {
    pub fn significant(&self, convention: DfConvention) -> bool {
        match convention {
            DfConvention::Sample => self.test.significant,
            DfConvention::Slots => self.slots_significant,
        }
    }

    pub fn critical(&self, convention: DfConvention) -> f64 {
        match convention {
            DfConvention::Sample => self.test.t_critical,
            DfConvention::Slots => self.slots_t_critical,
        }
    }
}

/// Yes/no answers about the slot profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapAnswers {
    /// Do the first and third slots' dispersion bars overlap?
    pub slots_1_and_3: Option<bool>,
    /// Does the first slot overlap the pooled values of slots 3 onwards?
    pub slot_1_and_rest: Option<bool>,
    /// Do the slopes over slots 1-3 and over slots 3-n agree?
    pub slopes_head_and_tail: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryTable {
    pub options: BatteryOptions,
    pub reference_slot: usize,
    /// Each later slot against the reference (first) slot.
    pub vs_reference: Vec<ComparisonRow>,
    /// Each slot against the pooled values of all slots.
    pub vs_pooled: Vec<ComparisonRow>,
    pub slope_all: SlopeFit,
    pub answers: OverlapAnswers,
}

impl BatteryTable {
    /// Whether any slot differs significantly from the reference slot.
    pub fn reference_differs(&self, convention: DfConvention) -> bool {
        self.vs_reference.iter().any(|r| r.significant(convention))
    }

    pub fn slopes_overlap(&self, other: &BatteryTable) -> bool {
        self.slope_all.overlaps(&other.slope_all)
    }
}

fn profile_fit(samples: &[&SlotSample]) -> Result<SlopeFit> {
    let pts: Vec<_> = samples
        .iter()
        .map(|s| (s.slot_index as f64, s.mean, s.dispersion))
        .collect();
    slope_fit(&pts)
}

fn bars_overlap(m1: f64, d1: f64, m2: f64, d2: f64) -> bool {
    (m1 - m2).abs() <= d1 + d2
}

/// Runs the comparison battery on per-slot samples. The slot with the
/// smallest index is the reference; input order is irrelevant.
pub fn slot_battery(samples: &[SlotSample], opts: BatteryOptions) -> Result<BatteryTable> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "slot battery needs at least 2 slots, got {}",
            samples.len()
        )));
    }
    let mut sorted: Vec<&SlotSample> = samples.iter().collect();
    sorted.sort_by_key(|s| s.slot_index);
    let slots_df = (sorted.len() - 1) as f64;
    let slots_crit = t_critical(slots_df, opts.confidence)?;

    let row = |s: &SlotSample, against: &[f64]| -> Result<ComparisonRow> {
        let test = t_test_two_sample(&s.values, against, opts.mode, opts.confidence)?;
        Ok(ComparisonRow {
            slot_index: s.slot_index,
            test,
            slots_df,
            slots_t_critical: slots_crit,
            slots_significant: test.t_value.abs() > slots_crit,
        })
    };

    let reference = sorted[0];
    let vs_reference = sorted[1..]
        .iter()
        .map(|s| row(s, &reference.values))
        .collect::<Result<Vec<_>>>()?;
    let pooled: Vec<f64> = sorted.iter().flat_map(|s| s.values.iter().copied()).collect();
    let vs_pooled = sorted.iter().map(|s| row(s, &pooled)).collect::<Result<Vec<_>>>()?;

    let slope_all = profile_fit(&sorted)?;
    let answers = if sorted.len() >= 3 {
        let third = sorted[2];
        let rest: Vec<f64> = sorted[2..].iter().flat_map(|s| s.values.iter().copied()).collect();
        let rest = SlotSample::new(third.slot_index, rest);
        let tail = if sorted.len() >= 4 {
            Some(profile_fit(&sorted[..3])?.overlaps(&profile_fit(&sorted[2..])?))
        } else {
            None
        };
        OverlapAnswers {
            slots_1_and_3: Some(bars_overlap(reference.mean, reference.dispersion, third.mean, third.dispersion)),
            slot_1_and_rest: Some(bars_overlap(reference.mean, reference.dispersion, rest.mean, rest.dispersion)),
            slopes_head_and_tail: tail,
        }
    } else {
        OverlapAnswers {
            slots_1_and_3: None,
            slot_1_and_rest: None,
            slopes_head_and_tail: None,
        }
    };

    Ok(BatteryTable {
        options: opts,
        reference_slot: reference.slot_index,
        vs_reference,
        vs_pooled,
        slope_all,
        answers,
    })
}
