//! End-to-end analysis: sync, pulse assignment, coincidences, time-resolved
//! CHSH, per-slot randomness and the slot-comparison battery, plus the CSV
//! and JSON artifacts of every stage.
//!
//! CSV slot columns are 1-based, matching the tables; everything in memory
//! is 0-based.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bell::{pironio_bound, s_time_resolved, ChshSchedule, SParameterSeries, SigmaMethod};
use crate::coincidence::{classify_counts, find_coincidences, CoincidenceSet, CountTable, DEFAULT_WINDOW_NS};
use crate::error::{Error, Result};
use crate::format::sig9;
use crate::ingest::{self, ExperimentManifest, ParseOptions, RunStreams};
use crate::randomness::{estimate_all, SeriesEstimate};
use crate::simulator::{self, ExperimentConfig, Schedule};
use crate::stats::{self, slope_fit, slot_battery, BatteryOptions, BatteryTable, SlopeFit, SlotSample};
use crate::sync::{self, ModulationPattern, PulseIndexMap};
use crate::types::{SettingPair, SlotConfig, SlotSeries, Station};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Slot partitions as `<n>x<width_ns>`.
    pub slots: Vec<String>,
    pub window_ns: f64,
    pub trigger_delay_ns: f64,
    pub pulse_duration_ns: f64,
    pub modulation: ModulationPattern,
    pub schedule: ChshSchedule,
    pub sigma: SigmaMethod,
    pub battery: BatteryOptions,
    /// Series shorter than this are left out of the estimators.
    pub min_series_bits: usize,
    /// Stations' separation label, e.g. `24m`.
    pub l_label: String,
    pub max_order_violations: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            slots: vec!["5x100".into(), "10x50".into()],
            window_ns: DEFAULT_WINDOW_NS,
            trigger_delay_ns: sync::DEFAULT_TRIGGER_DELAY_NS,
            pulse_duration_ns: 500.0,
            modulation: ModulationPattern::default(),
            schedule: ChshSchedule::default(),
            sigma: SigmaMethod::Binomial,
            battery: BatteryOptions::default(),
            min_series_bits: 100,
            l_label: "24m".into(),
            max_order_violations: ParseOptions::default().max_order_violations,
        }
    }
}

impl AnalysisConfig {
    pub fn slot_configs(&self) -> Result<Vec<SlotConfig>> {
        if self.slots.is_empty() {
            return Err(Error::Config("no slot configuration given".into()));
        }
        self.slots
            .iter()
            .map(|s| {
                let cfg = SlotConfig::parse(s)?;
                SlotConfig::with_duration(cfg.n_slots, cfg.slot_width_ns, self.pulse_duration_ns)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.slot_configs()?;
        if !(self.window_ns > 0.0 && self.window_ns.is_finite()) {
            return Err(Error::Config(format!("window must be positive, got {} ns", self.window_ns)));
        }
        if !(self.pulse_duration_ns > 0.0) || self.trigger_delay_ns < 0.0 {
            return Err(Error::Config("pulse duration must be positive and trigger delay >= 0".into()));
        }
        if self.l_label.is_empty() || self.l_label.contains([',', '\n']) {
            return Err(Error::Config("l_label must be non-empty without commas".into()));
        }
        if !(0.0 < self.battery.confidence && self.battery.confidence < 1.0) {
            return Err(Error::Config("confidence must be in (0, 1)".into()));
        }
        self.modulation.validate_for_sync()?;
        self.schedule.validate()
    }

    fn parse_options(&self) -> ParseOptions {
        ParseOptions {
            max_order_violations: self.max_order_violations,
        }
    }
}

/// Everything extracted from one run.
#[derive(Debug, Clone)]
pub struct RunAnalysis {
    pub run_id: String,
    pub settings: SettingPair,
    pub duration_s: f64,
    pub sync: PulseIndexMap,
    pub in_pulse: [usize; 2],
    pub out_of_pulse: [usize; 2],
    pub coincidences: CoincidenceSet,
    pub out_of_pulse_coincidences: usize,
}

pub fn analyze_run(run: &RunStreams, cfg: &AnalysisConfig) -> Result<RunAnalysis> {
    let id = &run.run.run_id;
    let stage = |e: Error, name: &'static str| {
        log::error!("run {id}: {name} failed: {e}");
        e.in_stage(name)
    };
    let map = sync::recover_pulse_numbering(&run.alice.trigger_times(), &run.bob.trigger_times(), &cfg.modulation)
        .map_err(|e| stage(e, "sync"))?;
    let assign = |stream, station| {
        sync::assign_detections(stream, station, &map, cfg.trigger_delay_ns, cfg.pulse_duration_ns)
            .map_err(|e| stage(e, "assign"))
    };
    let a = assign(&run.alice, Station::Alice)?;
    let b = assign(&run.bob, Station::Bob)?;
    let settings = run.run.settings();
    let coincidences = find_coincidences(&a.in_pulse, &b.in_pulse, cfg.window_ns, settings);
    let outside = find_coincidences(&a.out_of_pulse, &b.out_of_pulse, cfg.window_ns, settings);
    log::info!(
        "run {id}: {} coincidences, {} outside pulses, clock ratio {:.9}",
        coincidences.records.len(),
        outside.records.len(),
        map.rate_ratio
    );
    Ok(RunAnalysis {
        run_id: id.clone(),
        settings,
        duration_s: run.run.duration_s,
        sync: map,
        in_pulse: [a.in_pulse.len(), b.in_pulse.len()],
        out_of_pulse: [a.out_of_pulse.len(), b.out_of_pulse.len()],
        coincidences,
        out_of_pulse_coincidences: outside.records.len(),
    })
}

/// Outcome series of both stations for every slot, Alice first.
pub fn slot_series(run: &RunAnalysis, slot_cfg: &SlotConfig) -> Vec<SlotSeries> {
    let mut out: Vec<SlotSeries> = [Station::Alice, Station::Bob]
        .iter()
        .flat_map(|&station| {
            (0..slot_cfg.n_slots).map(move |slot_index| SlotSeries {
                station,
                run_id: run.run_id.clone(),
                slot_index,
                bits: Vec::new(),
            })
        })
        .collect();
    for r in &run.coincidences.records {
        if let Some(slot) = slot_cfg.slot_of(r.offset_ns()) {
            out[slot].bits.push(r.outcome_a);
            out[slot_cfg.n_slots + slot].bits.push(r.outcome_b);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomnessRow {
    pub station: Station,
    pub slot: usize,
    pub n_series: usize,
    pub mean_hm: f64,
    pub std_hm: f64,
    pub mean_kc: f64,
    pub std_kc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Kc,
    Hm,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Kc => "kc",
            Estimator::Hm => "hm",
        }
    }

    fn of(self, e: &SeriesEstimate) -> f64 {
        match self {
            Estimator::Kc => e.kc,
            Estimator::Hm => e.hm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryEntry {
    pub station: Station,
    pub estimator: Estimator,
    pub table: Option<BatteryTable>,
    pub note: Option<String>,
}

/// Per-slot estimator statistics and comparison batteries of one slot
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesStatistics {
    pub rows: Vec<RandomnessRow>,
    pub batteries: Vec<BatteryEntry>,
}

fn samples(estimates: &[SeriesEstimate], station: Station, n_slots: usize, est: Estimator) -> Vec<SlotSample> {
    (0..n_slots)
        .map(|slot| {
            let values = estimates
                .iter()
                .filter(|e| e.station == station && e.slot_index == slot)
                .map(|e| est.of(e))
                .collect();
            SlotSample::new(slot, values)
        })
        .collect()
}

pub fn series_statistics(
    series: &[SlotSeries],
    n_slots: usize,
    min_bits: usize,
    opts: BatteryOptions,
) -> Result<SeriesStatistics> {
    let estimates = estimate_all(series, min_bits)?;
    let mut rows = Vec::new();
    let mut batteries = Vec::new();
    for station in [Station::Alice, Station::Bob] {
        let hm = samples(&estimates, station, n_slots, Estimator::Hm);
        let kc = samples(&estimates, station, n_slots, Estimator::Kc);
        for (h, k) in hm.iter().zip(&kc) {
            rows.push(RandomnessRow {
                station,
                slot: h.slot_index,
                n_series: h.values.len(),
                mean_hm: h.mean,
                std_hm: h.dispersion,
                mean_kc: k.mean,
                std_kc: k.dispersion,
            });
        }
        for (est, s) in [(Estimator::Kc, &kc), (Estimator::Hm, &hm)] {
            let usable: Vec<SlotSample> = s.iter().filter(|x| !x.values.is_empty()).cloned().collect();
            let entry = match slot_battery(&usable, opts) {
                Ok(table) => BatteryEntry {
                    station,
                    estimator: est,
                    table: Some(table),
                    note: None,
                },
                Err(e @ (Error::InsufficientData(_) | Error::Domain(_))) => BatteryEntry {
                    station,
                    estimator: est,
                    table: None,
                    note: Some(e.to_string()),
                },
                Err(e) => return Err(e),
            };
            batteries.push(entry);
        }
    }
    Ok(SeriesStatistics { rows, batteries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncRow {
    pub run_id: String,
    pub first_index_a: u64,
    pub first_index_b: u64,
    pub rate_ratio: f64,
    pub offset_ns: f64,
    pub residual_rms_ps: f64,
    pub residual_max_ps: f64,
    pub matched_boundaries: usize,
    pub matched_triggers: usize,
}

impl SyncRow {
    pub fn new(run_id: &str, m: &PulseIndexMap) -> Self {
        Self {
            run_id: run_id.to_string(),
            first_index_a: m.first_index_a,
            first_index_b: m.first_index_b,
            rate_ratio: m.rate_ratio,
            offset_ns: m.offset_ps / 1e3,
            residual_rms_ps: m.residual_rms_ps,
            residual_max_ps: m.residual_max_ps,
            matched_boundaries: m.matched_boundaries,
            matched_triggers: m.matched_triggers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotConfigSummary {
    pub slots: String,
    pub chsh: SParameterSeries,
    /// Linear trend of S over the slots.
    pub chsh_slope: Option<SlopeFit>,
    /// Min-entropy certified by the time-averaged S.
    pub certified_min_entropy: Option<f64>,
    pub unslotted_coincidences: u64,
    pub randomness: Vec<RandomnessRow>,
    pub batteries: Vec<BatteryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub l_label: String,
    pub n_runs: usize,
    pub coincidences: usize,
    pub out_of_pulse_coincidences: usize,
    pub detections_in_pulse: [usize; 2],
    pub detections_out_of_pulse: [usize; 2],
    pub sync: Vec<SyncRow>,
    pub slot_configs: Vec<SlotConfigSummary>,
}

/// Summary plus the per-configuration intermediate products.
#[derive(Debug, Clone)]
pub struct ExperimentAnalysis {
    pub summary: Summary,
    pub tables: Vec<(SlotConfig, CountTable)>,
    pub series: Vec<(SlotConfig, Vec<SlotSeries>)>,
}

pub fn chsh_slope(series: &SParameterSeries) -> Option<SlopeFit> {
    let pts: Vec<_> = series.slots.iter().map(|s| (s.slot as f64, s.s, s.sigma)).collect();
    if pts.len() < 2 {
        return None;
    }
    slope_fit(&pts).ok()
}

pub fn analyze_experiment(runs: &[RunAnalysis], cfg: &AnalysisConfig) -> Result<ExperimentAnalysis> {
    cfg.validate()?;
    if runs.is_empty() {
        return Err(Error::EmptyExperiment);
    }
    let mut slot_summaries = Vec::new();
    let mut tables = Vec::new();
    let mut all_series = Vec::new();
    for slot_cfg in cfg.slot_configs()? {
        let mut table = CountTable::default();
        for r in runs {
            table.merge(&classify_counts(&r.coincidences.records, &slot_cfg));
        }
        let chsh = s_time_resolved(&table, &cfg.schedule, &slot_cfg, cfg.sigma).map_err(|e| e.in_stage("chsh"))?;
        let certified = if chsh.mean.is_finite() { pironio_bound(chsh.mean).ok() } else { None };
        let series: Vec<SlotSeries> = runs.iter().flat_map(|r| slot_series(r, &slot_cfg)).collect();
        let st = series_statistics(&series, slot_cfg.n_slots, cfg.min_series_bits, cfg.battery)
            .map_err(|e| e.in_stage("randomness"))?;
        slot_summaries.push(SlotConfigSummary {
            slots: slot_cfg.label(),
            chsh_slope: chsh_slope(&chsh),
            chsh,
            certified_min_entropy: certified,
            unslotted_coincidences: table.unslotted,
            randomness: st.rows,
            batteries: st.batteries,
        });
        tables.push((slot_cfg, table));
        all_series.push((slot_cfg, series));
    }
    let sum2 = |f: fn(&RunAnalysis) -> [usize; 2]| {
        runs.iter().fold([0, 0], |acc, r| {
            let x = f(r);
            [acc[0] + x[0], acc[1] + x[1]]
        })
    };
    let summary = Summary {
        l_label: cfg.l_label.clone(),
        n_runs: runs.len(),
        coincidences: runs.iter().map(|r| r.coincidences.records.len()).sum(),
        out_of_pulse_coincidences: runs.iter().map(|r| r.out_of_pulse_coincidences).sum(),
        detections_in_pulse: sum2(|r| r.in_pulse),
        detections_out_of_pulse: sum2(|r| r.out_of_pulse),
        sync: runs.iter().map(|r| SyncRow::new(&r.run_id, &r.sync)).collect(),
        slot_configs: slot_summaries,
    };
    Ok(ExperimentAnalysis {
        summary,
        tables,
        series: all_series,
    })
}

/// Loads and analyzes every run of a manifest; runs are processed in
/// parallel, one run's streams held per worker.
pub fn analyze_manifest(manifest: &ExperimentManifest, base_dir: &Path, cfg: &AnalysisConfig) -> Result<Vec<RunAnalysis>> {
    cfg.validate()?;
    manifest.validate()?;
    let opts = cfg.parse_options();
    manifest
        .runs
        .par_iter()
        .map(|run| {
            let streams = ingest::load_run(run, base_dir, opts).map_err(|e| e.in_stage("ingest"))?;
            analyze_run(&streams, cfg)
        })
        .collect()
}

/// Simulates and analyzes runs without touching the disk.
pub fn simulate_and_analyze(sim: &ExperimentConfig, cfg: &AnalysisConfig) -> Result<Vec<RunAnalysis>> {
    sim.validate()?;
    let cfg = geometry_from(sim, cfg);
    cfg.validate()?;
    (0..sim.n_runs())
        .into_par_iter()
        .map(|k| {
            let run = simulator::simulate_run(sim, k).map_err(|e| e.in_stage("simulate"))?;
            let streams = RunStreams {
                run: run.manifest,
                alice: run.alice,
                bob: run.bob,
            };
            analyze_run(&streams, &cfg)
        })
        .collect()
}

/// Analysis settings with the pulse geometry of the simulated experiment.
pub fn geometry_from(sim: &ExperimentConfig, cfg: &AnalysisConfig) -> AnalysisConfig {
    let mut out = cfg.clone();
    out.pulse_duration_ns = sim.pulse_duration_ns;
    out.trigger_delay_ns = sim.trigger_delay_ns;
    out.modulation = sim.pattern();
    if let Schedule::Chsh { settings, .. } = &sim.schedule {
        out.schedule = *settings;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    /// Simulate an experiment first; its files go to `<out>/data`.
    pub simulate: Option<ExperimentConfig>,
    /// Analyze an existing experiment instead.
    pub manifest: Option<PathBuf>,
    pub analysis: AnalysisConfig,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("pipeline config", e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    /// Effective analysis settings, checked before any work is done.
    pub fn resolved_analysis(&self) -> Result<AnalysisConfig> {
        let cfg = match &self.simulate {
            Some(sim) => {
                sim.validate()?;
                geometry_from(sim, &self.analysis)
            }
            None => self.analysis.clone(),
        };
        cfg.validate()?;
        if self.simulate.is_none() && self.manifest.is_none() {
            return Err(Error::Config("pipeline needs either `simulate` or `manifest`".into()));
        }
        Ok(cfg)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// `pulse_index,slot,outcome_a,outcome_b,offset_mean_ns`; the slot is empty
/// for records outside the pulse.
pub fn coincidences_csv(set: &CoincidenceSet, slot_cfg: &SlotConfig) -> String {
    let mut s = String::from("pulse_index,slot,outcome_a,outcome_b,offset_mean_ns\n");
    for r in &set.records {
        let slot = slot_cfg.slot_of(r.offset_ns()).map(|k| (k + 1).to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", r.pulse_index, slot, r.outcome_a, r.outcome_b, sig9(r.offset_ns()));
    }
    s
}

pub fn chsh_csv(series: &SParameterSeries) -> String {
    let mut s = String::from("slot_index,S,sigma\n");
    for x in &series.slots {
        let _ = writeln!(s, "{},{},{}", x.slot + 1, sig9(x.s), sig9(x.sigma));
    }
    s
}

pub fn series_csv(l_label: &str, slot_cfg: &SlotConfig, series: &[SlotSeries]) -> String {
    let mut s = String::from("station,l_label,slots,run_id,slot,bits\n");
    for x in series {
        let bits: String = x.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            x.station,
            l_label,
            slot_cfg.label(),
            x.run_id,
            x.slot_index + 1,
            bits
        );
    }
    s
}

/// Series read back from a series CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFile {
    pub l_label: String,
    pub slot_config: SlotConfig,
    pub series: Vec<SlotSeries>,
}

pub fn parse_series_csv(text: &str) -> Result<SeriesFile> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "station,l_label,slots,run_id,slot,bits" => {}
        _ => return Err(Error::Parse { offset: 0, message: "missing series CSV header".into() }),
    }
    let bad = |line: usize, m: String| Error::Parse {
        offset: line,
        message: format!("line {}: {m}", line + 1),
    };
    let mut meta: Option<(String, String)> = None;
    let mut series = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(i, format!("expected 6 fields, got {}", f.len())));
        }
        let station: Station = f[0].parse().map_err(|_| bad(i, format!("unknown station `{}`", f[0])))?;
        match &meta {
            None => meta = Some((f[1].to_string(), f[2].to_string())),
            Some((l, sl)) if l == f[1] && sl == f[2] => {}
            Some(_) => return Err(bad(i, "mixed l_label or slot configurations in one file".into())),
        }
        let slot: usize = f[4].parse().map_err(|_| bad(i, format!("bad slot `{}`", f[4])))?;
        if slot == 0 {
            return Err(bad(i, "slots are numbered from 1".into()));
        }
        let bits = f[5]
            .bytes()
            .map(|b| match b {
                b'0' => Ok(0),
                b'1' => Ok(1),
                _ => Err(bad(i, "bits must be 0/1".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        series.push(SlotSeries {
            station,
            run_id: f[3].to_string(),
            slot_index: slot - 1,
            bits,
        });
    }
    let (l_label, slots) = meta.ok_or_else(|| Error::InsufficientData("series CSV has no rows".into()))?;
    let slot_config = SlotConfig::parse(&slots)?;
    if let Some(s) = series.iter().find(|s| s.slot_index >= slot_config.n_slots) {
        return Err(Error::Domain(format!(
            "slot {} beyond the {} configuration",
            s.slot_index + 1,
            slot_config.label()
        )));
    }
    Ok(SeriesFile {
        l_label,
        slot_config,
        series,
    })
}

pub fn randomness_csv(l_label: &str, rows: &[RandomnessRow]) -> String {
    let mut s = String::from("station,L_label,slot,mean_hm,std_hm,mean_kc,std_kc\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.station,
            l_label,
            r.slot + 1,
            sig9(r.mean_hm),
            sig9(r.std_hm),
            sig9(r.mean_kc),
            sig9(r.std_kc)
        );
    }
    s
}

pub fn ttest_csv(batteries: &[BatteryEntry]) -> String {
    let mut s = String::from(
        "station,estimator,comparison,slot,t_value,df,t_critical,significant,slots_df,slots_t_critical,slots_significant\n",
    );
    for b in batteries {
        let Some(t) = &b.table else { continue };
        for (name, rows) in [("vs_first", &t.vs_reference), ("vs_pooled", &t.vs_pooled)] {
            for r in rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    b.station,
                    b.estimator.as_str(),
                    name,
                    r.slot_index + 1,
                    sig9(r.test.t_value),
                    sig9(r.test.df),
                    sig9(r.test.t_critical),
                    r.test.significant,
                    sig9(r.slots_df),
                    sig9(r.slots_t_critical),
                    r.slots_significant
                );
            }
        }
    }
    s
}

/// One station/estimator comparison table between two separations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub station: Station,
    pub estimator: Estimator,
    pub labels: [String; 2],
    /// `(slot, mean1, std1, mean2, std2, mean1 / mean2)`
    pub rows: Vec<(usize, f64, f64, f64, f64, f64)>,
}

pub fn report_tables(first: (&str, &[RandomnessRow]), second: (&str, &[RandomnessRow])) -> Result<Vec<ReportTable>> {
    let mut out = Vec::new();
    for estimator in [Estimator::Kc, Estimator::Hm] {
        for station in [Station::Alice, Station::Bob] {
            let pick = |rows: &[RandomnessRow]| -> BTreeMap<usize, (f64, f64)> {
                rows.iter()
                    .filter(|r| r.station == station)
                    .map(|r| {
                        let v = match estimator {
                            Estimator::Kc => (r.mean_kc, r.std_kc),
                            Estimator::Hm => (r.mean_hm, r.std_hm),
                        };
                        (r.slot, v)
                    })
                    .collect()
            };
            let (a, b) = (pick(first.1), pick(second.1));
            if a.keys().ne(b.keys()) {
                return Err(Error::Domain("the two series sets have different slot configurations".into()));
            }
            let rows = a
                .iter()
                .map(|(&slot, &(m1, s1))| {
                    let (m2, s2) = b[&slot];
                    (slot, m1, s1, m2, s2, m1 / m2)
                })
                .collect();
            out.push(ReportTable {
                station,
                estimator,
                labels: [first.0.to_string(), second.0.to_string()],
                rows,
            });
        }
    }
    Ok(out)
}

pub fn report_csv(t: &ReportTable) -> String {
    let [l1, l2] = &t.labels;
    let mut s = format!("slot,value_{l1},sigma_{l1},value_{l2},sigma_{l2},ratio\n");
    for &(slot, m1, s1, m2, s2, ratio) in &t.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            slot + 1,
            sig9(m1),
            sig9(s1),
            sig9(m2),
            sig9(s2),
            sig9(ratio)
        );
    }
    s
}

/// Writes every per-stage artifact of an analyzed experiment to `out_dir`.
pub fn write_artifacts(runs: &[RunAnalysis], exp: &ExperimentAnalysis, out_dir: &Path) -> Result<()> {
    let sync_rows: Vec<_> = runs.iter().map(|r| SyncRow::new(&r.run_id, &r.sync)).collect();
    write_file(&out_dir.join("sync.json"), &to_json(&sync_rows))?;
    if let Some((first, _)) = exp.series.first() {
        for r in runs {
            write_file(
                &out_dir.join("coincidences").join(format!("{}.csv", r.run_id)),
                &coincidences_csv(&r.coincidences, first),
            )?;
        }
    }
    let l = &exp.summary.l_label;
    for ((slot_cfg, series), sc) in exp.series.iter().zip(&exp.summary.slot_configs) {
        let label = slot_cfg.label();
        write_file(&out_dir.join(format!("chsh_{label}.csv")), &chsh_csv(&sc.chsh))?;
        write_file(&out_dir.join(format!("series_{label}.csv")), &series_csv(l, slot_cfg, series))?;
        write_file(&out_dir.join(format!("randomness_{label}.csv")), &randomness_csv(l, &sc.randomness))?;
        write_file(&out_dir.join(format!("ttest_{label}.csv")), &ttest_csv(&sc.batteries))?;
    }
    write_file(&out_dir.join("summary.json"), &to_json(&exp.summary))
}

/// Runs every stage and writes all artifacts; returns the summary.
pub fn run_pipeline(cfg: &PipelineConfig, base_dir: &Path, out_dir: &Path) -> Result<Summary> {
    let analysis = cfg.resolved_analysis()?;
    let (manifest, data_dir) = match (&cfg.simulate, &cfg.manifest) {
        (Some(sim), _) => {
            let dir = out_dir.join("data");
            let m = simulator::run_experiment(sim, &dir).map_err(|e| e.in_stage("simulate"))?;
            (m, dir)
        }
        (None, Some(path)) => {
            let path = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
            let m = ExperimentManifest::read(&path).map_err(|e| e.in_stage("ingest"))?;
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (m, dir)
        }
        (None, None) => unreachable!("checked by resolved_analysis"),
    };
    let runs = analyze_manifest(&manifest, &data_dir, &analysis)?;
    let exp = analyze_experiment(&runs, &analysis)?;
    write_artifacts(&runs, &exp, out_dir)?;
    Ok(exp.summary)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let m = stats::mean(values);
    let s = if values.len() > 1 { stats::variance(values).sqrt() } else { 0.0 };
    (m, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{ClockDistortion, DetectorConfig};

    fn small_sim() -> ExperimentConfig {
        ExperimentConfig {
            n_pulses: 60_000,
            pair_yield_per_pulse: 0.1,
            detector_a: DetectorConfig {
                efficiency: 0.8,
                ..Default::default()
            },
            detector_b: DetectorConfig {
                efficiency: 0.8,
                ..Default::default()
            },
            schedule: Schedule::Chsh {
                settings: ChshSchedule::default(),
                runs_per_setting: 2,
            },
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn slot_config_must_tile_pulse() {
        let cfg = AnalysisConfig {
            slots: vec!["5x90".into()],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let pc = PipelineConfig {
            simulate: Some(small_sim()),
            analysis: cfg,
            manifest: None,
        };
        assert!(matches!(pc.resolved_analysis(), Err(Error::Config(_))));
    }

    #[test]
    fn in_memory_analysis_finds_violation() {
        let sim = small_sim();
        let cfg = AnalysisConfig::default();
        let runs = simulate_and_analyze(&sim, &cfg).unwrap();
        assert_eq!(runs.len(), 8);
        for r in &runs {
            assert_eq!(r.sync.first_index_a, 0);
            assert_eq!(r.sync.first_index_b, 0);
        }
        let exp = analyze_experiment(&runs, &cfg).unwrap();
        let s = &exp.summary.slot_configs[0].chsh;
        assert!(s.is_complete());
        assert!(s.mean > 2.4, "{}", s.mean);
        assert_eq!(exp.summary.slot_configs.len(), 2);
        assert_eq!(exp.summary.slot_configs[1].chsh.slots.len(), 10);
        assert_eq!(exp.summary.slot_configs[0].randomness.len(), 10);
    }

    #[test]
    fn series_csv_round_trip() {
        let slot = SlotConfig::new(5, 100.0).unwrap();
        let series = vec![
            SlotSeries {
                station: Station::Alice,
                run_id: "r1".into(),
                slot_index: 0,
                bits: vec![0, 1, 1],
            },
            SlotSeries {
                station: Station::Bob,
                run_id: "r1".into(),
                slot_index: 4,
                bits: vec![],
            },
        ];
        let text = series_csv("1p5m", &slot, &series);
        let back = parse_series_csv(&text).unwrap();
        assert_eq!(back.l_label, "1p5m");
        assert_eq!(back.slot_config, slot);
        assert_eq!(back.series, series);
        assert!(parse_series_csv("station,l_label,slots,run_id,slot,bits\nalice,x,5x100,r,0,01\n").is_err());
        assert!(parse_series_csv("nope\n").is_err());
    }

    #[test]
    fn bob_late_start_is_renumbered() {
        let sim = ExperimentConfig {
            bob_start_pulse: 3100,
            clock_b: ClockDistortion {
                rate_offset_ppm: -7.0,
                offset_ns: 2500.0,
            },
            ..small_sim()
        };
        let runs = simulate_and_analyze(&sim, &AnalysisConfig::default()).unwrap();
        assert_eq!(runs[0].sync.first_index_b, 3100);
        assert!(runs[0].coincidences.records.iter().all(|r| r.pulse_index >= 3100));
    }

    #[test]
    fn report_ratio() {
        let row = |slot, kc| RandomnessRow {
            station: Station::Alice,
            slot,
            n_series: 3,
            mean_hm: 0.8,
            std_hm: 0.01,
            mean_kc: kc,
            std_kc: 0.02,
        };
        let a = [row(0, 1.0), row(1, 0.9)];
        let b = [row(0, 0.5), row(1, 0.9)];
        let t = report_tables(("24m", &a), ("1p5m", &b)).unwrap();
        let kc_alice = &t[0];
        assert_eq!(kc_alice.rows[0].5, 2.0);
        assert_eq!(kc_alice.rows[1].5, 1.0);
        let csv = report_csv(kc_alice);
        assert!(csv.starts_with("slot,value_24m,sigma_24m,value_1p5m,sigma_1p5m,ratio\n1,1,0.02,0.5,0.02,2\n"));
        assert!(report_tables(("24m", &a), ("1p5m", &b[..1])).is_err());
    }
}
