//! `slotbell`: staged command-line access to the analysis pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slotbell_core::bell::s_time_resolved;
use slotbell_core::coincidence::{classify_counts, CountTable};
use slotbell_core::error::{Error, ErrorKind, Result};
use slotbell_core::ingest::{self, ExperimentManifest, ParseOptions};
use slotbell_core::pipeline::{self, AnalysisConfig, PipelineConfig, RunAnalysis, SyncRow};
use slotbell_core::simulator::{self, ExperimentConfig};
use slotbell_core::stats::DfConvention;
use slotbell_core::SlotConfig;

#[derive(Parser, Debug)]
#[command(name = "slotbell", version, about = "Time-resolved CHSH and randomness analysis of pulsed Bell experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate an experiment: manifest, .btt files and ground-truth sidecars
    Simulate {
        /// Experiment configuration (JSON); defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse every run file of a manifest and report record counts
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recover the shared pulse numbering and fitted clock model of each run
    Sync(StageArgs),
    /// Extract coincidences; writes per-run CSVs and slot-series files
    Coincidences(StageArgs),
    /// Time-resolved CHSH per slot configuration
    Chsh(StageArgs),
    /// Per-slot Hm and Kc statistics from a slot-series file
    Randomness {
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Shorter series are skipped
        #[arg(long, default_value_t = 100)]
        min_bits: usize,
    },
    /// Slot-comparison t-tests from a slot-series file
    Ttest {
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "sample")]
        df_convention: DfConvention,
        #[arg(long, default_value_t = 100)]
        min_bits: usize,
    },
    /// Compare two slot-series files (e.g. two separations) slot by slot
    Report {
        /// Exactly two series files; ratios are first / second
        #[arg(long, num_args = 2, required = true)]
        series: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        min_bits: usize,
    },
    /// Every stage end to end, plus summary.json
    Pipeline {
        /// Pipeline configuration (JSON)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the simulator seed
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args, Debug)]
struct StageArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Pipeline configuration (JSON) whose `analysis` section is used
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct Overrides {
    /// Slot partition `<n>x<width_ns>`; repeat for several
    #[arg(long)]
    slots: Vec<String>,
    /// Full coincidence window width
    #[arg(long)]
    window_ns: Option<f64>,
    #[arg(long)]
    df_convention: Option<DfConvention>,
}

impl Overrides {
    fn apply(&self, cfg: &mut AnalysisConfig) {
        if !self.slots.is_empty() {
            cfg.slots = self.slots.clone();
        }
        if let Some(w) = self.window_ns {
            cfg.window_ns = w;
        }
        if let Some(c) = self.df_convention {
            cfg.battery.df_convention = c;
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes to `<out>/<name>` or, without `--out`, prints to stdout.
fn emit(out: Option<&Path>, name: &str, contents: &str) -> Result<()> {
    match out {
        Some(dir) => write_out(dir, name, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn stage_setup(args: &StageArgs) -> Result<(AnalysisConfig, ExperimentManifest, PathBuf)> {
    let pc = match &args.config {
        Some(p) => PipelineConfig::read(p)?,
        None => PipelineConfig::default(),
    };
    let mut cfg = match &pc.simulate {
        Some(sim) => pipeline::geometry_from(sim, &pc.analysis),
        None => pc.analysis,
    };
    args.overrides.apply(&mut cfg);
    cfg.validate()?;
    let manifest = ExperimentManifest::read(&args.manifest)?;
    let base = args.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, manifest, base))
}

fn analyze(args: &StageArgs) -> Result<(AnalysisConfig, Vec<RunAnalysis>)> {
    let (cfg, manifest, base) = stage_setup(args)?;
    let runs = pipeline::analyze_manifest(&manifest, &base, &cfg)?;
    Ok((cfg, runs))
}

fn tables(runs: &[RunAnalysis], slot_cfg: &SlotConfig) -> CountTable {
    let mut t = CountTable::default();
    for r in runs {
        t.merge(&classify_counts(&r.coincidences.records, slot_cfg));
    }
    t
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let mut cfg = match &config {
                Some(p) => ExperimentConfig::from_json(&read_text(p)?)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let m = simulator::run_experiment(&cfg, &out)?;
            eprintln!("wrote {} runs to {}", m.runs.len(), out.display());
        }
        Command::Ingest { manifest, out } => {
            let m = ExperimentManifest::read(&manifest)?;
            let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
            let opts = ParseOptions::default();
            let mut rows = Vec::new();
            for r in &m.runs {
                for (station, file) in [("alice", &r.alice_file), ("bob", &r.bob_file)] {
                    let path = if file.is_absolute() { file.clone() } else { base.join(file) };
                    let parsed = ingest::read_timetag_path(&path, opts).map_err(|e| Error::RunFile {
                        run_id: r.run_id.clone(),
                        path: path.clone(),
                        source: Box::new(e),
                    })?;
                    let triggers = parsed.stream.trigger_times().len();
                    rows.push(serde_json::json!({
                        "run_id": r.run_id,
                        "station": station,
                        "records": parsed.stream.len(),
                        "triggers": triggers,
                        "detections": parsed.stream.len() - triggers,
                        "order_violations": parsed.order_violations,
                    }));
                }
            }
            emit(out.as_deref(), "ingest.json", &pipeline::to_json(&rows))?;
        }
        Command::Sync(args) => {
            let (cfg, manifest, base) = stage_setup(&args)?;
            let rows = manifest
                .runs
                .iter()
                .map(|r| {
                    let s = ingest::load_run(r, &base, ParseOptions::default())?;
                    let m = slotbell_core::sync::recover_pulse_numbering(
                        &s.alice.trigger_times(),
                        &s.bob.trigger_times(),
                        &cfg.modulation,
                    )
                    .map_err(|e| e.in_stage("sync"))?;
                    Ok(SyncRow::new(&r.run_id, &m))
                })
                .collect::<Result<Vec<_>>>()?;
            emit(args.out.as_deref(), "sync.json", &pipeline::to_json(&rows))?;
        }
        Command::Coincidences(args) => {
            let (cfg, runs) = analyze(&args)?;
            let out = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let slot_cfgs = cfg.slot_configs()?;
            for r in &runs {
                write_out(
                    &out.join("coincidences"),
                    &format!("{}.csv", r.run_id),
                    &pipeline::coincidences_csv(&r.coincidences, &slot_cfgs[0]),
                )?;
            }
            for sc in &slot_cfgs {
                let series: Vec<_> = runs.iter().flat_map(|r| pipeline::slot_series(r, sc)).collect();
                write_out(
                    &out,
                    &format!("series_{}.csv", sc.label()),
                    &pipeline::series_csv(&cfg.l_label, sc, &series),
                )?;
            }
            let n: usize = runs.iter().map(|r| r.coincidences.records.len()).sum();
            eprintln!("{n} coincidences in {} runs", runs.len());
        }
        Command::Chsh(args) => {
            let (cfg, runs) = analyze(&args)?;
            for sc in cfg.slot_configs()? {
                let series = s_time_resolved(&tables(&runs, &sc), &cfg.schedule, &sc, cfg.sigma)?;
                let label = sc.label();
                emit(args.out.as_deref(), &format!("chsh_{label}.csv"), &pipeline::chsh_csv(&series))?;
                if let Some(dir) = &args.out {
                    write_out(dir, &format!("chsh_{label}.json"), &pipeline::to_json(&series))?;
                }
            }
        }
        Command::Randomness { series, out, min_bits } => {
            let file = pipeline::parse_series_csv(&read_text(&series)?)?;
            let st = pipeline::series_statistics(&file.series, file.slot_config.n_slots, min_bits, Default::default())?;
            emit(
                out.as_deref(),
                &format!("randomness_{}_{}.csv", file.l_label, file.slot_config.label()),
                &pipeline::randomness_csv(&file.l_label, &st.rows),
            )?;
        }
        Command::Ttest {
            series,
            out,
            df_convention,
            min_bits,
        } => {
            let file = pipeline::parse_series_csv(&read_text(&series)?)?;
            let mut opts = slotbell_core::stats::BatteryOptions::default();
            opts.df_convention = df_convention;
            let st = pipeline::series_statistics(&file.series, file.slot_config.n_slots, min_bits, opts)?;
            let stem = format!("ttest_{}_{}", file.l_label, file.slot_config.label());
            emit(out.as_deref(), &format!("{stem}.csv"), &pipeline::ttest_csv(&st.batteries))?;
            if let Some(dir) = &out {
                write_out(dir, &format!("{stem}.json"), &pipeline::to_json(&st.batteries))?;
            }
        }
        Command::Report { series, out, min_bits } => {
            let files = series
                .iter()
                .map(|p| pipeline::parse_series_csv(&read_text(p)?))
                .collect::<Result<Vec<_>>>()?;
            if files[0].slot_config != files[1].slot_config {
                return Err(Error::Config("the two series files use different slot configurations".into()));
            }
            let stats = files
                .iter()
                .map(|f| pipeline::series_statistics(&f.series, f.slot_config.n_slots, min_bits, Default::default()))
                .collect::<Result<Vec<_>>>()?;
            let tables = pipeline::report_tables(
                (&files[0].l_label, &stats[0].rows),
                (&files[1].l_label, &stats[1].rows),
            )?;
            let label = files[0].slot_config.label();
            for t in &tables {
                write_out(
                    &out,
                    &format!("report_{label}_{}_{}.csv", t.estimator.as_str(), t.station),
                    &pipeline::report_csv(t),
                )?;
            }
            write_out(&out, &format!("report_{label}.json"), &pipeline::to_json(&tables))?;
        }
        Command::Pipeline {
            config,
            out,
            seed,
            overrides,
        } => {
            let mut pc = match &config {
                Some(p) => PipelineConfig::read(p)?,
                None => PipelineConfig {
                    simulate: Some(ExperimentConfig::default()),
                    ..Default::default()
                },
            };
            if let (Some(s), Some(sim)) = (seed, pc.simulate.as_mut()) {
                sim.seed = s;
            }
            overrides.apply(&mut pc.analysis);
            let base = config
                .as_deref()
                .and_then(Path::parent)
                .map(Path::to_path_buf)
                .unwrap_or_default();
            let summary = pipeline::run_pipeline(&pc, &base, &out)?;
            for sc in &summary.slot_configs {
                eprintln!(
                    "{}: <S> = {:.4} ± {:.4} over {} coincidences",
                    sc.slots, sc.chsh.mean, sc.chsh.mean_sigma, summary.coincidences
                );
            }
        }
    }
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Internal => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            log::debug!("{e:?}");
            ExitCode::from(exit_code(e.kind()))
        }
        Err(_) => ExitCode::from(4),
    }
}
