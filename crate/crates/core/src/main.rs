use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use weightcast::analysis::{self, Binning, HistogramSpec, Metric, TrainingCurve};
use weightcast::config::{presets, ExperimentConfig, IntrospectionConfig, PredictorConfig, Seeds};
use weightcast::experiment::{self, Manifest, RunOptions};
use weightcast::history::SnapshotStore;
use weightcast::introspection::{self, SampleSet};

#[derive(Parser)]
#[command(name = "weightcast", version, about = "Forecast weight trajectories to accelerate training")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's IDX data directory
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Output directory (defaults to the config's output.dir)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; derives all per-purpose seeds
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, byte-reproducible artifacts
    #[arg(long, global = true)]
    deterministic: bool,
    /// Progress on stderr
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base network and record its weight history
    TrainBase,
    /// Build forecaster training samples from a recorded history
    BuildDataset {
        #[arg(long)]
        history: PathBuf,
    },
    /// Train the introspection network on built samples
    TrainIntrospection {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        validation: Option<PathBuf>,
    },
    /// Train a target network, applying the config's jump plan
    TrainTarget {
        /// Overrides the introspection model path in the jump plan
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Weight-evolution histograms and sampled trajectories
    Analyze {
        #[arg(long)]
        history: PathBuf,
        #[arg(long, default_value_t = analysis::DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value_t = 3)]
        per_bin: usize,
        #[arg(long)]
        log_frequency: bool,
    },
    /// Compare training curves against a reference (no-jump) run
    Compare {
        #[arg(required = true, num_args = 2..)]
        curves: Vec<PathBuf>,
        /// Index of the reference curve
        #[arg(long, default_value_t = 0)]
        reference: usize,
    },
    /// Inspect recorded histories
    History {
        #[command(subcommand)]
        action: HistoryAction,
    },
    /// Print a preset config as TOML
    Preset { name: String },
}

#[derive(Subcommand)]
enum HistoryAction {
    /// Print one scalar's recorded series as CSV
    Export {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        index: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for part in e.chain().map(|c| c.to_string()) {
                if !msg.ends_with(&part) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&part);
                }
            }
            eprintln!("error: {msg}");
            let code = e.chain().find_map(|c| c.downcast_ref::<weightcast::Error>()).map_or(1, |w| w.exit_code());
            ExitCode::from(code)
        }
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let path = g.config.as_ref().context("--config is required for this command")?;
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = g.seed {
        cfg.seeds = Seeds::from_master(seed);
    }
    Ok(cfg)
}

fn optional_config(g: &Global) -> Result<Option<ExperimentConfig>> {
    g.config.as_ref().map(|_| load_config(g)).transpose()
}

fn out_dir(g: &Global, cfg: Option<&ExperimentConfig>) -> PathBuf {
    g.out.clone().or_else(|| cfg.map(|c| c.output.dir.clone())).unwrap_or_else(|| PathBuf::from("runs"))
}

fn opts(g: &Global) -> RunOptions {
    RunOptions { deterministic: g.deterministic, verbose: g.verbose, no_jumps: false }
}

fn simple_manifest(name: &str, command: &str, cfg: Option<&ExperimentConfig>, g: &Global, notes: Vec<String>) -> Manifest {
    Manifest {
        name: name.into(),
        command: command.into(),
        version: experiment::version_string(),
        config_hash: cfg.map(|c| c.hash()).unwrap_or_default(),
        seeds: cfg.map(|c| c.seeds).unwrap_or_default(),
        deterministic: g.deterministic,
        jump_reports: Vec::new(),
        last_step: 0,
        diverged: None,
        notes,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| weightcast::Error::io(path, e))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Preset { name } => {
            let Some(cfg) = presets::by_name(&name) else {
                bail!(weightcast::Error::config("preset", format!("unknown preset '{name}'; known: {}", presets::NAMES.join(", "))));
            };
            print!("{}", cfg.to_toml());
        }
        Command::TrainBase => {
            let cfg = load_config(g)?;
            let dir = out_dir(g, Some(&cfg));
            let o = RunOptions { no_jumps: true, ..opts(g) };
            let out = experiment::run_experiment(&cfg, g.data_dir.as_deref(), &dir, "train-base", &o)?;
            println!(
                "trained {} for {} steps, final val_acc {:.4}; {} snapshots in {}",
                cfg.name,
                cfg.training.total_steps,
                out.curve.final_acc().unwrap_or(f64::NAN),
                out.store.len(),
                dir.join("history.whst").display()
            );
        }
        Command::TrainTarget { model } => {
            let mut cfg = load_config(g)?;
            if let (Some(m), Some(j)) = (model, cfg.jumps.as_mut()) {
                match &mut j.predictor {
                    PredictorConfig::Introspection { model } | PredictorConfig::LinearIntrospection { model } => *model = m,
                    _ => bail!(weightcast::Error::config("jumps.predictor", "--model given but the predictor is not model-based")),
                }
            }
            let dir = out_dir(g, Some(&cfg));
            let out = experiment::run_experiment(&cfg, g.data_dir.as_deref(), &dir, "train-target", &opts(g))?;
            for r in &out.jumps {
                println!("jump at step {}: {} scalars updated, {} clamped", r.step, r.updated, r.clamped);
            }
            println!("final val_acc {:.4}; curve in {}", out.curve.final_acc().unwrap_or(f64::NAN), dir.join("curve.csv").display());
        }
        Command::BuildDataset { history } => {
            let cfg = optional_config(g)?;
            let store = SnapshotStore::load(&history)?;
            let ic = cfg.as_ref().and_then(|c| c.introspection.clone()).unwrap_or_default();
            let total = cfg.as_ref().map_or(store.last_step(), |c| c.training.total_steps);
            let seed = cfg.as_ref().map_or(Seeds::default().data, |c| c.seeds.data);
            let bc = ic.build_config(total, seed);
            let set = introspection::build_dataset(&store, &bc)?;
            let dir = out_dir(g, cfg.as_ref());
            experiment::ensure_dir(&dir)?;
            introspection::write_samples_csv(dir.join("samples_train.csv"), &set.train)?;
            introspection::write_samples_csv(dir.join("samples_validation.csv"), &set.validation)?;
            let note = format!("build config: {}", serde_json::to_string(&bc)?);
            experiment::write_manifest(&dir, &simple_manifest("dataset", "build-dataset", cfg.as_ref(), g, vec![note]))?;
            println!("{} train / {} validation samples written to {}", set.train.len(), set.validation.len(), dir.display());
        }
        Command::TrainIntrospection { train, validation } => {
            let cfg = optional_config(g)?;
            let mut protocol = cfg.as_ref().and_then(|c| c.introspection.clone()).map_or_else(|| IntrospectionConfig::default().protocol, |i| i.protocol);
            if let Some(c) = cfg.as_ref().filter(|_| g.seed.is_some()) {
                protocol.seed = c.seeds.init;
            }
            let set = SampleSet {
                train: introspection::read_samples_csv(&train)?,
                validation: validation.map(introspection::read_samples_csv).transpose()?.unwrap_or_default(),
            };
            let trained = introspection::train_introspection(&set, &protocol)?;
            let dir = out_dir(g, cfg.as_ref());
            experiment::ensure_dir(&dir)?;
            let model_path = dir.join("introspection.intr");
            trained.model.save(&model_path)?;
            let mut csv = String::from("step,train_l1,validation_l1\n");
            for p in &trained.curve {
                csv.push_str(&format!("{},{},{}\n", p.step, p.train_l1, p.validation_l1.map_or(String::new(), |v| v.to_string())));
            }
            write(&dir.join("introspection_loss.csv"), &csv)?;
            let notes = vec![format!("protocol: {}", serde_json::to_string(&protocol)?)];
            experiment::write_manifest(&dir, &simple_manifest("introspection", "train-introspection", cfg.as_ref(), g, notes))?;
            println!(
                "train L1 {:.3}, validation L1 {} (scaled); model in {}",
                trained.final_train_l1,
                trained.final_validation_l1.map_or("n/a".into(), |v| format!("{v:.3}")),
                model_path.display()
            );
        }
        Command::Analyze { history, bins, per_bin, log_frequency } => {
            let cfg = optional_config(g)?;
            let store = SnapshotStore::load(&history)?;
            let dir = out_dir(g, cfg.as_ref());
            experiment::ensure_dir(&dir)?;
            let seed = cfg.as_ref().map_or(0, |c| c.seeds.data);
            for (metric, stem) in [(Metric::FinalMinusInitial, "deviation"), (Metric::SqrtSecondMoment, "second_moment")] {
                let spec = HistogramSpec { metric, bins: Binning::Uniform(bins), log_frequency };
                let h = analysis::metric_histogram(&store, &spec)?;
                write(&dir.join(format!("{stem}_histogram.csv")), &h.to_csv())?;
                let traj = analysis::sample_trajectories(&store, &h, per_bin, seed)?;
                write(&dir.join(format!("{stem}_trajectories.csv")), &analysis::trajectories_csv(&traj))?;
                let mut abs: Vec<f64> = h.values.iter().map(|v| v.abs()).collect();
                abs.sort_by(f64::total_cmp);
                let q = |p: f64| abs[((abs.len() - 1) as f64 * p).round() as usize];
                println!(
                    "{stem}: {} scalars, median |v| {:.3e}, p99 |v| {:.3e}, max |v| {:.3e}",
                    h.total(),
                    q(0.5),
                    q(0.99),
                    q(1.0)
                );
            }
        }
        Command::Compare { curves, reference } => {
            let mut loaded: Vec<TrainingCurve> = curves.iter().map(TrainingCurve::read_csv).collect::<weightcast::Result<_>>()?;
            // every run writes curve.csv, so label rows by path instead
            for (c, p) in loaded.iter_mut().zip(&curves) {
                c.meta.name = p.with_extension("").display().to_string();
            }
            let rows = analysis::compare_runs(&loaded, reference)?;
            print!("{}", analysis::summary_table(&rows));
            if let Some(out) = &g.out {
                experiment::ensure_dir(out)?;
                write(&out.join("summary.csv"), &analysis::summary_csv(&rows))?;
            }
        }
        Command::History { action: HistoryAction::Export { history, index } } => {
            let store = SnapshotStore::load(&history)?;
            let s = store.weight_series(index)?;
            println!("step,value,deviation");
            for ((step, v), d) in s.steps.iter().zip(&s.values).zip(s.deviations()) {
                println!("{step},{v},{d}");
            }
        }
    }
    Ok(())
}
