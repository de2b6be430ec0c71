//! Config-driven training runs with snapshot recording, jumps and artifacts.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{CurveMeta, CurveRow, TrainingCurve};
use crate::config::{DataSource, ExperimentConfig, PredictorConfig, Seeds};
use crate::data::{self, BatchStream, Dataset, Split};
use crate::error::{Error, Result};
use crate::history::{check_memory, required_steps, RunMeta, SnapshotStore};
use crate::introspection::{Activation, IntrospectionModel};
use crate::nn::{init_params, Mode, Network, Params, Targets};
use crate::optim::{lr_at, OptimizerState};
use crate::predictors::{apply_jump, JumpPlan, JumpReport, Predictor};
use crate::rng;

pub const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Single-threaded jumps and a zero `seconds` column in the curve, so
    /// repeated runs produce byte-identical artifacts.
    pub deterministic: bool,
    /// Print a line per evaluation to stderr.
    pub verbose: bool,
    /// Skip the jump plan even if the config has one.
    pub no_jumps: bool,
}

#[derive(Debug)]
pub struct RunOutput {
    pub curve: TrainingCurve,
    pub store: SnapshotStore,
    pub params: Params,
    pub jumps: Vec<JumpReport>,
    /// Wall-clock seconds at each curve row.
    pub timing: Vec<f64>,
    /// Set when training stopped on a non-finite loss.
    pub diverged: Option<Error>,
}

/// Loads the train and validation splits named by the config.
pub fn load_data(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Idx { dir, train_limit, shift_radius } => {
            let dir = data_dir.unwrap_or(dir);
            let (mut train, val) = data::load_mnist_dir(dir)?;
            if let Some(n) = *train_limit {
                let n = n.min(train.len());
                let size = train.shape.size();
                train.images.truncate(n * size);
                train.labels.truncate(n);
            }
            if *shift_radius > 0 {
                train = data::expand_shifts(&train, *shift_radius);
            }
            if train.shape != cfg.network.input_shape {
                return Err(Error::config("data", format!("images are {:?}, network expects {:?}", train.shape, cfg.network.input_shape)));
            }
            Ok((train, val))
        }
        DataSource::Synthetic { train, validation, classes, shape } => {
            // one draw split in two so both halves share class centres
            let all = data::synth_dataset_shaped(train + validation, *classes, *shape, cfg.seeds.data)?;
            let size = shape.size();
            let val = Dataset {
                images: all.images[train * size..].to_vec(),
                labels: all.labels[*train..].to_vec(),
                shape: *shape,
                split: Split::Validation,
            };
            let tr = Dataset {
                images: all.images[..train * size].to_vec(),
                labels: all.labels[..*train].to_vec(),
                shape: *shape,
                split: Split::Train,
            };
            Ok((tr, val))
        }
    }
}

/// Resolves the config's jump section, loading model files as needed.
pub fn jump_plan(cfg: &ExperimentConfig, deterministic: bool) -> Result<Option<JumpPlan>> {
    let Some(j) = &cfg.jumps else { return Ok(None) };
    let load = |path: &PathBuf, want: Activation| -> Result<Arc<IntrospectionModel>> {
        let m = IntrospectionModel::load(path)?;
        if m.activation() != want {
            return Err(Error::config("jumps.predictor.model", format!("{} has activation {:?}", path.display(), m.activation())));
        }
        Ok(Arc::new(m))
    };
    let predictor = match &j.predictor {
        PredictorConfig::Introspection { model } => Predictor::Introspection(load(model, Activation::Relu)?),
        PredictorConfig::LinearIntrospection { model } => Predictor::LinearIntrospection(load(model, Activation::Identity)?),
        &PredictorConfig::QuadraticFit { ratio } => Predictor::QuadraticFit { ratio },
        &PredictorConfig::LinearFit { ratio } => Predictor::LinearFit { ratio },
        &PredictorConfig::GaussianNoise { sigma } => Predictor::GaussianNoise { sigma, seed: cfg.seeds.predictor },
    };
    let plan = JumpPlan { steps: j.steps.clone(), predictor, options: j.options(!deterministic), reset_optimizer: j.reset_optimizer };
    plan.validate(cfg.training.total_steps, 1)?;
    Ok(Some(plan))
}

/// Fraction of `ds` (up to `limit` examples) classified correctly.
pub fn accuracy(net: &Network, params: &Params, ds: &Dataset, limit: Option<usize>) -> Result<f64> {
    let n = limit.map_or(ds.len(), |l| l.min(ds.len()));
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let size = ds.shape.size();
    let mut correct = 0usize;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let pred = net.predict(params, &ds.images[start * size..end * size], end - start)?;
        correct += pred.iter().zip(&ds.labels[start..end]).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / n as f64)
}

/// Trains the configured network, recording snapshots and applying jumps.
pub fn run_training(
    cfg: &ExperimentConfig,
    train: &Dataset,
    val: &Dataset,
    plan: Option<&JumpPlan>,
    opts: &RunOptions,
) -> Result<RunOutput> {
    cfg.validate()?;
    let total = cfg.training.total_steps;
    let net = Network::new(cfg.network.clone())?;
    let mut params = init_params(&cfg.network, cfg.init, cfg.seeds.init)?;
    let mut opt = OptimizerState::<f32>::new(cfg.optimizer, params.len());
    let jump_steps: Vec<u64> = plan.map(|p| p.steps.clone()).unwrap_or_default();
    let build = cfg.introspection.as_ref().map(|ic| ic.build_range(total));
    let required = required_steps(&jump_steps, build.as_ref(), cfg.history.stride, total)?;
    check_memory(required.len() as u64 + 1, params.len() as u64)?;
    let meta = RunMeta { spec_hash: cfg.network.hash64(), optimizer: cfg.optimizer.name(), seed: cfg.seeds.init };
    let mut store = SnapshotStore::new(meta, params.values(), cfg.history.stride, required);
    let mut stream = BatchStream::new(train, cfg.training.batch_size, cfg.seeds.data)?;
    let mut curve = TrainingCurve::new(CurveMeta {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seeds.init,
        jump_steps: jump_steps.clone(),
    });
    let mut timing = Vec::new();
    let mut jumps = Vec::new();
    let mut window = (0.0f64, 0u64);
    let start = Instant::now();
    let mut diverged = None;

    for step in 1..=total {
        let batch = stream.next_batch();
        let dropout_seed = rng::mix(cfg.seeds.dropout, step);
        let state = net.forward(&params, &batch.inputs, batch.len(), Mode::Train, dropout_seed)?;
        let (grad, loss) = net.backward(&params, &state, Targets::Classes(&batch.labels))?;
        if !loss.is_finite() {
            diverged = Some(Error::Divergence { step, loss: loss as f64 });
            break;
        }
        opt.step(params.values_mut(), grad.values(), lr_at(&cfg.schedule, step - 1))?;
        window.0 += loss as f64;
        window.1 += 1;

        match plan {
            Some(p) if p.is_jump(step) => {
                let report = apply_jump(&mut params, &mut store, step, &p.predictor, &p.options)?;
                if opts.verbose {
                    eprintln!("jump at {step}: {} updated, {} clamped", report.updated, report.clamped);
                }
                jumps.push(report);
                if p.reset_optimizer {
                    opt.reset();
                }
            }
            _ => {
                if store.is_required(step) || step == total {
                    store.record(step, params.values())?;
                }
            }
        }

        if step % cfg.training.eval_every == 0 || step == total {
            let acc = accuracy(&net, &params, val, cfg.training.eval_limit)?;
            let secs = start.elapsed().as_secs_f64();
            timing.push(secs);
            let row = CurveRow {
                step,
                loss: window.0 / window.1.max(1) as f64,
                val_acc: acc,
                seconds: if opts.deterministic { 0.0 } else { secs },
            };
            if opts.verbose {
                eprintln!("step {step:>6}  loss {:.4}  val_acc {:.4}  {:.1}s", row.loss, acc, secs);
            }
            curve.push(row)?;
            window = (0.0, 0);
        }
    }
    Ok(RunOutput { curve, store, params, jumps, timing, diverged })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub deterministic: bool,
    pub jump_reports: Vec<JumpReport>,
    pub last_step: u64,
    pub diverged: Option<String>,
    pub notes: Vec<String>,
}

/// Crate version plus `git describe` of the working tree when available.
pub fn version_string() -> String {
    let describe = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into());
    format!("{} ({describe})", env!("CARGO_PKG_VERSION"))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `curve.csv`, `history.whst`, `config.toml`, `manifest.json` and,
/// under the determinism flag, `timing.csv`.
pub fn write_run_artifacts(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput, command: &str, opts: &RunOptions) -> Result<()> {
    ensure_dir(dir)?;
    out.curve.write_csv(dir.join("curve.csv"))?;
    out.store.save(dir.join("history.whst"))?;
    cfg.save(dir.join("config.toml"))?;
    if opts.deterministic {
        let mut t = String::from("step,seconds\n");
        for (row, s) in out.curve.rows.iter().zip(&out.timing) {
            t.push_str(&format!("{},{}\n", row.step, s));
        }
        let path = dir.join("timing.csv");
        std::fs::write(&path, t).map_err(|e| Error::io(&path, e))?;
    }
    let mut notes = vec!["second moment averages recorded steps after step 0".to_string()];
    if opts.deterministic {
        notes.push("curve seconds column zeroed; wall-clock in timing.csv".into());
    }
    write_manifest(
        dir,
        &Manifest {
            name: cfg.name.clone(),
            command: command.into(),
            version: version_string(),
            config_hash: cfg.hash(),
            seeds: cfg.seeds,
            deterministic: opts.deterministic,
            jump_reports: out.jumps.clone(),
            last_step: out.store.last_step(),
            diverged: out.diverged.as_ref().map(|e| e.to_string()),
            notes,
        },
    )
}

/// Full run: load data, resolve the jump plan, train, write artifacts into
/// `out_dir`. A divergence still writes the partial artifacts before
/// returning the error.
pub fn run_experiment(cfg: &ExperimentConfig, data_dir: Option<&Path>, out_dir: &Path, command: &str, opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, val) = load_data(cfg, data_dir)?;
    let plan = if opts.no_jumps { None } else { jump_plan(cfg, opts.deterministic)? };
    let mut out = run_training(cfg, &train, &val, plan.as_ref(), opts)?;
    write_run_artifacts(out_dir, cfg, &out, command, opts)?;
    match out.diverged.take() {
        Some(e) => Err(e),
        None => Ok(out),
    }
}
