//! Experiment configuration (TOML) and the shipped presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::history::{scaled_step, BuildRange};
use crate::introspection::{BuildConfig, Protocol};
use crate::nn::{InitRule, NetworkSpec, Shape};
use crate::optim::{LrSchedule, OptimizerKind};
use crate::predictors::JumpOptions;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub not_for_acceptance: bool,
    pub network: NetworkSpec,
    pub init: InitRule,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub training: TrainingConfig,
    #[serde(default)]
    pub history: HistoryConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jumps: Option<JumpConfig>,
    pub data: DataSource,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub introspection: Option<IntrospectionConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    /// Evaluate on the first `eval_limit` validation examples only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_limit: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryConfig {
    /// Snapshot every `stride` steps in addition to the required steps; 0 disables.
    #[serde(default)]
    pub stride: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorConfig {
    Introspection { model: PathBuf },
    LinearIntrospection { model: PathBuf },
    QuadraticFit { ratio: f64 },
    LinearFit { ratio: f64 },
    GaussianNoise { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpConfig {
    pub steps: Vec<u64>,
    pub predictor: PredictorConfig,
    #[serde(default = "yes")]
    pub include_biases: bool,
    #[serde(default)]
    pub reset_optimizer: bool,
    #[serde(default = "ten")]
    pub clamp_factor: f64,
}

fn yes() -> bool {
    true
}
fn ten() -> f64 {
    10.0
}

impl JumpConfig {
    pub fn options(&self, parallel: bool) -> JumpOptions {
        JumpOptions { include_biases: self.include_biases, clamp_factor: self.clamp_factor, parallel }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Directory holding the four MNIST IDX files (optionally gzipped).
    Idx {
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        /// Expand the train split with every translation of up to this many
        /// pixels (0 = off).
        #[serde(default)]
        shift_radius: usize,
    },
    Synthetic { train: usize, validation: usize, classes: usize, shape: Shape },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub dropout: u64,
    pub predictor: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { init: 1, data: 2, dropout: 3, predictor: 4 }
    }
}

impl Seeds {
    /// Derives all four seeds from one master seed. Kept below 2^63 so
    /// they stay representable as TOML integers.
    pub fn from_master(seed: u64) -> Self {
        let d = |salt| crate::rng::mix(seed, salt) >> 1;
        Seeds { init: d(1), data: d(2), dropout: d(3), predictor: d(4) }
    }
}

/// Dataset building and training settings for the forecaster. Unset step
/// bounds default to `t_min = total_steps / 10` and `t_max = total_steps / k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrospectionConfig {
    #[serde(default = "sample_count")]
    pub sample_count: usize,
    #[serde(default = "two")]
    pub k: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_min: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<u64>,
    /// Spacing of candidate forecast steps recorded during the base run.
    #[serde(default = "hundred")]
    pub every: u64,
    #[serde(default = "fractions")]
    pub fractions: [f64; 3],
    #[serde(default = "tenth")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub protocol: Protocol,
}

fn sample_count() -> usize {
    50_000
}
fn two() -> f64 {
    2.0
}
fn hundred() -> u64 {
    100
}
fn fractions() -> [f64; 3] {
    [0.5, 0.25, 0.25]
}
fn tenth() -> f64 {
    0.1
}

impl Default for IntrospectionConfig {
    fn default() -> Self {
        IntrospectionConfig {
            sample_count: sample_count(),
            k: two(),
            t_min: None,
            t_max: None,
            every: hundred(),
            fractions: fractions(),
            validation_fraction: tenth(),
            protocol: Protocol::default(),
        }
    }
}

impl IntrospectionConfig {
    pub fn build_range(&self, total_steps: u64) -> BuildRange {
        let t_min = self.t_min.unwrap_or((total_steps / 10).max(1));
        let t_max = self.t_max.unwrap_or((total_steps as f64 / self.k).floor() as u64);
        BuildRange { t_min, t_max, every: self.every, k: self.k }
    }

    pub fn build_config(&self, total_steps: u64, seed: u64) -> BuildConfig {
        let r = self.build_range(total_steps);
        BuildConfig {
            sample_count: self.sample_count,
            k: self.k,
            t_min: r.t_min,
            t_max: r.t_max,
            every: Some(r.every),
            fractions: self.fractions,
            validation_fraction: self.validation_fraction,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs") }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| locate(text, s.start)).unwrap_or_else(|| "<root>".into());
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Hex sha256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config("schema_version", format!("expected {SCHEMA_VERSION}, got {}", self.schema_version)));
        }
        self.network.validate().map_err(|e| Error::config("network", e.to_string()))?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be >= 1"));
        }
        if t.total_steps == 0 {
            return Err(Error::config("training.total_steps", "must be >= 1"));
        }
        if t.eval_every == 0 {
            return Err(Error::config("training.eval_every", "must be >= 1"));
        }
        if let Some(j) = &self.jumps {
            if j.steps.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config("jumps.steps", "must be strictly increasing"));
            }
            if let Some(&s) = j.steps.iter().find(|&&s| s >= t.total_steps) {
                return Err(Error::config("jumps.steps", format!("jump step {s} is not below total_steps {}", t.total_steps)));
            }
            if let Some(&s) = j.steps.iter().find(|&&s| s < 3) {
                return Err(Error::config("jumps.steps", format!("jump step {s} leaves no history (need >= 3)")));
            }
            if !(j.clamp_factor > 0.0) {
                return Err(Error::config("jumps.clamp_factor", "must be > 0"));
            }
            match &j.predictor {
                PredictorConfig::QuadraticFit { ratio } | PredictorConfig::LinearFit { ratio } if !(*ratio > 1.0) => {
                    return Err(Error::config("jumps.predictor.ratio", "must be > 1"));
                }
                PredictorConfig::GaussianNoise { sigma } if !(*sigma >= 0.0) => {
                    return Err(Error::config("jumps.predictor.sigma", "must be >= 0"));
                }
                _ => {}
            }
        }
        match &self.data {
            DataSource::Synthetic { train, classes, shape, .. } => {
                if *train == 0 || *classes < 2 {
                    return Err(Error::config("data", "synthetic data needs train >= 1 and classes >= 2"));
                }
                if *shape != self.network.input_shape {
                    return Err(Error::config("data.shape", "must equal network.input_shape"));
                }
            }
            DataSource::Idx { .. } => {}
        }
        if let Some(ic) = &self.introspection {
            let r = ic.build_range(t.total_steps);
            let b = ic.build_config(t.total_steps, 0);
            b.validate()?;
            if scaled_step(r.t_max, r.k) > t.total_steps {
                return Err(Error::config("introspection.t_max", "k * t_max exceeds total_steps"));
            }
            if ic.every == 0 {
                return Err(Error::config("introspection.every", "must be >= 1"));
            }
            if ic.protocol.batch_size == 0 || ic.protocol.steps == 0 {
                return Err(Error::config("introspection.protocol", "batch_size and steps must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn jump_steps(&self) -> &[u64] {
        self.jumps.as_ref().map_or(&[], |j| &j.steps)
    }
}

/// Dotted key path of the TOML table enclosing byte offset `at`.
fn locate(text: &str, at: usize) -> String {
    let before = &text[..at.min(text.len())];
    let table = before
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').to_string());
    let key = text[before.rfind('\n').map_or(0, |i| i + 1)..]
        .split('=')
        .next()
        .map(|k| k.trim().to_string())
        .filter(|k| !k.is_empty() && !k.starts_with('['));
    match (table, key) {
        (Some(t), Some(k)) => format!("{t}.{k}"),
        (Some(t), None) => t,
        (None, Some(k)) => k,
        (None, None) => "<root>".into(),
    }
}

pub mod presets {
    use super::*;
    use crate::nn::{LayerSpec, Padding};

    pub const NAMES: &[&str] = &[
        "synthetic",
        "n0",
        "mnist1",
        "mnist1_adam",
        "mnist2",
        "mnist3",
        "mnist3_adam",
        "cifar1_set1",
        "cifar1_set2",
        "cifar1_set3",
        "cifar1_set4",
    ];

    pub fn by_name(name: &str) -> Option<ExperimentConfig> {
        Some(match name {
            "synthetic" => synthetic(),
            "n0" => n0(),
            "mnist1" => mnist1(),
            "mnist1_adam" => mnist1_adam(),
            "mnist2" => mnist2(),
            "mnist3" => mnist3(),
            "mnist3_adam" => mnist3_adam(),
            "cifar1_set1" => cifar1(1),
            "cifar1_set2" => cifar1(2),
            "cifar1_set3" => cifar1(3),
            "cifar1_set4" => cifar1(4),
            _ => return None,
        })
    }

    fn conv(k: usize, cin: usize, cout: usize) -> LayerSpec {
        LayerSpec::Conv2d { kh: k, kw: k, cin, cout, stride: 1, padding: Padding::Same }
    }

    fn pool(size: usize, stride: usize) -> LayerSpec {
        LayerSpec::MaxPool { size, stride, padding: Padding::Same }
    }

    fn dense(inputs: usize, outputs: usize) -> LayerSpec {
        LayerSpec::Dense { inputs, outputs }
    }

    /// The bundled data has 7000 training digits; one-pixel shifts bring it
    /// to 63000, near the size of the standard training split.
    fn mnist_data() -> DataSource {
        DataSource::Idx { dir: PathBuf::from("data/mnist"), train_limit: None, shift_radius: 1 }
    }

    fn base(name: &str, network: NetworkSpec, init: InitRule, optimizer: OptimizerKind, schedule: LrSchedule, batch_size: usize, total_steps: u64) -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            name: name.into(),
            not_for_acceptance: false,
            network,
            init,
            optimizer,
            schedule,
            training: TrainingConfig { batch_size, total_steps, eval_every: 250, eval_limit: None },
            history: HistoryConfig { stride: 1000 },
            jumps: None,
            data: mnist_data(),
            seeds: Seeds::default(),
            introspection: None,
            output: OutputConfig { dir: PathBuf::from(format!("runs/{name}")) },
        }
    }

    fn intro_jumps(steps: &[u64]) -> Option<JumpConfig> {
        Some(JumpConfig {
            steps: steps.to_vec(),
            predictor: PredictorConfig::Introspection { model: PathBuf::from("runs/n0/introspection.intr") },
            include_biases: true,
            reset_optimizer: false,
            clamp_factor: 10.0,
        })
    }

    /// Desk-scale base network: three conv layers with pooling, then fc 512-256-10.
    pub fn n0_spec() -> NetworkSpec {
        NetworkSpec {
            input_shape: Shape::new(28, 28, 1),
            layers: vec![
                conv(5, 1, 8),
                LayerSpec::Relu,
                pool(2, 2),
                conv(5, 8, 16),
                LayerSpec::Relu,
                pool(2, 2),
                conv(5, 16, 32),
                LayerSpec::Relu,
                pool(2, 2),
                dense(512, 256),
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: 0.5 },
                dense(256, 10),
                LayerSpec::SoftmaxXent,
            ],
        }
    }

    pub fn n0() -> ExperimentConfig {
        let mut c = base(
            "n0",
            n0_spec(),
            InitRule::TruncatedNormal { mean: 0.0, std: 0.1 },
            OptimizerKind::adam(),
            LrSchedule::constant(1e-4),
            50,
            10_000,
        );
        c.training.eval_every = 500;
        c.introspection = Some(IntrospectionConfig {
            t_min: Some(1000),
            t_max: Some(5000),
            every: 100,
            ..Default::default()
        });
        c
    }

    pub fn mnist1_spec() -> NetworkSpec {
        NetworkSpec {
            input_shape: Shape::new(28, 28, 1),
            layers: vec![
                conv(5, 1, 8),
                LayerSpec::Relu,
                pool(2, 2),
                conv(5, 8, 64),
                LayerSpec::Relu,
                pool(2, 2),
                dense(3136, 1024),
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: 0.5 },
                dense(1024, 10),
                LayerSpec::SoftmaxXent,
            ],
        }
    }

    pub fn mnist1() -> ExperimentConfig {
        let mut c = base(
            "mnist1",
            mnist1_spec(),
            InitRule::TruncatedNormal { mean: 0.0, std: 0.01 },
            OptimizerKind::Sgd,
            LrSchedule::constant(1e-2),
            50,
            20_000,
        );
        c.jumps = intro_jumps(&[3000, 4000, 5000]);
        c
    }

    pub fn mnist1_adam() -> ExperimentConfig {
        let mut c = mnist1();
        c.name = "mnist1_adam".into();
        c.optimizer = OptimizerKind::adam();
        c.schedule = LrSchedule::constant(1e-4);
        c.output.dir = PathBuf::from("runs/mnist1_adam");
        c
    }

    pub fn mnist2() -> ExperimentConfig {
        let spec = NetworkSpec {
            input_shape: Shape::new(28, 28, 1),
            layers: vec![
                LayerSpec::Conv2d { kh: 5, kw: 5, cin: 1, cout: 20, stride: 1, padding: Padding::Valid },
                LayerSpec::MaxPool { size: 2, stride: 2, padding: Padding::Valid },
                LayerSpec::Conv2d { kh: 5, kw: 5, cin: 20, cout: 50, stride: 1, padding: Padding::Valid },
                LayerSpec::MaxPool { size: 2, stride: 2, padding: Padding::Valid },
                dense(800, 500),
                LayerSpec::Relu,
                dense(500, 10),
                LayerSpec::SoftmaxXent,
            ],
        };
        let mut c = base(
            "mnist2",
            spec,
            InitRule::Xavier,
            OptimizerKind::Sgd,
            LrSchedule { base_lr: 0.01, rule: crate::optim::LrRule::InvDecay { gamma: 1e-4, power: 0.75 } },
            64,
            10_000,
        );
        c.jumps = intro_jumps(&[2500, 3000]);
        c
    }

    pub fn mnist3_spec() -> NetworkSpec {
        NetworkSpec {
            input_shape: Shape::new(28, 28, 1),
            layers: vec![dense(784, 256), LayerSpec::Relu, dense(256, 256), LayerSpec::Relu, dense(256, 10), LayerSpec::SoftmaxXent],
        }
    }

    pub fn mnist3() -> ExperimentConfig {
        let mut c = base(
            "mnist3",
            mnist3_spec(),
            InitRule::Normal { mean: 0.0, std: 1.0 },
            OptimizerKind::Sgd,
            LrSchedule::constant(5e-3),
            100,
            15_000,
        );
        c.jumps = intro_jumps(&[6000, 8000, 10000]);
        c
    }

    pub fn mnist3_adam() -> ExperimentConfig {
        let mut c = mnist3();
        c.name = "mnist3_adam".into();
        c.optimizer = OptimizerKind::adam();
        c.schedule = LrSchedule::constant(1e-3);
        c.output.dir = PathBuf::from("runs/mnist3_adam");
        c
    }

    /// CIFAR-shaped jump sets. Config stubs only: the data source points at
    /// IDX files that are not shipped.
    pub fn cifar1(set: u8) -> ExperimentConfig {
        let spec = NetworkSpec {
            input_shape: Shape::new(24, 24, 3),
            layers: vec![
                conv(5, 3, 64),
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 3, stride: 2, padding: Padding::Same },
                conv(5, 64, 64),
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 3, stride: 2, padding: Padding::Same },
                dense(2304, 384),
                LayerSpec::Relu,
                dense(384, 192),
                LayerSpec::Relu,
                dense(192, 10),
                LayerSpec::SoftmaxXent,
            ],
        };
        let steps: &[u64] = match set {
            1 => &[20_000, 22_000, 24_000],
            2 => &[30_000, 32_000, 34_000, 36_000],
            3 => &[20_000, 22_000, 24_000, 30_000, 32_000, 34_000, 36_000],
            _ => &[30_000, 32_000, 34_000, 36_000, 38_000, 40_000],
        };
        let name = format!("cifar1_set{set}");
        let mut c = base(&name, spec, InitRule::Normal { mean: 0.0, std: 0.04 }, OptimizerKind::Sgd, LrSchedule::constant(0.1), 128, 50_000);
        c.not_for_acceptance = true;
        c.data = DataSource::Idx { dir: PathBuf::from("data/cifar10"), train_limit: None, shift_radius: 0 };
        c.jumps = intro_jumps(steps);
        c
    }

    /// Small MLP on the synthetic set; runs in seconds.
    pub fn synthetic() -> ExperimentConfig {
        let shape = crate::data::SYNTH_SHAPE;
        let spec = NetworkSpec {
            input_shape: shape,
            layers: vec![dense(shape.size(), 32), LayerSpec::Relu, dense(32, 4), LayerSpec::SoftmaxXent],
        };
        let mut c = base("synthetic", spec, InitRule::Xavier, OptimizerKind::Sgd, LrSchedule::constant(0.05), 32, 600);
        c.training.eval_every = 50;
        c.history.stride = 50;
        c.data = DataSource::Synthetic { train: 1000, validation: 200, classes: 4, shape };
        c
    }
}
