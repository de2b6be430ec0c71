//! The introspection forecaster: a 4→40→1 network that maps four samples of
//! a weight's history to its value `k` times further into training.
//!
//! Inputs are `[w(t), w(⌊0.7t⌋), w(⌊0.4t⌋), w(0)]`, the target is `w(⌊kt⌋)`,
//! and everything the network sees is multiplied by [`SCALE`].

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::{input_steps, scaled_step, BuildRange, SnapshotStore};
use crate::nn::{init_params, InitRule, LayerSpec, Mode, NetworkSpec, Network, ParamLayout, Params, Shape, Targets};
use crate::optim::{lr_at, LrRule, LrSchedule, OptimizerKind, OptimizerState};
use crate::rng::{self, Domain};

pub const SCALE: f64 = 1000.0;
pub const INPUTS: usize = 4;
pub const HIDDEN: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSample {
    pub flat_index: u64,
    pub t: u64,
    pub k: f64,
    /// Scaled `[w(t), w(0.7t), w(0.4t), w(0)]`.
    pub x: [f32; INPUTS],
    /// Scaled `w(kt)`.
    pub y: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub sample_count: usize,
    pub k: f64,
    pub t_min: u64,
    pub t_max: u64,
    /// When set, candidate steps are the multiples of `every` in the range
    /// (all of which must be recorded); otherwise every recorded step in range.
    pub every: Option<u64>,
    /// Share of samples from the top-50%, 50–75% and 75–100% variation ranks.
    pub fractions: [f64; 3],
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            sample_count: 50_000,
            k: 2.0,
            t_min: 1,
            t_max: u64::MAX,
            every: None,
            fractions: [0.5, 0.25, 0.25],
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.fractions.iter().any(|&f| f < 0.0) {
            return Err(Error::config("introspection.fractions", "must be non-negative and sum to 1"));
        }
        if !(self.k > 1.0) {
            return Err(Error::config("introspection.k", "must be > 1"));
        }
        if self.t_min < 1 || self.t_min > self.t_max {
            return Err(Error::config("introspection.t_min", "need 1 <= t_min <= t_max"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("introspection.validation_fraction", "must be in [0, 1)"));
        }
        if self.sample_count == 0 {
            return Err(Error::config("introspection.sample_count", "must be >= 1"));
        }
        Ok(())
    }
}

/// Training and held-out samples; no weight index appears in both.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    pub train: Vec<WeightSample>,
    pub validation: Vec<WeightSample>,
}

/// Splits `total` into per-stratum counts by cumulative rounding.
pub fn stratum_counts(total: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let mut counts = [0; 3];
    let mut acc = 0.0;
    let mut prev = 0;
    for (c, f) in counts.iter_mut().zip(fractions) {
        acc += f;
        let upto = ((total as f64 * acc).round() as usize).min(total);
        *c = upto - prev;
        prev = upto;
    }
    counts[2] += total - prev;
    counts
}

fn make_sample(store: &SnapshotStore, i: usize, t: u64, k: f64) -> Result<WeightSample> {
    let mut x = [0.0f32; INPUTS];
    for (xv, step) in x.iter_mut().zip(input_steps(t)) {
        *xv = (store.exact(step)?[i] as f64 * SCALE) as f32;
    }
    let y = (store.exact(scaled_step(t, k))?[i] as f64 * SCALE) as f32;
    Ok(WeightSample { flat_index: i as u64, t, k, x, y })
}

/// Builds stratified introspection training data from a recorded history.
///
/// Each weight gets its own step `t`, drawn uniformly from the recorded steps
/// in `[t_min, t_max]`. Weights are ranked by `|w(t) - w(0)|` (largest first)
/// and samples are drawn without replacement inside each rank stratum,
/// cycling with a fresh `t` only when a stratum is smaller than its quota.
pub fn build_dataset(store: &SnapshotStore, cfg: &BuildConfig) -> Result<SampleSet> {
    cfg.validate()?;
    let candidates: Vec<u64> = match cfg.every {
        Some(every) => BuildRange { t_min: cfg.t_min, t_max: cfg.t_max, every, k: cfg.k }.candidates().collect(),
        None => store.steps().filter(|&s| s >= cfg.t_min && s <= cfg.t_max).collect(),
    };
    if candidates.is_empty() {
        return Err(Error::Range(format!("no recorded steps in [{}, {}]", cfg.t_min, cfg.t_max)));
    }
    let p = store.param_count();
    if p == 0 {
        return Err(Error::EmptyDataset);
    }
    let draw_t = |i: usize, round: u64| {
        let mut r = rng::keyed(Domain::Sampling, cfg.seed, i as u64, round);
        candidates[r.gen_range(0..candidates.len())]
    };
    let w0 = store.exact(0)?;
    let first_t: Vec<u64> = (0..p).map(|i| draw_t(i, 0)).collect();
    let mut variation = Vec::with_capacity(p);
    for (i, &t) in first_t.iter().enumerate() {
        variation.push((store.exact(t)?[i] - w0[i]).abs());
    }
    let mut ranked: Vec<usize> = (0..p).collect();
    ranked.sort_by(|&a, &b| variation[b].total_cmp(&variation[a]).then(a.cmp(&b)));

    let b1 = ((p as f64 * cfg.fractions[0]).round() as usize).min(p);
    let b2 = ((p as f64 * (cfg.fractions[0] + cfg.fractions[1])).round() as usize).clamp(b1, p);
    let strata = [&ranked[..b1], &ranked[b1..b2], &ranked[b2..]];
    let mut counts = stratum_counts(cfg.sample_count, &cfg.fractions);
    // Quotas of empty strata (tiny networks) move to the nearest non-empty one.
    for s in 0..3 {
        if strata[s].is_empty() && counts[s] > 0 {
            let target = (0..3)
                .filter(|&o| !strata[o].is_empty())
                .min_by_key(|&o| (o as i64 - s as i64).abs())
                .expect("p > 0 so some stratum is non-empty");
            counts[target] += counts[s];
            counts[s] = 0;
        }
    }

    let mut samples = Vec::with_capacity(cfg.sample_count);
    for (s, members) in strata.iter().enumerate() {
        if counts[s] == 0 {
            continue;
        }
        let mut order = members.to_vec();
        order.shuffle(&mut rng::keyed(Domain::Sampling, cfg.seed, u64::MAX - s as u64, 0));
        for j in 0..counts[s] {
            let i = order[j % order.len()];
            let round = (j / order.len()) as u64;
            let t = if round == 0 { first_t[i] } else { draw_t(i, round) };
            samples.push(make_sample(store, i, t, cfg.k)?);
        }
    }

    let mut weights: Vec<u64> = samples.iter().map(|s| s.flat_index).collect();
    weights.sort_unstable();
    weights.dedup();
    weights.shuffle(&mut rng::keyed(Domain::Sampling, cfg.seed, u64::MAX - 3, 0));
    let n_val = (weights.len() as f64 * cfg.validation_fraction).round() as usize;
    let held_out: std::collections::HashSet<u64> = weights[..n_val.min(weights.len())].iter().copied().collect();
    let (validation, train) = samples.into_iter().partition(|s| held_out.contains(&s.flat_index));
    Ok(SampleSet { train, validation })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// The linear-introspection variant.
    Identity,
}

pub fn model_spec(activation: Activation) -> NetworkSpec {
    let mut layers = vec![LayerSpec::Dense { inputs: INPUTS, outputs: HIDDEN }];
    if activation == Activation::Relu {
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Dense { inputs: HIDDEN, outputs: 1 });
    layers.push(LayerSpec::L1Loss);
    NetworkSpec { input_shape: Shape::flat(INPUTS), layers }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntrospectionModel {
    activation: Activation,
    params: Params,
}

impl IntrospectionModel {
    pub fn new(activation: Activation, params: Params) -> Result<Self> {
        let layout = ParamLayout::from_spec(&model_spec(activation));
        if params.len() != layout.len() {
            return Err(Error::Shape(format!("introspection model needs {} params, got {}", layout.len(), params.len())));
        }
        Ok(IntrospectionModel { activation, params })
    }

    pub fn zeros(activation: Activation) -> Self {
        let layout = Arc::new(ParamLayout::from_spec(&model_spec(activation)));
        IntrospectionModel { activation, params: Params::zeros(layout) }
    }

    /// ReLU model whose output is exactly its most recent input:
    /// `relu(x0) - relu(-x0)`.
    pub fn pass_through() -> Self {
        let mut m = Self::zeros(Activation::Relu);
        let v = m.params.values_mut();
        v[0] = 1.0; // w1[0][0]
        v[1] = -1.0; // w1[0][1]
        let out_w = INPUTS * HIDDEN + HIDDEN;
        v[out_w] = 1.0;
        v[out_w + 1] = -1.0;
        m
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// MLP output for already-scaled inputs, evaluated in f64.
    pub fn forward_scaled(&self, x: &[f64; INPUTS]) -> f64 {
        let v = self.params.values();
        let (w1, rest) = v.split_at(INPUTS * HIDDEN);
        let (b1, rest) = rest.split_at(HIDDEN);
        let (w2, b2) = rest.split_at(HIDDEN);
        let mut out = b2[0] as f64;
        for j in 0..HIDDEN {
            let mut h = b1[j] as f64;
            for (i, &xi) in x.iter().enumerate() {
                h += xi * w1[i * HIDDEN + j] as f64;
            }
            if self.activation == Activation::Relu {
                h = h.max(0.0);
            }
            out += h * w2[j] as f64;
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.params.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.push(match self.activation {
            Activation::Relu => 0,
            Activation::Identity => 1,
        });
        out.extend_from_slice(&(INPUTS as u16).to_le_bytes());
        out.extend_from_slice(&(HIDDEN as u16).to_le_bytes());
        for v in self.params.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 15 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::Format("not an INTR model file (bad magic)".into()));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
            return Err(Error::Format("model checksum mismatch".into()));
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let activation = match body[6] {
            0 => Activation::Relu,
            1 => Activation::Identity,
            t => return Err(Error::Format(format!("unknown activation tag {t}"))),
        };
        let inputs = u16::from_le_bytes([body[7], body[8]]) as usize;
        let hidden = u16::from_le_bytes([body[9], body[10]]) as usize;
        if inputs != INPUTS || hidden != HIDDEN {
            return Err(Error::Format(format!("model shape {inputs}x{hidden}, expected {INPUTS}x{HIDDEN}")));
        }
        let payload = &body[11..];
        if payload.len() % 4 != 0 {
            return Err(Error::Format("model payload is not a whole number of f32".into()));
        }
        let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let layout = Arc::new(ParamLayout::from_spec(&model_spec(activation)));
        let params = Params::from_values(layout, values).map_err(|e| Error::Format(e.to_string()))?;
        Ok(IntrospectionModel { activation, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub const MODEL_MAGIC: &[u8; 4] = b"INTR";
pub const MODEL_VERSION: u16 = 1;

/// Forecast of `w(kt)` in raw units from `[w(t), w(0.7t), w(0.4t), w(0)]`.
pub fn predict_weight(model: &IntrospectionModel, history: &[f32; INPUTS]) -> Result<f32> {
    let mut x = [0.0f64; INPUTS];
    for (i, (xv, &h)) in x.iter_mut().zip(history).enumerate() {
        if !h.is_finite() {
            return Err(Error::Numeric { index: i, msg: format!("history value {h}") });
        }
        *xv = h as f64 * SCALE;
    }
    Ok((model.forward_scaled(&x) / SCALE) as f32)
}

/// Mean `|y - MLP(x)|` in scaled space.
pub fn evaluate_l1(model: &IntrospectionModel, samples: &[WeightSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total: f64 = samples
        .iter()
        .map(|s| {
            let x = s.x.map(|v| v as f64);
            (s.y as f64 - model.forward_scaled(&x)).abs()
        })
        .sum();
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Protocol {
    pub activation: Activation,
    pub lr: f64,
    pub decay_interval: u64,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            activation: Activation::Relu,
            lr: 5e-4,
            decay_interval: 8000,
            decay_factor: 0.5,
            batch_size: 20,
            steps: 30_000,
            seed: 0,
            log_every: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    /// Mean batch L1 since the previous point.
    pub train_l1: f64,
    pub validation_l1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedIntrospection {
    pub model: IntrospectionModel,
    pub curve: Vec<LossPoint>,
    /// Batch L1 of every step.
    pub step_losses: Vec<f32>,
    pub final_train_l1: f64,
    pub final_validation_l1: Option<f64>,
}

/// Trains the forecaster with Adam on mean L1 in scaled space.
pub fn train_introspection(samples: &SampleSet, protocol: &Protocol) -> Result<TrainedIntrospection> {
    if samples.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if protocol.batch_size == 0 {
        return Err(Error::config("introspection.batch_size", "must be >= 1"));
    }
    let net = Network::new(model_spec(protocol.activation))?;
    let mut params = init_params(net.spec(), InitRule::Xavier, protocol.seed)?;
    let mut opt = OptimizerState::new(OptimizerKind::adam(), params.len());
    let schedule = LrSchedule {
        base_lr: protocol.lr,
        rule: LrRule::StepDecay { interval: protocol.decay_interval, factor: protocol.decay_factor },
    };
    schedule.validate()?;

    let n = samples.train.len();
    let mut order: Vec<usize> = Vec::new();
    let mut pos = n;
    let mut epoch = 0u64;
    let mut step_losses = Vec::with_capacity(protocol.steps as usize);
    let mut curve = Vec::new();
    let mut window = (0.0f64, 0usize);
    let mut inputs = Vec::with_capacity(protocol.batch_size * INPUTS);
    let mut targets = Vec::with_capacity(protocol.batch_size);
    for step in 1..=protocol.steps {
        if pos >= n {
            order = (0..n).collect();
            order.shuffle(&mut rng::keyed(Domain::Sampling, protocol.seed, epoch, 1));
            epoch += 1;
            pos = 0;
        }
        let end = (pos + protocol.batch_size).min(n);
        inputs.clear();
        targets.clear();
        for &i in &order[pos..end] {
            inputs.extend_from_slice(&samples.train[i].x);
            targets.push(samples.train[i].y);
        }
        pos = end;
        let state = net.forward(&params, &inputs, targets.len(), Mode::Train, 0)?;
        let (grad, loss) = net.backward(&params, &state, Targets::Values(&targets))?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss: loss as f64 });
        }
        opt.step(params.values_mut(), grad.values(), lr_at(&schedule, step - 1))?;
        step_losses.push(loss);
        window.0 += loss as f64;
        window.1 += 1;
        if step % protocol.log_every.max(1) == 0 || step == protocol.steps {
            let model = IntrospectionModel::new(protocol.activation, params.clone())?;
            let validation_l1 = if samples.validation.is_empty() {
                None
            } else {
                Some(evaluate_l1(&model, &samples.validation)?)
            };
            curve.push(LossPoint { step, train_l1: window.0 / window.1 as f64, validation_l1 });
            window = (0.0, 0);
        }
    }
    let model = IntrospectionModel::new(protocol.activation, params)?;
    let final_train_l1 = evaluate_l1(&model, &samples.train)?;
    let final_validation_l1 = if samples.validation.is_empty() {
        None
    } else {
        Some(evaluate_l1(&model, &samples.validation)?)
    };
    Ok(TrainedIntrospection { model, curve, step_losses, final_train_l1, final_validation_l1 })
}

/// Writes samples as CSV: `flat_index,t,k,x0,x1,x2,x3,y`.
pub fn write_samples_csv(path: impl AsRef<Path>, samples: &[WeightSample]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["flat_index", "t", "k", "x0", "x1", "x2", "x3", "y"]).map_err(|e| csv_err(path, e))?;
    for s in samples {
        w.write_record([
            s.flat_index.to_string(),
            s.t.to_string(),
            s.k.to_string(),
            s.x[0].to_string(),
            s.x[1].to_string(),
            s.x[2].to_string(),
            s.x[3].to_string(),
            s.y.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples_csv(path: impl AsRef<Path>) -> Result<Vec<WeightSample>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Format(format!("{}: short row", path.display())));
        let bad = |i: usize| Error::Format(format!("{}: bad value in column {i}", path.display()));
        let f32_at = |i: usize| field(i)?.parse::<f32>().map_err(|_| bad(i));
        out.push(WeightSample {
            flat_index: field(0)?.parse().map_err(|_| bad(0))?,
            t: field(1)?.parse().map_err(|_| bad(1))?,
            k: field(2)?.parse().map_err(|_| bad(2))?,
            x: [f32_at(3)?, f32_at(4)?, f32_at(5)?, f32_at(6)?],
            y: f32_at(7)?,
        });
    }
    Ok(out)
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other:?}", path.display())),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::RunMeta;
    use std::collections::BTreeSet;

    fn linear_store(p: usize, steps: &[u64], slope: impl Fn(usize) -> f32) -> SnapshotStore {
        let init: Vec<f32> = (0..p).map(|i| 0.01 * i as f32).collect();
        let mut s = SnapshotStore::new(RunMeta::default(), &init, 0, BTreeSet::new());
        for &t in steps.iter().filter(|&&t| t > 0) {
            let v: Vec<f32> = (0..p).map(|i| init[i] + slope(i) * t as f32).collect();
            s.record(t, &v).unwrap();
        }
        s
    }

    #[test]
    fn strata_of_eight_weights() {
        // weight i moves by i*1e-4 per step: ranks are 7,6,...,0
        let s = linear_store(8, &[40, 70, 100, 200], |i| i as f32 * 1e-4);
        let cfg = BuildConfig { sample_count: 8, t_min: 100, t_max: 100, validation_fraction: 0.0, ..Default::default() };
        let set = build_dataset(&s, &cfg).unwrap();
        assert_eq!(set.train.len(), 8);
        let mut idx: Vec<u64> = set.train.iter().map(|s| s.flat_index).collect();
        let top: BTreeSet<u64> = idx[..4].iter().copied().collect();
        assert_eq!(top, BTreeSet::from([4, 5, 6, 7]));
        let mid: BTreeSet<u64> = idx[4..6].iter().copied().collect();
        assert_eq!(mid, BTreeSet::from([2, 3]));
        idx.sort_unstable();
        assert_eq!(idx, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn input_and_target_steps() {
        assert_eq!(input_steps(1000), [1000, 700, 400, 0]);
        assert_eq!(scaled_step(1000, 2.0), 2000);
    }

    #[test]
    fn constant_weight_sample() {
        let mut s = SnapshotStore::new(RunMeta::default(), &[0.003], 0, BTreeSet::new());
        for t in [400, 700, 1000, 2000] {
            s.record(t, &[0.003]).unwrap();
        }
        let cfg = BuildConfig { sample_count: 1, t_min: 1000, t_max: 1000, validation_fraction: 0.0, ..Default::default() };
        let set = build_dataset(&s, &cfg).unwrap();
        assert_eq!(set.train[0].x, [3.0; 4]);
        assert_eq!(set.train[0].y, 3.0);
    }

    #[test]
    fn missing_snapshot_and_empty_range() {
        let s = linear_store(4, &[40, 70, 100], |_| 1e-4);
        let cfg = BuildConfig { sample_count: 4, t_min: 100, t_max: 100, ..Default::default() };
        assert!(matches!(build_dataset(&s, &cfg), Err(Error::MissingSnapshot(200))));
        let cfg = BuildConfig { sample_count: 4, t_min: 5000, t_max: 6000, ..Default::default() };
        assert!(matches!(build_dataset(&s, &cfg), Err(Error::Range(_))));
    }

    #[test]
    fn split_is_by_weight() {
        let steps: Vec<u64> = (0..=400).collect();
        let s = linear_store(200, &steps, |i| (i % 17) as f32 * 1e-5);
        let cfg = BuildConfig { sample_count: 500, t_min: 50, t_max: 200, seed: 3, ..Default::default() };
        let set = build_dataset(&s, &cfg).unwrap();
        assert_eq!(set.train.len() + set.validation.len(), 500);
        let val: BTreeSet<u64> = set.validation.iter().map(|s| s.flat_index).collect();
        assert!(!val.is_empty());
        assert!(set.train.iter().all(|s| !val.contains(&s.flat_index)));
        assert_eq!(set, build_dataset(&s, &cfg).unwrap());
    }

    #[test]
    fn zero_and_pass_through_models() {
        let zero = IntrospectionModel::zeros(Activation::Relu);
        assert_eq!(predict_weight(&zero, &[0.5, 0.1, -0.3, 2.0]).unwrap(), 0.0);
        let pt = IntrospectionModel::pass_through();
        for w in [0.1f32, -0.0371, 1.5e-3, 7.25, -3.0e-6] {
            assert_eq!(predict_weight(&pt, &[w, 9.0, -9.0, 1.0]).unwrap(), w);
        }
        assert!(matches!(predict_weight(&pt, &[f32::NAN, 0.0, 0.0, 0.0]), Err(Error::Numeric { index: 0, .. })));
    }

    #[test]
    fn forward_scaled_agrees_with_engine() {
        let net = Network::new(model_spec(Activation::Relu)).unwrap();
        let params = init_params(net.spec(), InitRule::Normal { mean: 0.0, std: 0.5 }, 9).unwrap();
        let model = IntrospectionModel::new(Activation::Relu, params.clone()).unwrap();
        let x = [3.0f32, 2.5, 1.0, -0.5];
        let s = net.forward(&params.cast::<f64>(), &x.map(|v| v as f64), 1, Mode::Eval, 0).unwrap();
        let direct = model.forward_scaled(&x.map(|v| v as f64));
        assert!((s.logits()[0] - direct).abs() < 1e-9);
    }

    #[test]
    fn evaluate_l1_cases() {
        let zero = IntrospectionModel::zeros(Activation::Identity);
        let mk = |y| WeightSample { flat_index: 0, t: 1, k: 2.0, x: [0.0; 4], y };
        assert_eq!(evaluate_l1(&zero, &[mk(3.0), mk(-3.0)]).unwrap(), 3.0);
        assert_eq!(evaluate_l1(&zero, &[mk(0.0)]).unwrap(), 0.0);
        assert!(matches!(evaluate_l1(&zero, &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn model_bytes_round_trip_and_reject_corruption() {
        let net = Network::new(model_spec(Activation::Identity)).unwrap();
        let params = init_params(net.spec(), InitRule::Xavier, 1).unwrap();
        let m = IntrospectionModel::new(Activation::Identity, params).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(IntrospectionModel::from_bytes(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(IntrospectionModel::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[0] = b'W';
        assert!(matches!(IntrospectionModel::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn empty_training_set() {
        assert!(matches!(train_introspection(&SampleSet::default(), &Protocol::default()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn samples_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let samples = vec![
            WeightSample { flat_index: 3, t: 100, k: 2.2, x: [1.5, -0.1, 3.3333333, 0.0], y: 7.0000005 },
            WeightSample { flat_index: 9, t: 7, k: 2.0, x: [1e-7, 2.0, 3.0, 4.0], y: -1.0 },
        ];
        write_samples_csv(&path, &samples).unwrap();
        assert_eq!(read_samples_csv(&path).unwrap(), samples);
    }

    #[test]
    fn stratum_counts_sum() {
        for total in 0..50 {
            let c = stratum_counts(total, &[0.5, 0.25, 0.25]);
            assert_eq!(c.iter().sum::<usize>(), total);
        }
        assert_eq!(stratum_counts(8, &[0.5, 0.25, 0.25]), [4, 2, 2]);
    }
}
