//! Per-weight forecasters and the jump engine that applies them to a live
//! parameter vector.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::{input_steps, SnapshotStore};
use crate::introspection::{predict_weight, Activation, IntrospectionModel};
use crate::nn::Params;
use crate::rng::{self, Domain};

/// A forecaster mapping one weight's four-point history to a future value.
#[derive(Debug, Clone)]
pub enum Predictor {
    Introspection(Arc<IntrospectionModel>),
    LinearIntrospection(Arc<IntrospectionModel>),
    QuadraticFit { ratio: f64 },
    LinearFit { ratio: f64 },
    GaussianNoise { sigma: f64, seed: u64 },
}

impl Predictor {
    pub fn validate(&self) -> Result<()> {
        match self {
            Predictor::Introspection(m) if m.activation() != Activation::Relu => {
                Err(Error::config("jumps.predictor", "introspection predictor needs a relu model"))
            }
            Predictor::LinearIntrospection(m) if m.activation() != Activation::Identity => {
                Err(Error::config("jumps.predictor", "linear introspection needs an identity-activation model"))
            }
            Predictor::QuadraticFit { ratio } | Predictor::LinearFit { ratio } if !(*ratio > 1.0) => {
                Err(Error::config("jumps.predictor.ratio", "must be > 1"))
            }
            Predictor::GaussianNoise { sigma, .. } if !(*sigma >= 0.0) => {
                Err(Error::config("jumps.predictor.sigma", "must be >= 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Predictor::Introspection(_) => "introspection".into(),
            Predictor::LinearIntrospection(_) => "linear_introspection".into(),
            Predictor::QuadraticFit { ratio } => format!("quadratic_fit({ratio})"),
            Predictor::LinearFit { ratio } => format!("linear_fit({ratio})"),
            Predictor::GaussianNoise { sigma, .. } => format!("gaussian_noise({sigma})"),
        }
    }

    /// Forecast for scalar `index` at jump step `t`.
    /// `history` is `[w(t), w(0.7t), w(0.4t), w(0)]`.
    pub fn forecast(&self, index: usize, t: u64, history: &[f32; 4]) -> Result<f32> {
        match self {
            Predictor::Introspection(m) | Predictor::LinearIntrospection(m) => predict_weight(m, history),
            Predictor::QuadraticFit { ratio } | Predictor::LinearFit { ratio } => {
                let steps = input_steps(t);
                let pts: [(f64, f64); 4] = std::array::from_fn(|j| (steps[j] as f64, history[j] as f64));
                let target = ratio * t as f64;
                let v = if matches!(self, Predictor::QuadraticFit { .. }) {
                    quadratic_fit_predict(&pts, target)?
                } else {
                    linear_fit_predict(&pts, target)?
                };
                Ok(v as f32)
            }
            Predictor::GaussianNoise { sigma, seed } => Ok(noise_perturb(history[0], *sigma, *seed, index as u64, t)),
        }
    }
}

/// Least-squares polynomial of `degree` through `points`, evaluated at `target`.
fn poly_fit_predict(points: &[(f64, f64)], degree: usize, target: f64) -> Result<f64> {
    let n = degree + 1;
    // Steps are rescaled to [-1, 1] so the normal matrix stays well conditioned
    // for step counts in the tens of thousands.
    let scale = points.iter().map(|p| p.0.abs()).fold(0.0, f64::max).max(1.0);
    let mut a = vec![vec![0.0f64; n + 1]; n];
    for &(s, w) in points {
        let s = s / scale;
        let mut pow = vec![1.0; 2 * n - 1];
        for k in 1..pow.len() {
            pow[k] = pow[k - 1] * s;
        }
        for r in 0..n {
            for c in 0..n {
                a[r][c] += pow[r + c];
            }
            a[r][n] += pow[r] * w;
        }
    }
    let coef = solve(a).ok_or_else(|| Error::Fit(format!("singular normal matrix for degree {degree} fit")))?;
    let x = target / scale;
    Ok(coef.iter().rev().fold(0.0, |acc, &c| acc * x + c))
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    let norm = a.iter().flat_map(|r| &r[..n]).fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * norm.max(f64::MIN_POSITIVE) {
            return None;
        }
        a.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..=n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut v = a[r][n];
        for c in r + 1..n {
            v -= a[r][c] * x[c];
        }
        x[r] = v / a[r][r];
    }
    Some(x)
}

fn distinct_steps(points: &[(f64, f64)]) -> usize {
    let mut s: Vec<f64> = points.iter().map(|p| p.0).collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s.len()
}

/// Fits `a + b*s + c*s^2` to four `(step, value)` points and evaluates it at `target`.
pub fn quadratic_fit_predict(points: &[(f64, f64); 4], target: f64) -> Result<f64> {
    if distinct_steps(points) < 4 {
        return Err(Error::Fit("quadratic fit needs 4 distinct steps".into()));
    }
    poly_fit_predict(points, 2, target)
}

/// Fits `a + b*s` to four `(step, value)` points and evaluates it at `target`.
pub fn linear_fit_predict(points: &[(f64, f64); 4], target: f64) -> Result<f64> {
    if distinct_steps(points) < 2 {
        return Err(Error::Fit("linear fit needs at least 2 distinct steps".into()));
    }
    poly_fit_predict(points, 1, target)
}

/// `value + eps`, `eps ~ N(0, sigma^2)` drawn from a generator keyed by
/// `(seed, flat_index, step)`.
pub fn noise_perturb(value: f32, sigma: f64, seed: u64, flat_index: u64, step: u64) -> f32 {
    if sigma == 0.0 {
        return value;
    }
    (value as f64 + noise_eps(sigma, seed, flat_index, step)) as f32
}

pub fn noise_eps(sigma: f64, seed: u64, flat_index: u64, step: u64) -> f64 {
    let mut r = rng::keyed(Domain::Noise, seed, flat_index, step);
    Normal::new(0.0, sigma).expect("sigma >= 0").sample(&mut r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpOptions {
    pub include_biases: bool,
    /// Forecasts are clamped to `clamp_factor * max|w|` over the run's history.
    pub clamp_factor: f64,
    pub parallel: bool,
}

impl Default for JumpOptions {
    fn default() -> Self {
        JumpOptions { include_biases: true, clamp_factor: 10.0, parallel: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpReport {
    pub step: u64,
    pub updated: usize,
    pub clamped: usize,
}

/// Overwrites every trainable scalar with its forecast.
///
/// The live vector is recorded as the step-`t` snapshot first, then each
/// scalar is replaced using its own history at `{t, 0.7t, 0.4t, 0}`.
pub fn apply_jump(
    params: &mut Params,
    store: &mut SnapshotStore,
    t: u64,
    predictor: &Predictor,
    opts: &JumpOptions,
) -> Result<JumpReport> {
    if !store.contains(t) {
        store.record(t, params.values())?;
    }
    let steps = input_steps(t);
    let hist: Vec<&[f32]> = steps.iter().map(|&s| store.exact(s)).collect::<Result<_>>()?;
    let cap = (opts.clamp_factor * store.max_abs() as f64) as f32;
    let mask = (!opts.include_biases).then(|| params.layout().bias_mask());
    let one = |i: usize| -> Result<Option<(f32, bool)>> {
        if mask.as_ref().is_some_and(|m| m[i]) {
            return Ok(None);
        }
        let h = [hist[0][i], hist[1][i], hist[2][i], hist[3][i]];
        let f = predictor.forecast(i, t, &h)?;
        if !f.is_finite() {
            return Err(Error::Numeric { index: i, msg: format!("non-finite forecast {f} at step {t}") });
        }
        if cap > 0.0 && f.abs() > cap {
            return Ok(Some((f.clamp(-cap, cap), true)));
        }
        Ok(Some((f, false)))
    };
    let n = params.len();
    let out: Vec<Option<(f32, bool)>> = if opts.parallel {
        (0..n).into_par_iter().map(one).collect::<Result<_>>()?
    } else {
        (0..n).map(one).collect::<Result<_>>()?
    };
    let mut report = JumpReport { step: t, updated: 0, clamped: 0 };
    for (w, o) in params.values_mut().iter_mut().zip(out) {
        if let Some((f, clamped)) = o {
            *w = f;
            report.updated += 1;
            report.clamped += clamped as usize;
        }
    }
    Ok(report)
}

/// Jump steps plus the predictor applied at each of them.
#[derive(Debug, Clone)]
pub struct JumpPlan {
    pub steps: Vec<u64>,
    pub predictor: Predictor,
    pub options: JumpOptions,
    pub reset_optimizer: bool,
}

impl JumpPlan {
    pub fn validate(&self, total_steps: u64, t_min: u64) -> Result<()> {
        self.predictor.validate()?;
        if self.steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("jumps.steps", "must be strictly increasing"));
        }
        if let Some(&first) = self.steps.first() {
            if first < t_min.max(3) {
                return Err(Error::config("jumps.steps", format!("first jump {first} is below {}", t_min.max(3))));
            }
        }
        if self.steps.last().is_some_and(|&s| s >= total_steps) {
            return Err(Error::config("jumps.steps", "jump steps must be < total steps"));
        }
        if !(self.options.clamp_factor > 0.0) {
            return Err(Error::config("jumps.clamp_factor", "must be > 0"));
        }
        Ok(())
    }

    pub fn is_jump(&self, step: u64) -> bool {
        self.steps.binary_search(&step).is_ok()
    }
}
