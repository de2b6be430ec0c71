use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::params::{ParamLayout, Params, TensorRole};
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum InitRule {
    Normal { mean: f64, std: f64 },
    /// Normal draws outside `mean ± 2·std` are rejected and redrawn.
    TruncatedNormal { mean: f64, std: f64 },
    /// Glorot uniform `±sqrt(6 / (fan_in + fan_out))` for weights, zero biases.
    Xavier,
    Constant { value: f64 },
}

/// Initializes every trainable scalar of `spec`. Scalars are drawn in flat
/// order from a single stream, so the result depends only on the arguments.
pub fn init_params(spec: &NetworkSpec, init: InitRule, seed: u64) -> Result<Params> {
    spec.validate()?;
    let layout = Arc::new(ParamLayout::from_spec(spec));
    let mut params = Params::zeros(Arc::clone(&layout));
    let mut rng = rng::keyed(Domain::Init, seed, 0, 0);
    match init {
        InitRule::Constant { value } => params.values_mut().fill(value as f32),
        InitRule::Normal { mean, std } => {
            let dist = normal(mean, std)?;
            for v in params.values_mut() {
                *v = dist.sample(&mut rng) as f32;
            }
        }
        InitRule::TruncatedNormal { mean, std } => {
            let dist = normal(mean, std)?;
            for v in params.values_mut() {
                *v = loop {
                    let x = dist.sample(&mut rng);
                    if (x - mean).abs() <= 2.0 * std {
                        break x as f32;
                    }
                };
            }
        }
        InitRule::Xavier => {
            for slot in layout.slots().iter().filter(|s| s.role == TensorRole::Weight) {
                let (fan_in, fan_out) = fans(&slot.dims);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                for v in &mut params.values_mut()[slot.offset..slot.offset + slot.len] {
                    *v = rng.sample(dist) as f32;
                }
            }
        }
    }
    Ok(params)
}

fn normal(mean: f64, std: f64) -> Result<Normal<f64>> {
    if !(std >= 0.0) || !mean.is_finite() {
        return Err(Error::config("init", format!("invalid normal({mean}, {std})")));
    }
    Normal::new(mean, std).map_err(|e| Error::config("init", e.to_string()))
}

fn fans(dims: &[usize]) -> (usize, usize) {
    match dims {
        [fan_in, fan_out] => (*fan_in, *fan_out),
        [kh, kw, cin, cout] => (kh * kw * cin, kh * kw * cout),
        _ => (1, 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::{LayerSpec, Shape};

    fn dense(i: usize, o: usize) -> NetworkSpec {
        NetworkSpec {
            input_shape: Shape::flat(i),
            layers: vec![LayerSpec::Dense { inputs: i, outputs: o }, LayerSpec::SoftmaxXent],
        }
    }

    #[test]
    fn constant_zero() {
        let p = init_params(&dense(2, 2), InitRule::Constant { value: 0.0 }, 7).unwrap();
        assert_eq!(p.values(), &[0.0; 6]);
    }

    #[test]
    fn truncated_normal_std_in_band_and_clipped() {
        let spec = dense(200, 100);
        let p = init_params(&spec, InitRule::TruncatedNormal { mean: 0.0, std: 0.01 }, 3).unwrap();
        let n = p.len() as f64;
        assert!(n >= 1e4);
        let mean = p.values().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = p.values().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((0.007..=0.013).contains(&std), "std {std}");
        assert!(p.values().iter().all(|v| v.abs() <= 0.02 + 1e-7));
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = dense(10, 10);
        let rule = InitRule::Normal { mean: 0.0, std: 1.0 };
        let a = init_params(&spec, rule, 11).unwrap();
        let b = init_params(&spec, rule, 11).unwrap();
        let c = init_params(&spec, rule, 12).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn xavier_bounds_and_zero_bias() {
        let p = init_params(&dense(30, 20), InitRule::Xavier, 1).unwrap();
        let limit = (6.0f64 / 50.0).sqrt() as f32;
        let w = p.tensor(0, TensorRole::Weight).unwrap();
        assert!(w.iter().all(|v| v.abs() <= limit));
        assert!(p.tensor(0, TensorRole::Bias).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn incompatible_spec_is_rejected() {
        let spec = NetworkSpec {
            input_shape: Shape::flat(3),
            layers: vec![LayerSpec::Dense { inputs: 4, outputs: 2 }, LayerSpec::SoftmaxXent],
        };
        assert!(matches!(init_params(&spec, InitRule::Xavier, 0), Err(Error::Spec(_))));
    }
}
