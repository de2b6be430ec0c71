//! Oracles shared by the integration and acceptance targets.
#![allow(dead_code)]

use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use weightcast::nn::{window_axis, LayerSpec, Mode, Network, NetworkSpec, Padding, ParamLayout, Params, Shape, Targets, TensorRole};

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;
/// Pre-activations and pool gaps closer than this to a kink reject the instance.
const KINK_MARGIN: f64 = 0.02;
/// Denominator floor for relative error on near-zero gradients.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv2d,
    MaxPool,
    Relu,
    DropoutEval,
    DropoutTrain,
    SoftmaxXent,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Dense,
        LayerKind::Conv2d,
        LayerKind::MaxPool,
        LayerKind::Relu,
        LayerKind::DropoutEval,
        LayerKind::DropoutTrain,
        LayerKind::SoftmaxXent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Relu => "relu",
            LayerKind::DropoutEval => "dropout-eval",
            LayerKind::DropoutTrain => "dropout-train",
            LayerKind::SoftmaxXent => "softmax-xent",
        }
    }
}

pub struct Instance {
    pub spec: NetworkSpec,
    pub mode: Mode,
    pub inputs: Vec<f64>,
    pub labels: Vec<u32>,
    pub batch: usize,
    pub params: Params<f64>,
}

fn padding(rng: &mut ChaCha8Rng) -> Padding {
    if rng.gen_bool(0.5) {
        Padding::Same
    } else {
        Padding::Valid
    }
}

/// A small random network exercising `kind`, followed by a dense layer and
/// a softmax head where needed.
pub fn instance(kind: LayerKind, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let classes = rng.gen_range(2..=4);
    let batch = rng.gen_range(1..=3);
    let (input_shape, mut layers, mode) = match kind {
        LayerKind::Dense | LayerKind::SoftmaxXent => {
            let n = rng.gen_range(2..=6);
            let mut layers = Vec::new();
            if kind == LayerKind::Dense {
                let h = rng.gen_range(2..=5);
                layers.push(LayerSpec::Dense { inputs: n, outputs: h });
                layers.push(LayerSpec::Dense { inputs: h, outputs: classes });
            } else {
                layers.push(LayerSpec::Dense { inputs: n, outputs: classes });
            }
            (Shape::flat(n), layers, Mode::Train)
        }
        LayerKind::Relu | LayerKind::DropoutEval | LayerKind::DropoutTrain => {
            let n = rng.gen_range(2..=6);
            let h = rng.gen_range(2..=6);
            let mid = match kind {
                LayerKind::Relu => LayerSpec::Relu,
                _ => LayerSpec::Dropout { rate: 0.3 },
            };
            let mode = if kind == LayerKind::DropoutEval { Mode::Eval } else { Mode::Train };
            (Shape::flat(n), vec![LayerSpec::Dense { inputs: n, outputs: h }, mid], mode)
        }
        LayerKind::Conv2d => {
            let shape = Shape::new(rng.gen_range(3..=6), rng.gen_range(3..=6), rng.gen_range(1..=2));
            let k = rng.gen_range(1..=3);
            let layer = LayerSpec::Conv2d {
                kh: k,
                kw: rng.gen_range(1..=3),
                cin: shape.c,
                cout: rng.gen_range(1..=3),
                stride: rng.gen_range(1..=2),
                padding: padding(&mut rng),
            };
            (shape, vec![layer], Mode::Train)
        }
        LayerKind::MaxPool => {
            let shape = Shape::new(rng.gen_range(3..=6), rng.gen_range(3..=6), 1);
            let conv = LayerSpec::Conv2d { kh: 2, kw: 2, cin: 1, cout: rng.gen_range(1..=2), stride: 1, padding: Padding::Same };
            let size = rng.gen_range(2..=3);
            let pool = LayerSpec::MaxPool { size, stride: rng.gen_range(1..=size), padding: padding(&mut rng) };
            (shape, vec![conv, pool], Mode::Train)
        }
    };
    if kind != LayerKind::Dense && kind != LayerKind::SoftmaxXent {
        let probe = NetworkSpec { input_shape, layers: layers.iter().cloned().chain([LayerSpec::L1Loss]).collect() };
        let flat = probe.shapes().expect("valid probe")[layers.len()].size();
        layers.push(LayerSpec::Dense { inputs: flat, outputs: classes });
    }
    layers.push(LayerSpec::SoftmaxXent);
    let spec = NetworkSpec { input_shape, layers };
    spec.validate().expect("random instance is valid");
    let layout = Arc::new(ParamLayout::from_spec(&spec));
    // Fan-in scaled weights keep the softmax away from saturation, where tiny
    // gradients make the h^2 truncation of central differences dominate.
    let mut values = vec![0.0; layout.len()];
    for slot in layout.slots() {
        let std = match slot.role {
            TensorRole::Weight => (slot.dims.last().copied().unwrap_or(1) as f64 / slot.len as f64).sqrt(),
            TensorRole::Bias => 0.1,
        };
        for v in &mut values[slot.offset..slot.offset + slot.len] {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let params = Params::from_values(layout, values).expect("layout sized");
    let inputs = (0..batch * input_shape.size()).map(|_| rng.sample(StandardNormal)).collect();
    let labels = (0..batch).map(|_| rng.gen_range(0..classes as u32)).collect();
    Instance { spec, mode, inputs, labels, batch, params }
}

/// Smallest distance of any relu input from zero or any pooling window's
/// top two candidates from each other.
fn kink_distance(net: &Network, inst: &Instance) -> f64 {
    let state = net.forward(&inst.params, &inst.inputs, inst.batch, inst.mode, 7).expect("forward");
    let shapes = inst.spec.shapes().expect("shapes");
    let mut best = f64::INFINITY;
    for (i, layer) in inst.spec.layers.iter().enumerate() {
        let x = &state.activations()[i];
        match *layer {
            LayerSpec::Relu => {
                for v in x {
                    best = best.min(v.abs());
                }
            }
            LayerSpec::MaxPool { size, stride, padding } => {
                let s = shapes[i];
                let ay = window_axis(s.h, size, stride, padding).expect("axis");
                let ax = window_axis(s.w, size, stride, padding).expect("axis");
                for b in 0..inst.batch {
                    for oy in 0..ay.out {
                        for ox in 0..ax.out {
                            for c in 0..s.c {
                                let mut vals = Vec::new();
                                for dy in 0..size {
                                    for dx in 0..size {
                                        let y = (oy * stride + dy) as isize - ay.pad as isize;
                                        let xx = (ox * stride + dx) as isize - ax.pad as isize;
                                        if y >= 0 && xx >= 0 && (y as usize) < s.h && (xx as usize) < s.w {
                                            vals.push(x[((b * s.h + y as usize) * s.w + xx as usize) * s.c + c]);
                                        }
                                    }
                                }
                                vals.sort_by(|a, b| b.total_cmp(a));
                                if vals.len() > 1 {
                                    best = best.min(vals[0] - vals[1]);
                                }
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    best
}

/// Largest per-coordinate relative error between backprop and central
/// differences, or `None` when the instance sits too close to a kink.
pub fn max_relative_error(inst: &Instance) -> Option<f64> {
    max_relative_error_with(inst, FD_STEP)
}

pub fn max_relative_error_with(inst: &Instance, h: f64) -> Option<f64> {
    let net = Network::new(inst.spec.clone()).expect("network");
    if kink_distance(&net, inst) < KINK_MARGIN {
        return None;
    }
    let seed = 7;
    let targets = || Targets::Classes(&inst.labels);
    let state = net.forward(&inst.params, &inst.inputs, inst.batch, inst.mode, seed).expect("forward");
    let (grad, _) = net.backward(&inst.params, &state, targets()).expect("backward");
    let mut p = inst.params.clone();
    let mut worst = 0.0f64;
    for j in 0..p.len() {
        let orig = p.values()[j];
        p.values_mut()[j] = orig + h;
        let up = net.loss(&p, &inst.inputs, inst.batch, targets(), inst.mode, seed).expect("loss");
        p.values_mut()[j] = orig - h;
        let down = net.loss(&p, &inst.inputs, inst.batch, targets(), inst.mode, seed).expect("loss");
        p.values_mut()[j] = orig;
        let fd = (up - down) / (2.0 * h);
        let g = grad.values()[j];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(REL_FLOOR);
        worst = worst.max(rel);
    }
    Some(worst)
}

pub struct GradSummary {
    pub kind: LayerKind,
    pub instances: usize,
    pub rejected: usize,
    pub worst: f64,
}

/// Checks `count` accepted instances of `kind`, drawing seeds from `first_seed`.
pub fn grad_check(kind: LayerKind, count: usize, first_seed: u64) -> GradSummary {
    let (mut instances, mut rejected, mut worst) = (0, 0, 0.0f64);
    let mut seed = first_seed;
    while instances < count {
        match max_relative_error(&instance(kind, seed)) {
            Some(e) => {
                instances += 1;
                worst = worst.max(e);
            }
            None => rejected += 1,
        }
        seed += 1;
        assert!(rejected < 20 * count, "{}: too many instances near kinks", kind.name());
    }
    GradSummary { kind, instances, rejected, worst }
}

pub fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

pub fn to_f64(x: &BigRational) -> f64 {
    x.to_f64().expect("representable")
}

/// Least-squares polynomial of `degree` through `points`, evaluated at
/// `target`, entirely in rational arithmetic.
pub fn rational_fit(points: &[(f64, f64)], degree: usize, target: f64) -> BigRational {
    let n = degree + 1;
    let s: Vec<BigRational> = points.iter().map(|p| rational(p.0)).collect();
    let y: Vec<BigRational> = points.iter().map(|p| rational(p.1)).collect();
    let pow = |x: &BigRational, k: usize| (0..k).fold(BigRational::from_integer(BigInt::from(1)), |acc, _| acc * x);
    let mut a = vec![vec![BigRational::zero(); n + 1]; n];
    for r in 0..n {
        for c in 0..n {
            a[r][c] = s.iter().map(|x| pow(x, r + c)).fold(BigRational::zero(), |acc, v| acc + v);
        }
        a[r][n] = s.iter().zip(&y).map(|(x, v)| pow(x, r) * v).fold(BigRational::zero(), |acc, v| acc + v);
    }
    for col in 0..n {
        let piv = (col..n).find(|&r| !a[r][col].is_zero()).expect("nonsingular");
        a.swap(col, piv);
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col].clone() / a[col][col].clone();
                for c in col..=n {
                    let d = f.clone() * a[col][c].clone();
                    a[r][c] -= d;
                }
            }
        }
    }
    let t = rational(target);
    (0..n).map(|k| a[k][n].clone() / a[k][k].clone() * pow(&t, k)).fold(BigRational::zero(), |acc, v| acc + v)
}

pub fn abs_diff(value: f64, exact: &BigRational) -> f64 {
    to_f64(&(rational(value) - exact).abs())
}
