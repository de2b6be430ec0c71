//! Forward and backward passes with hand-written gradients.
//!
//! Activations are NHWC, batch-major. Dense and convolution layers are
//! lowered to GEMM (convolutions through an im2col buffer that is kept in the
//! forward state for the backward pass).

use std::sync::Arc;

use rand::Rng as _;

use super::params::{fingerprint, ParamLayout, Params, TensorRole};
use super::real::Real;
use super::spec::{window_axis, LayerSpec, NetworkSpec, Padding, Shape};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Supervision for the loss head.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a, T> {
    Classes(&'a [u32]),
    Values(&'a [T]),
}

#[derive(Debug, Clone)]
enum Cache<T> {
    None,
    Cols(Vec<T>),
    Argmax(Vec<u32>),
    Mask(Vec<T>),
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardState<T> {
    acts: Vec<Vec<T>>,
    caches: Vec<Cache<T>>,
    batch: usize,
    mode: Mode,
    params_fingerprint: u64,
    params_len: usize,
}

impl<T: Real> ForwardState<T> {
    /// Output of the last layer before the loss head, `batch × outputs`.
    pub fn logits(&self) -> &[T] {
        self.acts.last().expect("input activation always present")
    }

    /// `activations()[0]` is the input; entry `i + 1` is the output of layer `i`.
    pub fn activations(&self) -> &[Vec<T>] {
        &self.acts
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// A validated network spec with its precomputed shapes and parameter layout.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<Shape>,
    layout: Arc<ParamLayout>,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let shapes = spec.shapes()?;
        let layout = Arc::new(ParamLayout::from_spec(&spec));
        Ok(Network { spec, shapes, layout })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn input_size(&self) -> usize {
        self.spec.input_shape.size()
    }

    pub fn num_outputs(&self) -> usize {
        self.shapes.last().map(Shape::size).unwrap_or(0)
    }

    fn head(&self) -> &LayerSpec {
        self.spec.layers.last().expect("validated spec has a head")
    }

    fn check_params<T: Real>(&self, params: &Params<T>) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::Shape(format!(
                "params have {} scalars, network needs {}",
                params.len(),
                self.layout.len()
            )));
        }
        Ok(())
    }

    /// Runs the network on `batch` examples packed in `inputs`. `seed` only
    /// drives dropout masks in train mode.
    pub fn forward<T: Real>(
        &self,
        params: &Params<T>,
        inputs: &[T],
        batch: usize,
        mode: Mode,
        seed: u64,
    ) -> Result<ForwardState<T>> {
        self.check_params(params)?;
        if batch == 0 || inputs.len() != batch * self.input_size() {
            return Err(Error::Shape(format!(
                "input has {} values, expected {batch} x {}",
                inputs.len(),
                self.input_size()
            )));
        }
        let n_layers = self.spec.layers.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        let mut caches = Vec::with_capacity(n_layers);
        acts.push(inputs.to_vec());
        for i in 0..n_layers {
            let x = &acts[i];
            let (inp, out) = (self.shapes[i], self.shapes[i + 1]);
            let (y, cache) = match self.spec.layers[i] {
                LayerSpec::Dense { inputs: n_in, outputs: n_out } => {
                    let w = params.tensor(i, TensorRole::Weight).expect("dense weight");
                    let b = params.tensor(i, TensorRole::Bias).expect("dense bias");
                    let mut y = vec![T::zero(); batch * n_out];
                    T::gemm(batch, n_in, n_out, T::one(), (x, n_in as isize, 1), (w, n_out as isize, 1), T::zero(), (&mut y, n_out as isize, 1));
                    add_bias(&mut y, b);
                    (y, Cache::None)
                }
                LayerSpec::Conv2d { kh, kw, cout, stride, padding, .. } => {
                    let w = params.tensor(i, TensorRole::Weight).expect("conv weight");
                    let b = params.tensor(i, TensorRole::Bias).expect("conv bias");
                    let geo = ConvGeometry::new(inp, out, kh, kw, stride, padding);
                    let cols = geo.im2col(x, batch);
                    let rows = batch * out.h * out.w;
                    let k = geo.patch_len();
                    let mut y = vec![T::zero(); rows * cout];
                    T::gemm(rows, k, cout, T::one(), (&cols, k as isize, 1), (w, cout as isize, 1), T::zero(), (&mut y, cout as isize, 1));
                    add_bias(&mut y, b);
                    (y, Cache::Cols(cols))
                }
                LayerSpec::MaxPool { size, stride, padding } => {
                    let (y, argmax) = max_pool(x, batch, inp, out, size, stride, padding);
                    (y, Cache::Argmax(argmax))
                }
                LayerSpec::Relu => (x.iter().map(|&v| v.max(T::zero())).collect(), Cache::None),
                LayerSpec::Dropout { rate } => {
                    if mode == Mode::Eval || rate == 0.0 {
                        (x.clone(), Cache::None)
                    } else {
                        let mut rng = rng::keyed(Domain::Dropout, seed, i as u64, 0);
                        let keep_scale = T::lit(1.0 / (1.0 - rate as f64));
                        let mask: Vec<T> = (0..x.len())
                            .map(|_| if rng.gen::<f32>() < rate { T::zero() } else { keep_scale })
                            .collect();
                        let y = x.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                        (y, Cache::Mask(mask))
                    }
                }
                LayerSpec::SoftmaxXent | LayerSpec::L1Loss => unreachable!("head is excluded"),
            };
            acts.push(y);
            caches.push(cache);
        }
        Ok(ForwardState {
            acts,
            caches,
            batch,
            mode,
            params_fingerprint: params.fingerprint(),
            params_len: params.len(),
        })
    }

    /// Mean loss of the head and its gradient with respect to the logits.
    pub fn head_loss<T: Real>(&self, state: &ForwardState<T>, targets: Targets<'_, T>) -> Result<(T, Vec<T>)> {
        let logits = state.logits();
        let b = state.batch;
        let n = self.num_outputs();
        match (self.head(), targets) {
            (LayerSpec::SoftmaxXent, Targets::Classes(labels)) => {
                if labels.len() != b {
                    return Err(Error::Shape(format!("{} labels for batch of {b}", labels.len())));
                }
                let inv_b = T::one() / T::lit(b as f64);
                let mut grad = vec![T::zero(); b * n];
                let mut total = T::zero();
                for (r, &label) in labels.iter().enumerate() {
                    let label = label as usize;
                    if label >= n {
                        return Err(Error::Shape(format!("label {label} outside [0, {n})")));
                    }
                    let z = &logits[r * n..(r + 1) * n];
                    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
                    let sum: T = z.iter().map(|&v| (v - max).exp()).sum();
                    let lse = max + sum.ln();
                    total = total + (lse - z[label]);
                    let g = &mut grad[r * n..(r + 1) * n];
                    for (gj, &zj) in g.iter_mut().zip(z) {
                        *gj = (zj - lse).exp() * inv_b;
                    }
                    g[label] = g[label] - inv_b;
                }
                Ok((total * inv_b, grad))
            }
            (LayerSpec::L1Loss, Targets::Values(values)) => {
                if values.len() != logits.len() {
                    return Err(Error::Shape(format!("{} targets for {} outputs", values.len(), logits.len())));
                }
                let inv = T::one() / T::lit(logits.len() as f64);
                let mut total = T::zero();
                let grad = logits
                    .iter()
                    .zip(values)
                    .map(|(&p, &y)| {
                        let d = p - y;
                        total = total + d.abs();
                        if d > T::zero() {
                            inv
                        } else if d < T::zero() {
                            -inv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                Ok((total * inv, grad))
            }
            (head, _) => Err(Error::Shape(format!("targets do not match head {head:?}"))),
        }
    }

    /// Gradient of the mean loss with respect to every parameter, in the
    /// parameter layout, plus the loss itself.
    pub fn backward<T: Real>(
        &self,
        params: &Params<T>,
        state: &ForwardState<T>,
        targets: Targets<'_, T>,
    ) -> Result<(Params<T>, T)> {
        if state.params_len != params.len() || state.params_fingerprint != fingerprint(params.values()) {
            return Err(Error::State("params changed since the forward pass".into()));
        }
        if state.acts.len() != self.spec.layers.len() {
            return Err(Error::State("forward state belongs to a different network".into()));
        }
        let (loss, mut dy) = self.head_loss(state, targets)?;
        let batch = state.batch;
        let mut grad = Params::zeros(Arc::clone(&self.layout));
        for i in (0..self.spec.layers.len() - 1).rev() {
            let x = &state.acts[i];
            let (inp, out) = (self.shapes[i], self.shapes[i + 1]);
            let need_dx = i > 0;
            let dx = match self.spec.layers[i] {
                LayerSpec::Dense { inputs: n_in, outputs: n_out } => {
                    {
                        let dw = grad.tensor_mut(i, TensorRole::Weight).expect("dense weight");
                        T::gemm(n_in, batch, n_out, T::one(), (x, 1, n_in as isize), (&dy, n_out as isize, 1), T::zero(), (dw, n_out as isize, 1));
                    }
                    column_sums(&dy, grad.tensor_mut(i, TensorRole::Bias).expect("dense bias"));
                    if need_dx {
                        let w = params.tensor(i, TensorRole::Weight).expect("dense weight");
                        let mut dx = vec![T::zero(); batch * n_in];
                        T::gemm(batch, n_out, n_in, T::one(), (&dy, n_out as isize, 1), (w, 1, n_out as isize), T::zero(), (&mut dx, n_in as isize, 1));
                        dx
                    } else {
                        Vec::new()
                    }
                }
                LayerSpec::Conv2d { kh, kw, cout, stride, padding, .. } => {
                    let Cache::Cols(cols) = &state.caches[i] else {
                        return Err(Error::State(format!("missing im2col cache for layer {i}")));
                    };
                    let geo = ConvGeometry::new(inp, out, kh, kw, stride, padding);
                    let rows = batch * out.h * out.w;
                    let k = geo.patch_len();
                    {
                        let dw = grad.tensor_mut(i, TensorRole::Weight).expect("conv weight");
                        T::gemm(k, rows, cout, T::one(), (cols, 1, k as isize), (&dy, cout as isize, 1), T::zero(), (dw, cout as isize, 1));
                    }
                    column_sums(&dy, grad.tensor_mut(i, TensorRole::Bias).expect("conv bias"));
                    if need_dx {
                        let w = params.tensor(i, TensorRole::Weight).expect("conv weight");
                        let mut dcols = vec![T::zero(); rows * k];
                        T::gemm(rows, cout, k, T::one(), (&dy, cout as isize, 1), (w, 1, cout as isize), T::zero(), (&mut dcols, k as isize, 1));
                        geo.col2im(&dcols, batch)
                    } else {
                        Vec::new()
                    }
                }
                LayerSpec::MaxPool { .. } => {
                    let Cache::Argmax(argmax) = &state.caches[i] else {
                        return Err(Error::State(format!("missing argmax cache for layer {i}")));
                    };
                    let mut dx = vec![T::zero(); x.len()];
                    for (&src, &g) in argmax.iter().zip(&dy) {
                        dx[src as usize] = dx[src as usize] + g;
                    }
                    dx
                }
                LayerSpec::Relu => x
                    .iter()
                    .zip(&dy)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
                LayerSpec::Dropout { .. } => match &state.caches[i] {
                    Cache::Mask(mask) => dy.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                    _ => dy.clone(),
                },
                LayerSpec::SoftmaxXent | LayerSpec::L1Loss => unreachable!("head is excluded"),
            };
            dy = dx;
        }
        Ok((grad, loss))
    }

    /// Forward in eval mode and return the head loss only.
    pub fn loss<T: Real>(&self, params: &Params<T>, inputs: &[T], batch: usize, targets: Targets<'_, T>, mode: Mode, seed: u64) -> Result<T> {
        let state = self.forward(params, inputs, batch, mode, seed)?;
        Ok(self.head_loss(&state, targets)?.0)
    }

    /// Argmax class per example (first maximum wins).
    pub fn predict(&self, params: &Params, inputs: &[f32], batch: usize) -> Result<Vec<u32>> {
        let state = self.forward(params, inputs, batch, Mode::Eval, 0)?;
        let n = self.num_outputs();
        Ok(state
            .logits()
            .chunks(n)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best as u32
            })
            .collect())
    }
}

fn add_bias<T: Real>(y: &mut [T], b: &[T]) {
    for row in y.chunks_mut(b.len()) {
        for (v, &bias) in row.iter_mut().zip(b) {
            *v = *v + bias;
        }
    }
}

fn column_sums<T: Real>(dy: &[T], out: &mut [T]) {
    out.fill(T::zero());
    for row in dy.chunks(out.len()) {
        for (o, &g) in out.iter_mut().zip(row) {
            *o = *o + g;
        }
    }
}

struct ConvGeometry {
    inp: Shape,
    out: Shape,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_y: usize,
    pad_x: usize,
}

impl ConvGeometry {
    fn new(inp: Shape, out: Shape, kh: usize, kw: usize, stride: usize, padding: Padding) -> Self {
        let ay = window_axis(inp.h, kh, stride, padding).expect("validated");
        let ax = window_axis(inp.w, kw, stride, padding).expect("validated");
        ConvGeometry { inp, out, kh, kw, stride, pad_y: ay.pad, pad_x: ax.pad }
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.inp.c
    }

    /// Calls `f(row, col_offset, input_offset)` for each in-bounds kernel tap.
    fn for_each_tap(&self, batch: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (ih, iw, c) = (self.inp.h as isize, self.inp.w as isize, self.inp.c);
        let mut row = 0;
        for b in 0..batch {
            let base = b * self.inp.size();
            for oy in 0..self.out.h {
                for ox in 0..self.out.w {
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad_y as isize;
                        if iy < 0 || iy >= ih {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad_x as isize;
                            if ix < 0 || ix >= iw {
                                continue;
                            }
                            let src = base + (iy as usize * self.inp.w + ix as usize) * c;
                            f(row, (ky * self.kw + kx) * c, src);
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x: &[T], batch: usize) -> Vec<T> {
        let k = self.patch_len();
        let c = self.inp.c;
        let mut cols = vec![T::zero(); batch * self.out.h * self.out.w * k];
        self.for_each_tap(batch, |row, off, src| {
            cols[row * k + off..row * k + off + c].copy_from_slice(&x[src..src + c]);
        });
        cols
    }

    fn col2im<T: Real>(&self, dcols: &[T], batch: usize) -> Vec<T> {
        let k = self.patch_len();
        let c = self.inp.c;
        let mut dx = vec![T::zero(); batch * self.inp.size()];
        self.for_each_tap(batch, |row, off, src| {
            let from = &dcols[row * k + off..row * k + off + c];
            for (d, &g) in dx[src..src + c].iter_mut().zip(from) {
                *d = *d + g;
            }
        });
        dx
    }
}

fn max_pool<T: Real>(
    x: &[T],
    batch: usize,
    inp: Shape,
    out: Shape,
    size: usize,
    stride: usize,
    padding: Padding,
) -> (Vec<T>, Vec<u32>) {
    let pad_y = window_axis(inp.h, size, stride, padding).expect("validated").pad as isize;
    let pad_x = window_axis(inp.w, size, stride, padding).expect("validated").pad as isize;
    let c = inp.c;
    let mut y = vec![T::zero(); batch * out.size()];
    let mut argmax = vec![0u32; batch * out.size()];
    let mut o = 0;
    for b in 0..batch {
        let base = b * inp.size();
        for oy in 0..out.h {
            for ox in 0..out.w {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_at = usize::MAX;
                    for ky in 0..size {
                        let iy = (oy * stride + ky) as isize - pad_y;
                        if iy < 0 || iy >= inp.h as isize {
                            continue;
                        }
                        for kx in 0..size {
                            let ix = (ox * stride + kx) as isize - pad_x;
                            if ix < 0 || ix >= inp.w as isize {
                                continue;
                            }
                            let src = base + (iy as usize * inp.w + ix as usize) * c + ch;
                            if best_at == usize::MAX || x[src] > best {
                                best = x[src];
                                best_at = src;
                            }
                        }
                    }
                    y[o] = best;
                    argmax[o] = best_at as u32;
                    o += 1;
                }
            }
        }
    }
    (y, argmax)
}
