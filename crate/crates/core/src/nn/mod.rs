//! Minimal feed-forward network engine with exact backpropagation.

mod init;
mod network;
mod params;
mod real;
mod spec;

pub use init::{init_params, InitRule};
pub use network::{ForwardState, Mode, Network, Targets};
pub use params::{param_view, ParamIndex, ParamLayout, Params, TensorRole, TensorSlot};
pub use real::Real;
pub use spec::{window_axis, Axis, LayerSpec, NetworkSpec, Padding, Shape};

use crate::data::Batch;
use crate::error::Result;

/// Forward pass over a data batch.
pub fn forward(spec: &NetworkSpec, params: &Params, batch: &Batch, mode: Mode, seed: u64) -> Result<ForwardState<f32>> {
    Network::new(spec.clone())?.forward(params, &batch.inputs, batch.len(), mode, seed)
}

/// Gradient and mean cross-entropy for the batch the forward state was built from.
pub fn backward(spec: &NetworkSpec, params: &Params, batch: &Batch, state: &ForwardState<f32>) -> Result<(Params, f32)> {
    Network::new(spec.clone())?.backward(params, state, Targets::Classes(&batch.labels))
}
