//! Flat trainable-parameter vectors and their per-scalar index map.
//!
//! Layout: parameterized layers in order, each contributing its weight tensor
//! followed by its bias vector. Dense weights are `[in, out]`, convolution
//! weights `[kh, kw, cin, cout]`, both row-major.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::real::Real;
use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Weight,
    Bias,
}

impl fmt::Display for TensorRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorRole::Weight => f.write_str("weight"),
            TensorRole::Bias => f.write_str("bias"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlot {
    pub layer: usize,
    pub role: TensorRole,
    pub dims: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Identity of one trainable scalar.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParamIndex {
    pub layer: usize,
    pub role: TensorRole,
    pub index: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    slots: Vec<TensorSlot>,
    len: usize,
}

impl ParamLayout {
    pub fn from_spec(spec: &NetworkSpec) -> Self {
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut push = |layer, role, dims: Vec<usize>| {
            let len = dims.iter().product();
            slots.push(TensorSlot { layer, role, dims, offset, len });
            offset += len;
        };
        for (i, layer) in spec.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    push(i, TensorRole::Weight, vec![inputs, outputs]);
                    push(i, TensorRole::Bias, vec![outputs]);
                }
                LayerSpec::Conv2d { kh, kw, cin, cout, .. } => {
                    push(i, TensorRole::Weight, vec![kh, kw, cin, cout]);
                    push(i, TensorRole::Bias, vec![cout]);
                }
                _ => {}
            }
        }
        ParamLayout { slots, len: offset }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slots(&self) -> &[TensorSlot] {
        &self.slots
    }

    pub fn slot(&self, layer: usize, role: TensorRole) -> Option<&TensorSlot> {
        self.slots.iter().find(|s| s.layer == layer && s.role == role)
    }

    fn slot_of(&self, flat: usize) -> Result<&TensorSlot> {
        if flat >= self.len {
            return Err(Error::Index { index: flat, len: self.len });
        }
        let pos = self.slots.partition_point(|s| s.offset + s.len <= flat);
        Ok(&self.slots[pos])
    }

    pub fn role_of(&self, flat: usize) -> Result<TensorRole> {
        Ok(self.slot_of(flat)?.role)
    }

    /// Flat offset to `(layer, role, multi-index)`.
    pub fn view(&self, flat: usize) -> Result<ParamIndex> {
        let slot = self.slot_of(flat)?;
        let mut rem = flat - slot.offset;
        let mut index = vec![0; slot.dims.len()];
        for (d, &extent) in slot.dims.iter().enumerate().rev() {
            index[d] = rem % extent;
            rem /= extent;
        }
        Ok(ParamIndex { layer: slot.layer, role: slot.role, index })
    }

    /// Inverse of [`ParamLayout::view`].
    pub fn flat_index(&self, idx: &ParamIndex) -> Result<usize> {
        let slot = self
            .slot(idx.layer, idx.role)
            .ok_or_else(|| Error::Shape(format!("layer {} has no {} tensor", idx.layer, idx.role)))?;
        if idx.index.len() != slot.dims.len() {
            return Err(Error::Shape(format!(
                "expected {} indices, got {}",
                slot.dims.len(),
                idx.index.len()
            )));
        }
        let mut flat = 0;
        for (&i, &extent) in idx.index.iter().zip(&slot.dims) {
            if i >= extent {
                return Err(Error::Index { index: i, len: extent });
            }
            flat = flat * extent + i;
        }
        Ok(slot.offset + flat)
    }

    /// Mask that is `true` for bias scalars.
    pub fn bias_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len];
        for s in self.slots.iter().filter(|s| s.role == TensorRole::Bias) {
            mask[s.offset..s.offset + s.len].fill(true);
        }
        mask
    }
}

/// Trainable scalars of one network together with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T = f32> {
    values: Vec<T>,
    layout: Arc<ParamLayout>,
}

impl<T: Real> Params<T> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        Params { values: vec![T::zero(); layout.len()], layout }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<T>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "parameter vector has {} scalars, layout needs {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Params { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn tensor(&self, layer: usize, role: TensorRole) -> Option<&[T]> {
        self.layout.slot(layer, role).map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn tensor_mut(&mut self, layer: usize, role: TensorRole) -> Option<&mut [T]> {
        let slot = self.layout.slot(layer, role)?.clone();
        Some(&mut self.values[slot.offset..slot.offset + slot.len])
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
            layout: Arc::clone(&self.layout),
        }
    }

    /// Order-sensitive digest of the exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        fingerprint(&self.values)
    }
}

pub(crate) fn fingerprint<T: Real>(values: &[T]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        h ^= v.as_f64().to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ values.len() as u64
}

/// Flat offset to `(layer, role, multi-index)`.
pub fn param_view<T: Real>(params: &Params<T>, flat: usize) -> Result<ParamIndex> {
    params.layout.view(flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::Shape;

    fn dense32() -> NetworkSpec {
        NetworkSpec {
            input_shape: Shape::flat(3),
            layers: vec![LayerSpec::Dense { inputs: 3, outputs: 2 }, LayerSpec::SoftmaxXent],
        }
    }

    #[test]
    fn first_and_last_index() {
        let layout = ParamLayout::from_spec(&dense32());
        assert_eq!(layout.len(), 8);
        let first = layout.view(0).unwrap();
        assert_eq!(first, ParamIndex { layer: 0, role: TensorRole::Weight, index: vec![0, 0] });
        let last = layout.view(7).unwrap();
        assert_eq!(last, ParamIndex { layer: 0, role: TensorRole::Bias, index: vec![1] });
    }

    #[test]
    fn round_trip_all_indices() {
        let layout = ParamLayout::from_spec(&dense32());
        for i in 0..layout.len() {
            let v = layout.view(i).unwrap();
            assert_eq!(layout.flat_index(&v).unwrap(), i);
        }
    }

    #[test]
    fn bijection_on_conv_net() {
        let spec = crate::config::presets::n0_spec();
        let layout = ParamLayout::from_spec(&spec);
        assert_eq!(layout.len(), spec.param_count());
        let mut seen = std::collections::HashSet::new();
        for i in (0..layout.len()).step_by(97).chain([layout.len() - 1]) {
            let v = layout.view(i).unwrap();
            assert_eq!(layout.flat_index(&v).unwrap(), i);
            assert!(seen.insert(v));
        }
    }

    #[test]
    fn out_of_range_is_index_error() {
        let layout = ParamLayout::from_spec(&dense32());
        assert!(matches!(layout.view(8), Err(Error::Index { index: 8, len: 8 })));
        let bad = ParamIndex { layer: 0, role: TensorRole::Bias, index: vec![2] };
        assert!(matches!(layout.flat_index(&bad), Err(Error::Index { .. })));
    }
}
