//! Layered architecture descriptions and their shape validation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Height, width and channel count of one example (NHWC without the batch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(h: usize, w: usize, c: usize) -> Self {
        Shape { h, w, c }
    }

    pub const fn flat(n: usize) -> Self {
        Shape { h: 1, w: 1, c: n }
    }

    pub const fn size(&self) -> usize {
        self.h * self.w * self.c
    }
}

impl From<[usize; 3]> for Shape {
    fn from(d: [usize; 3]) -> Self {
        Shape::new(d[0], d[1], d[2])
    }
}

impl From<Shape> for [usize; 3] {
    fn from(s: Shape) -> Self {
        [s.h, s.w, s.c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Valid,
    /// Output size `ceil(in / stride)`, zero padding split with the extra
    /// cell on the bottom/right.
    Same,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        #[serde(rename = "in")]
        inputs: usize,
        #[serde(rename = "out")]
        outputs: usize,
    },
    Conv2d {
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: Padding,
    },
    MaxPool {
        size: usize,
        stride: usize,
        #[serde(default)]
        padding: Padding,
    },
    Relu,
    Dropout {
        rate: f32,
    },
    /// Mean softmax cross-entropy over integer class labels.
    SoftmaxXent,
    /// Mean absolute error against real-valued targets.
    L1Loss,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn is_head(&self) -> bool {
        matches!(self, LayerSpec::SoftmaxXent | LayerSpec::L1Loss)
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }
}

/// One spatial axis of a windowed op: output length and leading pad.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Axis {
    pub out: usize,
    pub pad: usize,
}

pub fn window_axis(len: usize, window: usize, stride: usize, padding: Padding) -> Option<Axis> {
    if stride == 0 || window == 0 {
        return None;
    }
    match padding {
        Padding::Valid => {
            if len < window {
                return None;
            }
            Some(Axis { out: (len - window) / stride + 1, pad: 0 })
        }
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + window).saturating_sub(len);
            Some(Axis { out, pad: total / 2 })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Checks layer compatibility and returns the activation shape entering
    /// each layer, followed by the shape leaving the last non-head layer.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.input_shape.size() == 0 {
            return Err(Error::Spec("input shape has a zero dimension".into()));
        }
        let Some(last) = self.layers.last() else {
            return Err(Error::Spec("network has no layers".into()));
        };
        if !last.is_head() {
            return Err(Error::Spec("last layer must be a loss head".into()));
        }
        let mut shapes = vec![self.input_shape];
        let mut cur = self.input_shape;
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::Spec(format!("layer {i} ({layer:?}): {msg}"));
            cur = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    if inputs != cur.size() {
                        return Err(err(format!("expects {inputs} inputs, receives {}", cur.size())));
                    }
                    if outputs == 0 {
                        return Err(err("zero outputs".into()));
                    }
                    Shape::flat(outputs)
                }
                LayerSpec::Conv2d { kh, kw, cin, cout, stride, padding } => {
                    if cin != cur.c {
                        return Err(err(format!("expects {cin} channels, receives {}", cur.c)));
                    }
                    if cout == 0 {
                        return Err(err("zero output channels".into()));
                    }
                    let ay = window_axis(cur.h, kh, stride, padding);
                    let ax = window_axis(cur.w, kw, stride, padding);
                    match (ay, ax) {
                        (Some(ay), Some(ax)) => Shape::new(ay.out, ax.out, cout),
                        _ => return Err(err(format!("kernel does not fit input {cur:?}"))),
                    }
                }
                LayerSpec::MaxPool { size, stride, padding } => {
                    let ay = window_axis(cur.h, size, stride, padding);
                    let ax = window_axis(cur.w, size, stride, padding);
                    match (ay, ax) {
                        (Some(ay), Some(ax)) => Shape::new(ay.out, ax.out, cur.c),
                        _ => return Err(err(format!("window does not fit input {cur:?}"))),
                    }
                }
                LayerSpec::Relu => cur,
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(err(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    cur
                }
                LayerSpec::SoftmaxXent | LayerSpec::L1Loss => {
                    if i + 1 != self.layers.len() {
                        return Err(err("loss head must be the last layer".into()));
                    }
                    if matches!(layer, LayerSpec::SoftmaxXent) && cur.size() < 2 {
                        return Err(err("softmax head needs at least two classes".into()));
                    }
                    return Ok(shapes);
                }
            };
            shapes.push(cur);
        }
        unreachable!("head presence checked above")
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Width of the output vector (class count for a softmax head).
    pub fn num_outputs(&self) -> Result<usize> {
        Ok(self.shapes()?.last().map(Shape::size).unwrap_or(0))
    }

    /// Analytic parameter count: sum of weight and bias element counts.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
                LayerSpec::Conv2d { kh, kw, cin, cout, .. } => kh * kw * cin * cout + cout,
                _ => 0,
            })
            .sum()
    }

    /// Stable 64-bit digest of the architecture, stored with snapshot files.
    pub fn hash64(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n0() -> NetworkSpec {
        crate::config::presets::n0_spec()
    }

    #[test]
    fn same_padding_reaches_expected_fc_size() {
        let shapes = n0().shapes().unwrap();
        // 28 -> 14 -> 7 -> 4 with same-padded convolutions and pools.
        assert!(shapes.contains(&Shape::new(4, 4, 32)));
    }

    #[test]
    fn n0_param_count_is_sum_of_layer_shapes() {
        let expected = (5 * 5 * 8 + 8)
            + (5 * 5 * 8 * 16 + 16)
            + (5 * 5 * 16 * 32 + 32)
            + (512 * 256 + 256)
            + (256 * 10 + 10);
        assert_eq!(n0().param_count(), expected);
    }

    #[test]
    fn rejects_incompatible_layers() {
        let spec = NetworkSpec {
            input_shape: Shape::flat(3),
            layers: vec![
                LayerSpec::Dense { inputs: 3, outputs: 4 },
                LayerSpec::Dense { inputs: 5, outputs: 2 },
                LayerSpec::SoftmaxXent,
            ],
        };
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn rejects_bad_dropout_and_missing_head() {
        let spec = NetworkSpec {
            input_shape: Shape::flat(3),
            layers: vec![LayerSpec::Dropout { rate: 1.0 }, LayerSpec::SoftmaxXent],
        };
        assert!(spec.validate().is_err());
        let spec = NetworkSpec {
            input_shape: Shape::flat(3),
            layers: vec![LayerSpec::Dense { inputs: 3, outputs: 2 }],
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn window_axis_same_and_valid() {
        assert_eq!(window_axis(7, 2, 2, Padding::Same), Some(Axis { out: 4, pad: 0 }));
        assert_eq!(window_axis(28, 5, 1, Padding::Same), Some(Axis { out: 28, pad: 2 }));
        assert_eq!(window_axis(28, 5, 1, Padding::Valid), Some(Axis { out: 24, pad: 0 }));
        assert_eq!(window_axis(3, 5, 1, Padding::Valid), None);
    }
}
