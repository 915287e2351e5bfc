use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::NeuralError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense { input: usize, output: usize, activation: Activation },
    Lstm { input: usize, hidden: usize },
    Gru { input: usize, hidden: usize },
    /// Bidirectional LSTM; emits `2 * hidden` features per step (forward block first).
    Bidirectional { input: usize, hidden: usize },
    /// Pools a sequence to its final step; for bidirectional outputs the
    /// backward block is taken at step 0, its last processed step.
    LastStep,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, output, .. } => input * output + output,
            LayerSpec::Lstm { input, hidden } => lstm_param_count(input, hidden),
            LayerSpec::Gru { input, hidden } => 3 * hidden * (input + hidden + 1),
            LayerSpec::Bidirectional { input, hidden } => 2 * lstm_param_count(input, hidden),
            LayerSpec::LastStep => 0,
        }
    }
}

pub(crate) fn lstm_param_count(input: usize, hidden: usize) -> usize {
    4 * hidden * (input + hidden + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    MeanSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub loss: LossKind,
    pub seed: u64,
}

/// Shape of the activation flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Seq { width: usize, backward_from: Option<usize> },
}

impl Shape {
    pub fn width(self) -> usize {
        match self {
            Shape::Flat(w) => w,
            Shape::Seq { width, .. } => width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub input: Shape,
    pub output: Shape,
    pub shapes: Vec<Shape>,
    pub ranges: Vec<Range<usize>>,
    pub param_count: usize,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, loss: LossKind, seed: u64) -> Self {
        Self { layers, loss, seed }
    }

    /// Dense MLP `dims[0] -> ... -> dims[n]`, hidden layers with `hidden_act`, linear head.
    pub fn mlp(dims: &[usize], hidden_act: Activation, loss: LossKind, seed: u64) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec::Dense {
                input: w[0],
                output: w[1],
                activation: if i + 2 == dims.len() { Activation::Identity } else { hidden_act },
            })
            .collect();
        Self { layers, loss, seed }
    }

    /// Validates adjacent dimensions and computes parameter offsets.
    pub fn layout(&self) -> Result<Layout, NeuralError> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| NeuralError::Spec("network has no layers".into()))?;
        let input = match *first {
            LayerSpec::Dense { input, .. } => Shape::Flat(input),
            LayerSpec::Lstm { input, .. }
            | LayerSpec::Gru { input, .. }
            | LayerSpec::Bidirectional { input, .. } => Shape::Seq { width: input, backward_from: None },
            LayerSpec::LastStep => {
                return Err(NeuralError::Spec("network cannot start with last-step pooling".into()))
            }
        };
        let mut cur = input;
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut ranges = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let next = match (*layer, cur) {
                (LayerSpec::Dense { input, output, .. }, Shape::Flat(w)) if w == input && output > 0 => {
                    Shape::Flat(output)
                }
                (LayerSpec::Lstm { input, hidden }, Shape::Seq { width, .. })
                | (LayerSpec::Gru { input, hidden }, Shape::Seq { width, .. })
                    if width == input && hidden > 0 =>
                {
                    Shape::Seq { width: hidden, backward_from: None }
                }
                (LayerSpec::Bidirectional { input, hidden }, Shape::Seq { width, .. })
                    if width == input && hidden > 0 =>
                {
                    Shape::Seq { width: 2 * hidden, backward_from: Some(hidden) }
                }
                (LayerSpec::LastStep, Shape::Seq { width, .. }) => Shape::Flat(width),
                (layer, shape) => {
                    return Err(NeuralError::Spec(format!(
                        "layer {i} ({layer:?}) does not accept input shape {shape:?}"
                    )))
                }
            };
            let n = layer.param_count();
            ranges.push(offset..offset + n);
            offset += n;
            shapes.push(next);
            cur = next;
        }
        Ok(Layout { input, output: cur, shapes, ranges, param_count: offset })
    }
}
