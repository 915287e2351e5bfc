use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, BidirCache, DenseCache, GruCache, LstmCache};
use super::spec::{LayerSpec, Layout, NetworkSpec, Shape};
use super::tensor::{Tensor, Tensor2, Tensor3};
use super::NeuralError;

/// A network definition together with its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layout: Layout,
    params: Vec<f64>,
}

enum Cache {
    Dense(DenseCache),
    Lstm(LstmCache),
    Gru(GruCache),
    Bidir(BidirCache),
    LastStep { time: usize, backward_from: Option<usize> },
}

/// Intermediate values of one forward pass, consumed by [`Network::backward`].
pub struct ForwardTrace {
    caches: Vec<Cache>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, limit: f64) -> impl Iterator<Item = f64> + '_ {
    (0..n).map(move |_| rng.random_range(-limit..=limit))
}

impl Network {
    /// Seeded initialization: Xavier-uniform dense kernels, `±1/sqrt(hidden)`
    /// recurrent kernels, zero biases except LSTM forget gates at 1.0.
    pub fn new(spec: NetworkSpec) -> Result<Self, NeuralError> {
        let layout = spec.layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = Vec::with_capacity(layout.param_count);
        for layer in &spec.layers {
            match *layer {
                LayerSpec::Dense { input, output, .. } => {
                    let limit = (6.0 / (input + output) as f64).sqrt();
                    params.extend(uniform(&mut rng, input * output, limit));
                    params.extend(std::iter::repeat_n(0.0, output));
                }
                LayerSpec::Lstm { input, hidden } => init_lstm(&mut rng, &mut params, input, hidden),
                LayerSpec::Bidirectional { input, hidden } => {
                    init_lstm(&mut rng, &mut params, input, hidden);
                    init_lstm(&mut rng, &mut params, input, hidden);
                }
                LayerSpec::Gru { input, hidden } => {
                    let limit = 1.0 / (hidden as f64).sqrt();
                    params.extend(uniform(&mut rng, (input + hidden) * 3 * hidden, limit));
                    params.extend(std::iter::repeat_n(0.0, 3 * hidden));
                }
                LayerSpec::LastStep => {}
            }
        }
        debug_assert_eq!(params.len(), layout.param_count);
        Ok(Self { spec, layout, params })
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Self, NeuralError> {
        let layout = spec.layout()?;
        let params = vec![0.0; layout.param_count];
        Ok(Self { spec, layout, params })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self, NeuralError> {
        let layout = spec.layout()?;
        if params.len() != layout.param_count {
            return Err(NeuralError::Shape(format!(
                "spec needs {} parameters, got {}",
                layout.param_count,
                params.len()
            )));
        }
        Ok(Self { spec, layout, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NeuralError> {
        if params.len() != self.params.len() {
            return Err(NeuralError::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_shape(&self) -> Shape {
        self.layout.input
    }

    pub fn output_width(&self) -> usize {
        self.layout.output.width()
    }

    fn check_input(&self, input: &Tensor) -> Result<(), NeuralError> {
        let ok = match (self.layout.input, input) {
            (Shape::Flat(w), Tensor::Mat(m)) => m.cols == w,
            (Shape::Seq { width, .. }, Tensor::Seq(s)) => s.features == width && s.time > 0,
            _ => false,
        };
        if !ok {
            let got = match input {
                Tensor::Mat(m) => format!("matrix ({}, {})", m.rows, m.cols),
                Tensor::Seq(s) => format!("sequence ({}, {}, {})", s.batch, s.time, s.features),
            };
            return Err(NeuralError::Shape(format!(
                "network expects {:?}, got {got}",
                self.layout.input
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NeuralError> {
        self.forward_trace(input).map(|(out, _)| out)
    }

    pub fn forward_trace(&self, input: &Tensor) -> Result<(Tensor, ForwardTrace), NeuralError> {
        self.check_input(input)?;
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        let mut cur = input.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let p = &self.params[self.layout.ranges[i].clone()];
            cur = match (*layer, cur) {
                (LayerSpec::Dense { output, activation, .. }, Tensor::Mat(x)) => {
                    let (y, c) = layers::dense_forward(p, &x, output, activation);
                    caches.push(Cache::Dense(c));
                    Tensor::Mat(y)
                }
                (LayerSpec::Lstm { hidden, .. }, Tensor::Seq(x)) => {
                    let (y, c) = layers::lstm_forward(p, &x, hidden);
                    caches.push(Cache::Lstm(c));
                    Tensor::Seq(y)
                }
                (LayerSpec::Gru { hidden, .. }, Tensor::Seq(x)) => {
                    let (y, c) = layers::gru_forward(p, &x, hidden);
                    caches.push(Cache::Gru(c));
                    Tensor::Seq(y)
                }
                (LayerSpec::Bidirectional { hidden, .. }, Tensor::Seq(x)) => {
                    let (y, c) = layers::bidir_forward(p, &x, hidden);
                    caches.push(Cache::Bidir(c));
                    Tensor::Seq(y)
                }
                (LayerSpec::LastStep, Tensor::Seq(x)) => {
                    let backward_from = match self.input_shape_of(i) {
                        Shape::Seq { backward_from, .. } => backward_from,
                        Shape::Flat(_) => None,
                    };
                    caches.push(Cache::LastStep { time: x.time, backward_from });
                    Tensor::Mat(layers::last_step_forward(&x, backward_from))
                }
                _ => return Err(NeuralError::Shape(format!("layer {i} received an incompatible tensor"))),
            };
        }
        if cur.data().iter().any(|v| !v.is_finite()) {
            return Err(NeuralError::NonFinite("forward output".into()));
        }
        Ok((cur, ForwardTrace { caches }))
    }

    fn input_shape_of(&self, layer: usize) -> Shape {
        if layer == 0 {
            self.layout.input
        } else {
            self.layout.shapes[layer - 1]
        }
    }

    /// Parameter gradients given the gradient of the loss w.r.t. the network output.
    pub fn backward(&self, trace: &ForwardTrace, grad_output: &Tensor) -> Result<Vec<f64>, NeuralError> {
        if grad_output.data().iter().any(|v| !v.is_finite()) {
            return Err(NeuralError::NonFinite("output gradient".into()));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut cur = grad_output.clone();
        for (i, (layer, cache)) in self.spec.layers.iter().zip(&trace.caches).enumerate().rev() {
            let range = self.layout.ranges[i].clone();
            let p = &self.params[range.clone()];
            let g = &mut grads[range];
            cur = match (layer, cache, cur) {
                (LayerSpec::Dense { activation, .. }, Cache::Dense(c), Tensor::Mat(dy)) => {
                    Tensor::Mat(layers::dense_backward(p, c, *activation, &dy, g))
                }
                (LayerSpec::Lstm { .. }, Cache::Lstm(c), Tensor::Seq(dy)) => {
                    Tensor::Seq(layers::lstm_backward(p, c, &dy, g))
                }
                (LayerSpec::Gru { .. }, Cache::Gru(c), Tensor::Seq(dy)) => {
                    Tensor::Seq(layers::gru_backward(p, c, &dy, g))
                }
                (LayerSpec::Bidirectional { .. }, Cache::Bidir(c), Tensor::Seq(dy)) => {
                    Tensor::Seq(layers::bidir_backward(p, c, &dy, g))
                }
                (LayerSpec::LastStep, Cache::LastStep { time, backward_from }, Tensor::Mat(dy)) => {
                    Tensor::Seq(layers::last_step_backward(&dy, *time, *backward_from))
                }
                _ => return Err(NeuralError::Shape(format!("gradient shape mismatch at layer {i}"))),
            };
        }
        if grads.iter().any(|v| !v.is_finite()) {
            return Err(NeuralError::NonFinite("parameter gradient".into()));
        }
        Ok(grads)
    }
}

fn init_lstm(rng: &mut ChaCha8Rng, params: &mut Vec<f64>, input: usize, hidden: usize) {
    let limit = 1.0 / (hidden as f64).sqrt();
    params.extend(uniform(rng, (input + hidden) * 4 * hidden, limit));
    for gate in 0..4 {
        let v = if gate == 1 { 1.0 } else { 0.0 };
        params.extend(std::iter::repeat_n(v, hidden));
    }
}

/// Convenience: forward a single flat input row.
pub fn forward_row(net: &Network, row: &[f64]) -> Result<Vec<f64>, NeuralError> {
    let x = Tensor2::from_vec(1, row.len(), row.to_vec())?;
    Ok(net.forward(&Tensor::Mat(x))?.into_mat()?.data)
}

/// Convenience: forward a single `(time, features)` sequence.
pub fn forward_sequence(net: &Network, seq: &[f64], time: usize) -> Result<Vec<f64>, NeuralError> {
    let features = if time == 0 { 0 } else { seq.len() / time };
    let x = Tensor3::from_vec(1, time, features, seq.to_vec())?;
    Ok(net.forward(&Tensor::Seq(x))?.into_mat()?.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::spec::{Activation, LossKind};

    #[test]
    fn identity_dense() {
        let spec = NetworkSpec::new(
            vec![LayerSpec::Dense { input: 2, output: 2, activation: Activation::Identity }],
            LossKind::MeanSquared,
            0,
        );
        let net = Network::from_params(spec, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(forward_row(&net, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_lstm_gives_zero_trajectory() {
        let spec = NetworkSpec::new(vec![LayerSpec::Lstm { input: 3, hidden: 4 }], LossKind::MeanSquared, 0);
        let net = Network::zeros(spec).unwrap();
        let x = Tensor3::from_vec(2, 5, 3, (0..30).map(|v| v as f64 * 0.3 - 2.0).collect()).unwrap();
        let out = net.forward(&Tensor::Seq(x)).unwrap().into_seq().unwrap();
        assert_eq!((out.batch, out.time, out.features), (2, 5, 4));
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bidirectional_pooled_shape() {
        let spec = NetworkSpec::new(
            vec![LayerSpec::Bidirectional { input: 7, hidden: 6 }, LayerSpec::LastStep],
            LossKind::SoftmaxCrossEntropy,
            3,
        );
        let net = Network::new(spec).unwrap();
        let x = Tensor3::zeros(4, 10, 7);
        let out = net.forward(&Tensor::Seq(x)).unwrap().into_mat().unwrap();
        assert_eq!((out.rows, out.cols), (4, 12));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let spec = NetworkSpec::mlp(&[3, 2], Activation::Relu, LossKind::MeanSquared, 0);
        let net = Network::new(spec).unwrap();
        let x = Tensor2::zeros(1, 4);
        assert!(matches!(net.forward(&Tensor::Mat(x)), Err(NeuralError::Shape(_))));
        let seq = Tensor3::zeros(1, 2, 3);
        assert!(net.forward(&Tensor::Seq(seq)).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let spec = NetworkSpec::new(
            vec![LayerSpec::Gru { input: 3, hidden: 4 }, LayerSpec::LastStep],
            LossKind::MeanSquared,
            42,
        );
        let a = Network::new(spec.clone()).unwrap();
        let b = Network::new(spec).unwrap();
        assert_eq!(a.params(), b.params());
    }
}
