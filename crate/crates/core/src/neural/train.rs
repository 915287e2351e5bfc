use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{mean_squared, softmax, softmax_cross_entropy, Reduction};
use super::network::Network;
use super::optim::{Optimizer, TrainConfig};
use super::spec::{LossKind, NetworkSpec};
use super::tensor::{Tensor, Tensor2};
use super::NeuralError;

const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Tensor2),
}

impl Targets {
    fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.rows,
        }
    }

    fn select(&self, idx: &[usize]) -> Self {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(v.select_rows(idx)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self, NeuralError> {
        if inputs.batch() != targets.len() {
            return Err(NeuralError::Shape(format!(
                "{} inputs but {} targets",
                inputs.batch(),
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    /// Mean minibatch loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Loss and output gradient for one batch under the spec's loss kind.
pub fn batch_loss(
    loss: LossKind,
    output: &Tensor2,
    targets: &Targets,
    reduction: Reduction,
) -> Result<(f64, Tensor2), NeuralError> {
    match (loss, targets) {
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(c)) => softmax_cross_entropy(output, c, reduction),
        (LossKind::MeanSquared, Targets::Values(v)) => mean_squared(output, v, reduction),
        (kind, _) => Err(NeuralError::Config(format!("targets do not match loss {kind:?}"))),
    }
}

/// Loss value and parameter gradients of `net` on a batch.
pub fn loss_and_gradients(
    net: &Network,
    inputs: &Tensor,
    targets: &Targets,
    reduction: Reduction,
) -> Result<(f64, Vec<f64>), NeuralError> {
    let (out, trace) = net.forward_trace(inputs)?;
    let out = out.into_mat()?;
    let (loss, grad) = batch_loss(net.spec().loss, &out, targets, reduction)?;
    let grads = net.backward(&trace, &Tensor::Mat(grad))?;
    Ok((loss, grads))
}

/// Minibatch training from the spec's seeded initialization. The shuffling
/// order is derived from the same seed, so `(spec, dataset, config)` fully
/// determines the result.
pub fn train(spec: NetworkSpec, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome, NeuralError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(NeuralError::Config("training dataset is empty".into()));
    }
    let mut net = Network::new(spec)?;
    let loss_curve = fit(&mut net, dataset, config)?;
    Ok(TrainOutcome { network: net, loss_curve })
}

/// Continues training an existing network in place.
pub fn fit(net: &mut Network, dataset: &Dataset, config: &TrainConfig) -> Result<Vec<f64>, NeuralError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(NeuralError::Config("training dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(net.spec().seed ^ SHUFFLE_SALT);
    let mut opt = Optimizer::new(config, net.param_count());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let x = dataset.inputs.select(chunk);
            let y = dataset.targets.select(chunk);
            let (loss, mut grads) = loss_and_gradients(net, &x, &y, Reduction::Mean)
                .map_err(|e| NeuralError::Divergence { epoch, detail: e.to_string() })?;
            opt.step(net.params_mut(), &mut grads);
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        if !mean.is_finite() || net.params().iter().any(|p| !p.is_finite()) {
            return Err(NeuralError::Divergence { epoch, detail: format!("epoch loss {mean}") });
        }
        curve.push(mean);
    }
    Ok(curve)
}

/// Class probabilities for a batch (softmax of the logits).
pub fn predict_proba(net: &Network, inputs: &Tensor) -> Result<Tensor2, NeuralError> {
    Ok(softmax(&net.forward(inputs)?.into_mat()?))
}

pub fn accuracy(net: &Network, dataset: &Dataset) -> Result<f64, NeuralError> {
    let Targets::Classes(labels) = &dataset.targets else {
        return Err(NeuralError::Config("accuracy requires class targets".into()));
    };
    let p = predict_proba(net, &dataset.inputs)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(p.row(r)) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
