use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{q_batch, q_network_spec, Algorithm, PolicyCheckpoint, PolicyError, QNetwork, TrainingMetadata};
use crate::domain::{StateNormalizer, Transition};
use crate::neural::loss::{selected_squared, Reduction};
use crate::neural::{argmax, Network, Optimizer, Tensor, TrainConfig};
use crate::reward::RewardConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QLearningConfig {
    pub gamma: f64,
    pub hidden: usize,
    /// DQN / Double-DQN: gradient steps between target-network syncs.
    pub target_sync_steps: u64,
    /// NFQ: epochs fitted against one frozen set of targets.
    pub nfq_refresh_epochs: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for QLearningConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            hidden: 64,
            target_sync_steps: 100,
            nfq_refresh_epochs: 10,
            train: TrainConfig { learning_rate: 1e-3, batch_size: 32, epochs: 50, ..TrainConfig::default() },
            seed: 7,
        }
    }
}

impl QLearningConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(PolicyError::Gamma(self.gamma));
        }
        if self.hidden == 0 || self.target_sync_steps == 0 || self.nfq_refresh_epochs == 0 {
            return Err(PolicyError::Config(
                "hidden, target_sync_steps and nfq_refresh_epochs must be positive".into(),
            ));
        }
        self.train.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub checkpoint: PolicyCheckpoint,
    /// Mean TD loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// TD regression targets `(action code, y)` for a batch.
///
/// * `dqn`: `y = r + gamma * max_a' Q_target(s', a')`
/// * `double-dqn`: `y = r + gamma * Q_target(s', argmax_a' Q_online(s', a'))`
/// * `nfq`: like `dqn`, with `target` being the frozen fitted-Q snapshot
///
/// Terminal transitions use `y = r`.
pub(crate) fn td_targets(
    algorithm: Algorithm,
    online: &Network,
    target: &Network,
    batch: &[&Transition],
    gamma: f64,
) -> Result<Vec<(usize, f64)>, PolicyError> {
    let next: Vec<_> = batch.iter().map(|t| &t.next_state).collect();
    let q_target = q_batch(target, &next)?;
    let q_online = match algorithm {
        Algorithm::DoubleDqn => Some(q_batch(online, &next)?),
        _ => None,
    };
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let bootstrap = if t.done {
                0.0
            } else {
                let row = q_target.row(i);
                match &q_online {
                    Some(qo) => row[argmax(qo.row(i))],
                    None => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                }
            };
            (t.action.code(), t.reward + gamma * bootstrap)
        })
        .collect())
}

/// One gradient step on the squared TD error; returns the batch loss.
pub(crate) fn td_step(
    online: &mut Network,
    opt: &mut Optimizer,
    batch: &[&Transition],
    targets: &[(usize, f64)],
) -> Result<f64, PolicyError> {
    let states: Vec<_> = batch.iter().map(|t| &t.state).collect();
    let mut data = Vec::with_capacity(states.len() * crate::domain::STATE_DIM);
    for s in &states {
        data.extend_from_slice(s.as_slice());
    }
    let x = Tensor::Mat(crate::neural::Tensor2::from_vec(states.len(), crate::domain::STATE_DIM, data)?);
    let (out, trace) = online.forward_trace(&x)?;
    let (loss, grad) = selected_squared(&out.into_mat()?, targets, Reduction::Mean)?;
    let mut grads = online.backward(&trace, &Tensor::Mat(grad))?;
    opt.step(online.params_mut(), &mut grads);
    Ok(loss)
}

/// Offline Q-learning on a fixed transition corpus.
pub fn train_batch(
    corpus: &[Transition],
    algorithm: Algorithm,
    config: &QLearningConfig,
    normalizer: StateNormalizer,
    reward: RewardConfig,
    corpus_id: &str,
) -> Result<BatchOutcome, PolicyError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(PolicyError::EmptyCorpus);
    }
    let mut qnet = QNetwork::new(config.hidden, config.seed)?;
    let mut opt = Optimizer::new(&config.train, qnet.online().param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x51_7cc1));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut curve = Vec::with_capacity(config.train.epochs);
    let mut steps: u64 = 0;

    for epoch in 0..config.train.epochs {
        if algorithm == Algorithm::Nfq && epoch % config.nfq_refresh_epochs == 0 {
            qnet.sync_target();
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.train.batch_size) {
            let batch: Vec<&Transition> = chunk.iter().map(|&i| &corpus[i]).collect();
            let targets = td_targets(algorithm, qnet.online(), qnet.target(), &batch, config.gamma)?;
            let loss = td_step(qnet.online_mut(), &mut opt, &batch, &targets).map_err(|e| {
                PolicyError::Neural(crate::neural::NeuralError::Divergence { epoch, detail: e.to_string() })
            })?;
            total += loss;
            batches += 1;
            steps += 1;
            if algorithm != Algorithm::Nfq && steps % config.target_sync_steps == 0 {
                qnet.sync_target();
            }
        }
        let mean = total / batches as f64;
        if !mean.is_finite() {
            return Err(PolicyError::Neural(crate::neural::NeuralError::Divergence {
                epoch,
                detail: format!("mean TD loss {mean}"),
            }));
        }
        curve.push(mean);
    }

    let network = qnet.online();
    let checkpoint = PolicyCheckpoint {
        algorithm,
        network: q_network_spec(config.hidden, config.seed),
        params: network.params().to_vec(),
        normalizer,
        reward,
        metadata: TrainingMetadata {
            corpus_id: corpus_id.to_string(),
            seed: config.seed,
            epochs: config.train.epochs,
            gamma: config.gamma,
            transitions: corpus.len(),
        },
        coachee_id: None,
    };
    Ok(BatchOutcome { checkpoint, loss_curve: curve })
}
