//! Dialogue-flow policy: a Q-network over the 11-element state with one output
//! per dialogue action, trained in batch on a logged corpus and fine-tuned
//! online per coachee.

mod batch;
mod online;
mod replay;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DialogueAction, StateNormalizer, StateVector, Transition, NUM_ACTIONS, STATE_DIM};
use crate::neural::{argmax, Activation, LossKind, Network, NetworkSpec, NeuralError, Tensor, Tensor2};
use crate::reward::RewardConfig;

pub use batch::{train_batch, BatchOutcome, QLearningConfig};
pub use online::{AdaptivePolicy, OnlineConfig, UpdateReport};
pub use replay::ReplayBuffer;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("state must have {STATE_DIM} entries, got {0}")]
    StateDim(usize),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("discount factor must lie in [0, 1), got {0}")]
    Gamma(f64),
    #[error("checkpoint is already personalised for coachee `{0}`")]
    AlreadyPersonalised(String),
    #[error("checkpoint network must map {STATE_DIM} inputs to {NUM_ACTIONS} outputs")]
    NetworkShape,
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Dqn,
    DoubleDqn,
    Nfq,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Dqn, Algorithm::DoubleDqn, Algorithm::Nfq];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Dqn => "dqn",
            Algorithm::DoubleDqn => "double-dqn",
            Algorithm::Nfq => "nfq",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dqn" => Ok(Algorithm::Dqn),
            "double-dqn" | "ddqn" | "d-dqn" | "double_dqn" => Ok(Algorithm::DoubleDqn),
            "nfq" => Ok(Algorithm::Nfq),
            other => Err(PolicyError::Config(format!(
                "unknown algorithm `{other}` (expected dqn, double-dqn or nfq)"
            ))),
        }
    }
}

/// `11 -> hidden -> hidden -> 3` with ReLU hidden layers and a linear head.
pub fn q_network_spec(hidden: usize, seed: u64) -> NetworkSpec {
    NetworkSpec::mlp(&[STATE_DIM, hidden, hidden, NUM_ACTIONS], Activation::Relu, LossKind::MeanSquared, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub corpus_id: String,
    pub seed: u64,
    pub epochs: usize,
    pub gamma: f64,
    pub transitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub algorithm: Algorithm,
    pub network: NetworkSpec,
    pub params: Vec<f64>,
    pub normalizer: StateNormalizer,
    pub reward: RewardConfig,
    pub metadata: TrainingMetadata,
    pub coachee_id: Option<String>,
}

impl PolicyCheckpoint {
    pub fn q_network(&self) -> Result<QNetwork, PolicyError> {
        QNetwork::from_network(Network::from_params(self.network.clone(), self.params.clone())?)
    }
}

pub fn fork_for_coachee(generic: &PolicyCheckpoint, coachee_id: &str) -> Result<PolicyCheckpoint, PolicyError> {
    if let Some(existing) = &generic.coachee_id {
        return Err(PolicyError::AlreadyPersonalised(existing.clone()));
    }
    Ok(PolicyCheckpoint { coachee_id: Some(coachee_id.to_string()), ..generic.clone() })
}

/// Online network plus a target copy that only moves on [`QNetwork::sync_target`].
#[derive(Debug, Clone)]
pub struct QNetwork {
    online: Network,
    target: Network,
    syncs: u64,
}

impl QNetwork {
    pub fn new(hidden: usize, seed: u64) -> Result<Self, PolicyError> {
        Self::from_network(Network::new(q_network_spec(hidden, seed))?)
    }

    pub fn from_network(online: Network) -> Result<Self, PolicyError> {
        if online.input_shape() != crate::neural::Shape::Flat(STATE_DIM) || online.output_width() != NUM_ACTIONS {
            return Err(PolicyError::NetworkShape);
        }
        Ok(Self { target: online.clone(), online, syncs: 0 })
    }

    pub fn online(&self) -> &Network {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut Network {
        &mut self.online
    }

    pub fn target(&self) -> &Network {
        &self.target
    }

    pub fn sync_target(&mut self) {
        self.target.params_mut().copy_from_slice(self.online.params());
        self.syncs += 1;
    }

    pub fn sync_count(&self) -> u64 {
        self.syncs
    }

    pub fn q_values(&self, state: &StateVector) -> Result<[f64; NUM_ACTIONS], PolicyError> {
        q_values_of(&self.online, state.as_slice())
    }
}

pub fn q_values_of(net: &Network, state: &[f64]) -> Result<[f64; NUM_ACTIONS], PolicyError> {
    if state.len() != STATE_DIM {
        return Err(PolicyError::StateDim(state.len()));
    }
    let out = crate::neural::forward_row(net, state)?;
    let mut q = [0.0; NUM_ACTIONS];
    q.copy_from_slice(&out);
    Ok(q)
}

/// Q-values for a batch of states, one row per state.
pub(crate) fn q_batch(net: &Network, states: &[&StateVector]) -> Result<Tensor2, PolicyError> {
    let mut data = Vec::with_capacity(states.len() * STATE_DIM);
    for s in states {
        data.extend_from_slice(s.as_slice());
    }
    let x = Tensor2::from_vec(states.len(), STATE_DIM, data)?;
    Ok(net.forward(&Tensor::Mat(x))?.into_mat()?)
}

/// The random numbers consumed by one epsilon-greedy decision; logging them
/// makes every decision replayable from its q-values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionDraw {
    pub explore_u: f64,
    pub random_index: usize,
}

impl ActionDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            explore_u: rng.random::<f64>(),
            random_index: rng.random_range(0..NUM_ACTIONS),
        }
    }
}

pub fn greedy_action(qvals: &[f64; NUM_ACTIONS]) -> DialogueAction {
    DialogueAction::ALL[argmax(qvals)]
}

/// Deterministic epsilon-greedy rule given a pre-sampled draw.
pub fn select_action_with(qvals: &[f64; NUM_ACTIONS], epsilon: f64, draw: ActionDraw) -> DialogueAction {
    if draw.explore_u < epsilon {
        DialogueAction::ALL[draw.random_index % NUM_ACTIONS]
    } else {
        greedy_action(qvals)
    }
}

/// Epsilon-greedy: argmax with probability `1 - epsilon` (ties to the lowest
/// action code), uniform otherwise.
pub fn select_action<R: Rng + ?Sized>(qvals: &[f64; NUM_ACTIONS], epsilon: f64, rng: &mut R) -> DialogueAction {
    select_action_with(qvals, epsilon, ActionDraw::sample(rng))
}

/// What the session orchestrator needs from a policy.
pub trait DecisionPolicy: Send {
    fn q_values(&self, state: &StateVector) -> Result<[f64; NUM_ACTIONS], PolicyError>;

    fn epsilon(&self) -> f64;

    /// Called once before each session, with the 1-based session index.
    fn begin_session(&mut self, _session_index: usize) {}

    /// Feeds one completed transition; frozen policies ignore it.
    fn observe(&mut self, _transition: &Transition) -> UpdateReport {
        UpdateReport::default()
    }
}

/// Generic policy used without adaptation.
#[derive(Debug, Clone)]
pub struct FrozenPolicy {
    qnet: QNetwork,
    epsilon: f64,
}

impl FrozenPolicy {
    pub fn new(qnet: QNetwork, epsilon: f64) -> Self {
        Self { qnet, epsilon }
    }

    pub fn from_checkpoint(ckpt: &PolicyCheckpoint) -> Result<Self, PolicyError> {
        Ok(Self::new(ckpt.q_network()?, 0.0))
    }
}

impl DecisionPolicy for FrozenPolicy {
    fn q_values(&self, state: &StateVector) -> Result<[f64; NUM_ACTIONS], PolicyError> {
        self.qnet.q_values(state)
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Uniform-random behaviour policy used to collect the pretraining corpus.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformRandomPolicy;

impl DecisionPolicy for UniformRandomPolicy {
    fn q_values(&self, state: &StateVector) -> Result<[f64; NUM_ACTIONS], PolicyError> {
        let _ = state;
        Ok([0.0; NUM_ACTIONS])
    }

    fn epsilon(&self) -> f64 {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn greedy_and_tie_break() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_action(&[1.0, 0.5, -0.2], 0.0, &mut rng), DialogueAction::Summarise);
        assert_eq!(select_action(&[0.5, 0.5, 0.1], 0.0, &mut rng), DialogueAction::Summarise);
        assert_eq!(select_action(&[0.1, 0.5, 0.5], 0.0, &mut rng), DialogueAction::FollowUpQuestion);
    }

    #[test]
    fn uniform_exploration_within_three_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[select_action(&[5.0, 0.0, 0.0], 1.0, &mut rng).code()] += 1;
        }
        let p = 1.0 / 3.0;
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn zero_network_gives_zero_q() {
        let net = Network::zeros(q_network_spec(8, 0)).unwrap();
        let q = QNetwork::from_network(net).unwrap();
        assert_eq!(q.q_values(&StateVector::zeros()).unwrap(), [0.0; 3]);
    }

    #[test]
    fn wrong_dimension_rejected() {
        let q = QNetwork::new(8, 1).unwrap();
        assert!(matches!(q_values_of(q.online(), &[0.0; 5]), Err(PolicyError::StateDim(5))));
    }

    #[test]
    fn target_moves_only_on_sync() {
        let mut q = QNetwork::new(4, 2).unwrap();
        q.online_mut().params_mut()[0] += 1.0;
        assert_ne!(q.online().params(), q.target().params());
        q.sync_target();
        assert_eq!(q.online().params(), q.target().params());
        assert_eq!(q.sync_count(), 1);
    }
}
