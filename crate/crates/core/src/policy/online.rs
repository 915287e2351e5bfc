use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{td_step, td_targets};
use super::replay::ReplayBuffer;
use super::{Algorithm, DecisionPolicy, PolicyCheckpoint, PolicyError, QNetwork};
use crate::domain::{StateVector, Transition, NUM_ACTIONS};
use crate::neural::{Optimizer, OptimizerKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineConfig {
    /// Gradient steps performed after each observed transition.
    pub steps_per_turn: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub target_sync_steps: u64,
    pub replay_capacity: usize,
    pub epsilon_initial: f64,
    /// Multiplier applied to epsilon at each new session.
    pub epsilon_decay: f64,
    /// Share of each minibatch drawn from the generic corpus in session 1.
    pub generic_mix_initial: f64,
    pub generic_mix_final: f64,
    /// Linear decrease of the generic share per session.
    pub generic_mix_step: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            steps_per_turn: 4,
            batch_size: 32,
            learning_rate: 1e-3,
            gamma: 0.9,
            target_sync_steps: 100,
            replay_capacity: 1024,
            epsilon_initial: 0.1,
            epsilon_decay: 0.5,
            generic_mix_initial: 0.5,
            generic_mix_final: 0.2,
            generic_mix_step: 0.1,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(PolicyError::Gamma(self.gamma));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.epsilon_initial) || !unit(self.epsilon_decay) {
            return Err(PolicyError::Config("epsilon_initial and epsilon_decay must lie in [0, 1]".into()));
        }
        if !unit(self.generic_mix_initial) || !unit(self.generic_mix_final) || self.generic_mix_step < 0.0 {
            return Err(PolicyError::Config("generic mix ratios must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.target_sync_steps == 0 {
            return Err(PolicyError::Config(
                "batch_size, replay_capacity and target_sync_steps must be positive".into(),
            ));
        }
        self.train_config().validate()?;
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: 1,
            optimizer: OptimizerKind::default(),
            clip_norm: self.clip_norm,
        }
    }

    /// Exploration rate for a 1-based session index.
    pub fn epsilon_for(&self, session_index: usize) -> f64 {
        self.epsilon_initial * self.epsilon_decay.powi(session_index.saturating_sub(1) as i32)
    }

    /// Share of generic-corpus samples in each minibatch for a 1-based session index.
    pub fn generic_mix_for(&self, session_index: usize) -> f64 {
        let decayed = self.generic_mix_initial - self.generic_mix_step * session_index.saturating_sub(1) as f64;
        decayed.max(self.generic_mix_final)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub steps: usize,
    pub mean_loss: Option<f64>,
    pub target_synced: bool,
    /// Set when the update failed; the policy is then left as it was.
    pub error: Option<String>,
}

/// A per-coachee fork of the generic policy that keeps learning from its own
/// transitions, replayed together with a shrinking share of the generic corpus.
#[derive(Debug, Clone)]
pub struct AdaptivePolicy {
    base: PolicyCheckpoint,
    qnet: QNetwork,
    optimizer: Optimizer,
    buffer: ReplayBuffer,
    generic: Arc<[Transition]>,
    config: OnlineConfig,
    session_index: usize,
    steps: u64,
    rng: ChaCha8Rng,
}

impl AdaptivePolicy {
    pub fn new(
        checkpoint: &PolicyCheckpoint,
        generic_replay: Arc<[Transition]>,
        config: OnlineConfig,
    ) -> Result<Self, PolicyError> {
        config.validate()?;
        let qnet = checkpoint.q_network()?;
        let optimizer = Optimizer::new(&config.train_config(), qnet.online().param_count());
        Ok(Self {
            base: checkpoint.clone(),
            qnet,
            optimizer,
            buffer: ReplayBuffer::new(config.replay_capacity),
            generic: generic_replay,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            session_index: 1,
            steps: 0,
        })
    }

    pub fn config(&self) -> &OnlineConfig {
        &self.config
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn q_network(&self) -> &QNetwork {
        &self.qnet
    }

    pub fn session_index(&self) -> usize {
        self.session_index
    }

    pub fn gradient_steps(&self) -> u64 {
        self.steps
    }

    pub fn generic_mix(&self) -> f64 {
        if self.generic.is_empty() {
            0.0
        } else {
            self.config.generic_mix_for(self.session_index)
        }
    }

    /// The current parameters packaged as a checkpoint.
    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint { params: self.qnet.online().params().to_vec(), ..self.base.clone() }
    }

    fn sample_batch(&mut self) -> Vec<Transition> {
        let n = self.config.batch_size;
        let n_generic = (self.generic_mix() * n as f64).round() as usize;
        let mut batch = Vec::with_capacity(n);
        for _ in 0..n_generic {
            batch.push(self.generic[self.rng.random_range(0..self.generic.len())].clone());
        }
        batch.extend(self.buffer.sample(&mut self.rng, n - n_generic).into_iter().cloned());
        batch
    }

    /// Appends the transition and runs `steps_per_turn` TD updates.
    pub fn update_online(&mut self, transition: &Transition) -> UpdateReport {
        self.buffer.push(transition.clone());
        if self.config.steps_per_turn == 0 {
            return UpdateReport::default();
        }
        // NFQ has no incremental form; its checkpoints adapt with DQN targets.
        let algorithm = match self.base.algorithm {
            Algorithm::DoubleDqn => Algorithm::DoubleDqn,
            _ => Algorithm::Dqn,
        };
        let snapshot = (self.qnet.clone(), self.optimizer.clone(), self.steps);
        let mut total = 0.0;
        let mut synced = false;
        for _ in 0..self.config.steps_per_turn {
            let batch = self.sample_batch();
            let refs: Vec<&Transition> = batch.iter().collect();
            let result = td_targets(algorithm, self.qnet.online(), self.qnet.target(), &refs, self.config.gamma)
                .and_then(|targets| td_step(self.qnet.online_mut(), &mut self.optimizer, &refs, &targets));
            let loss = match result {
                Ok(l) if l.is_finite() && self.qnet.online().params().iter().all(|p| p.is_finite()) => l,
                Ok(l) => return self.rollback(snapshot, format!("non-finite TD loss {l}")),
                Err(e) => return self.rollback(snapshot, e.to_string()),
            };
            total += loss;
            self.steps += 1;
            if self.steps % self.config.target_sync_steps == 0 {
                self.qnet.sync_target();
                synced = true;
            }
        }
        UpdateReport {
            steps: self.config.steps_per_turn,
            mean_loss: Some(total / self.config.steps_per_turn as f64),
            target_synced: synced,
            error: None,
        }
    }

    fn rollback(&mut self, snapshot: (QNetwork, Optimizer, u64), error: String) -> UpdateReport {
        tracing::warn!(%error, "online update failed; parameters restored");
        (self.qnet, self.optimizer, self.steps) = snapshot;
        UpdateReport { error: Some(error), ..UpdateReport::default() }
    }
}

impl DecisionPolicy for AdaptivePolicy {
    fn q_values(&self, state: &StateVector) -> Result<[f64; NUM_ACTIONS], PolicyError> {
        self.qnet.q_values(state)
    }

    fn epsilon(&self) -> f64 {
        self.config.epsilon_for(self.session_index)
    }

    fn begin_session(&mut self, session_index: usize) {
        self.session_index = session_index.max(1);
    }

    fn observe(&mut self, transition: &Transition) -> UpdateReport {
        self.update_online(transition)
    }
}
