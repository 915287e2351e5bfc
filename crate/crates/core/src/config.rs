//! TOML configuration shared by the CLI, the server and the simulator.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::SessionConfig;
use crate::llm::BackendConfig;
use crate::policy::{Algorithm, OnlineConfig, QLearningConfig};
use crate::reward::RewardConfig;
use crate::rupture::{CvConfig, Fusion, RuptureModelKind, SynthConfig};
use crate::sim::{CorpusConfig, StudyConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSection {
    pub algorithm: Algorithm,
    #[serde(flatten)]
    pub q: QLearningConfig,
}

impl Default for BatchSection {
    fn default() -> Self {
        Self { algorithm: Algorithm::Dqn, q: QLearningConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuptureSection {
    pub model: RuptureModelKind,
    pub fusion: Fusion,
    /// NearMiss neighbours.
    pub nearmiss_k: usize,
    pub cv: CvConfig,
    pub synth: SynthConfig,
}

impl Default for RuptureSection {
    fn default() -> Self {
        Self {
            model: RuptureModelKind::Bilstm,
            fusion: Fusion::Late,
            nearmiss_k: 3,
            cv: CvConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    /// Directory holding `<name>.ckpt` policy checkpoints.
    pub checkpoint_dir: PathBuf,
    /// Checkpoint used when a request names none.
    pub default_checkpoint: String,
    /// Session logs are appended here as JSONL, one file per server run.
    pub log_path: PathBuf,
    /// Name of the environment variable holding the bearer token; unset disables auth.
    pub auth_token_env: Option<String>,
    /// Text-only clients: speech duration is estimated from word count.
    pub words_per_second: f64,
    /// Text-only clients: valence used for every sample.
    pub neutral_valence: f64,
    /// Valence samples synthesised per text-only turn.
    pub neutral_samples: usize,
    pub allow_remote_backend: bool,
    /// Generic transitions mixed into adaptive replay (JSONL); none means own transitions only.
    pub replay_corpus: Option<PathBuf>,
    /// Rupture detector checkpoint for clients that stream features.
    pub rupture_detector: Option<PathBuf>,
    /// Adaptive policies are saved here per coachee after each session.
    pub coachee_dir: PathBuf,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            checkpoint_dir: PathBuf::from("checkpoints"),
            default_checkpoint: "generic".into(),
            log_path: PathBuf::from("logs/sessions.jsonl"),
            auth_token_env: None,
            words_per_second: 2.5,
            neutral_valence: 0.0,
            neutral_samples: 5,
            allow_remote_backend: true,
            replay_corpus: None,
            rupture_detector: None,
            coachee_dir: PathBuf::from("checkpoints/coachees"),
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.words_per_second.is_finite() && self.words_per_second > 0.0) {
            return Err(ConfigError::Invalid("server.words_per_second must be > 0".into()));
        }
        if !(-1.0..=1.0).contains(&self.neutral_valence) {
            return Err(ConfigError::Invalid("server.neutral_valence must lie in [-1, 1]".into()));
        }
        if self.neutral_samples == 0 {
            return Err(ConfigError::Invalid("server.neutral_samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub seed: u64,
    /// Worker threads for parallel sections; unset uses all cores.
    pub jobs: Option<usize>,
    pub reward: RewardConfig,
    /// Template for every live or simulated session.
    pub session: SessionConfig,
    pub llm: BackendConfig,
    pub batch: BatchSection,
    pub online: OnlineConfig,
    pub rupture: RuptureSection,
    pub corpus: CorpusConfig,
    pub study: StudyConfig,
    pub server: ServerConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            jobs: None,
            reward: RewardConfig::default(),
            session: SessionConfig::default(),
            llm: BackendConfig::default(),
            batch: BatchSection::default(),
            online: OnlineConfig::default(),
            rupture: RuptureSection::default(),
            corpus: CorpusConfig::default(),
            study: StudyConfig::default(),
            server: ServerConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section: &str, e: &dyn std::fmt::Display| ConfigError::Invalid(format!("{section}: {e}"));
        self.reward.validate().map_err(|e| invalid("reward", &e))?;
        self.session.validate().map_err(|e| invalid("session", &e))?;
        self.batch.q.validate().map_err(|e| invalid("batch", &e))?;
        self.online.validate().map_err(|e| invalid("online", &e))?;
        self.study.validate().map_err(|e| invalid("study", &e))?;
        if self.rupture.nearmiss_k == 0 {
            return Err(ConfigError::Invalid("rupture.nearmiss_k must be >= 1".into()));
        }
        if self.corpus.profiles == 0 || self.corpus.sessions == 0 {
            return Err(ConfigError::Invalid("corpus needs at least one profile and one session".into()));
        }
        if self.jobs == Some(0) {
            return Err(ConfigError::Invalid("jobs must be >= 1".into()));
        }
        self.server.validate()
    }
}
