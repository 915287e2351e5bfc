//! Session orchestration: a 10 Hz behavior tree that runs the scripted
//! scaffold, gathers each coachee turn, asks the policy for a dialogue action,
//! routes the matching prompt through the language model behind the
//! moderation gate, and records everything in a [`SessionLog`].

mod bt;
mod clock;
mod script;
mod session;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DialogueAction, ExerciseKind, StateVector, Transition, TurnObservation, NUM_ACTIONS};
use crate::llm::ModerationVerdict;
use crate::policy::{select_action_with, ActionDraw, UpdateReport};
use crate::reward::{BaselineValence, RewardComponents};

pub use bt::{BehaviorTree, Node, Status};
pub use clock::{Clock, RealtimeClock, VirtualClock};
pub use script::{scripted_lines, CommonLines, ExerciseScript, Script, ScriptPhase, DEFAULT_SCRIPT};
pub use session::{run_session, SessionEnv, SessionMachine};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DialogueError {
    #[error("script error: {0}")]
    Script(String),
    #[error("invalid session config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminationReason {
    Completed,
    ModerationStop,
    Timeout,
    ClientDisconnect,
    /// An internal failure (policy, encoding, tick budget) ended the session.
    Error,
}

impl TerminationReason {
    pub fn name(self) -> &'static str {
        match self {
            TerminationReason::Completed => "completed",
            TerminationReason::ModerationStop => "moderation-stop",
            TerminationReason::Timeout => "timeout",
            TerminationReason::ClientDisconnect => "client-disconnect",
            TerminationReason::Error => "error",
        }
    }
}

/// How language-model and moderation calls are issued relative to the tick loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DispatchMode {
    /// Called synchronously inside the tick; used for simulations.
    Inline,
    /// Run on a worker thread and collected on a later tick.
    Threaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub session_id: String,
    pub coachee_id: String,
    pub exercise: ExerciseKind,
    /// 1-based week number.
    pub session_index: usize,
    pub turn_limit: usize,
    pub tick_rate_hz: f64,
    pub listen_timeout_s: f64,
    /// More consecutive unanswered turns than this end the session.
    pub max_silent_turns: usize,
    pub llm_retries: u32,
    pub retry_backoff_s: f64,
    pub dispatch: DispatchMode,
    pub debug_trace: bool,
    pub rupture_threshold: f64,
    pub seed: u64,
    pub max_ticks: Option<u64>,
    pub policy_ref: Option<String>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            session_id: "session".into(),
            coachee_id: "coachee".into(),
            exercise: ExerciseKind::Savouring,
            session_index: 1,
            turn_limit: 8,
            tick_rate_hz: 10.0,
            listen_timeout_s: 60.0,
            max_silent_turns: 2,
            llm_retries: 2,
            retry_backoff_s: 0.5,
            dispatch: DispatchMode::Threaded,
            debug_trace: false,
            rupture_threshold: 0.5,
            seed: 0,
            max_ticks: None,
            policy_ref: None,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), DialogueError> {
        if self.turn_limit == 0 {
            return Err(DialogueError::Config("turn_limit must be >= 1".into()));
        }
        if !(self.tick_rate_hz.is_finite() && self.tick_rate_hz > 0.0) {
            return Err(DialogueError::Config(format!("tick_rate_hz must be > 0, got {}", self.tick_rate_hz)));
        }
        if !(self.listen_timeout_s.is_finite() && self.listen_timeout_s > 0.0) {
            return Err(DialogueError::Config("listen_timeout_s must be > 0".into()));
        }
        if !(self.retry_backoff_s.is_finite() && self.retry_backoff_s >= 0.0) {
            return Err(DialogueError::Config("retry_backoff_s must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.rupture_threshold) {
            return Err(DialogueError::Config("rupture_threshold must lie in [0, 1]".into()));
        }
        if self.session_index == 0 {
            return Err(DialogueError::Config("session_index is 1-based".into()));
        }
        Ok(())
    }
}

/// Per-turn facial (rows of 35) and audio (rows of 25) feature windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnFeatures {
    pub facial: Vec<Vec<f64>>,
    pub audio: Vec<Vec<f64>>,
}

/// What the coachee channel delivers for one answer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CoacheeTurnInput {
    pub transcript: String,
    pub speech_duration_s: f64,
    pub silence_duration_s: f64,
    #[serde(default)]
    pub valence: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rupture_flag: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<TurnFeatures>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelPoll {
    Ready(CoacheeTurnInput),
    Pending,
    Disconnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UtteranceSource {
    Intro,
    FirstQuestion,
    Llm,
    Fallback,
    Reprompt,
    Refusal,
    Outro,
}

/// Coach-side events, in delivery order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    CoachUtterance {
        text: String,
        source: UtteranceSource,
        turn_index: Option<usize>,
        /// The dialogue action behind an LLM or fallback utterance.
        action: Option<DialogueAction>,
    },
    AwaitingInput {
        turn_index: usize,
    },
    DecisionTrace {
        turn_index: usize,
        action: DialogueAction,
        q_values: [f64; NUM_ACTIONS],
        epsilon: f64,
    },
    SessionEnd {
        reason: TerminationReason,
    },
}

/// The coachee side of a session: a simulated coachee, a socket, a test script.
pub trait CoacheeChannel {
    fn deliver(&mut self, event: &SessionEvent);

    /// Non-blocking check for the coachee's next answer.
    fn poll_input(&mut self) -> ChannelPoll;

    /// Valence samples observed while the scripted introduction played.
    fn intro_valence(&mut self) -> Vec<f64> {
        Vec::new()
    }
}

/// Probability of an interaction rupture given one turn's feature windows.
pub trait RuptureDetector: Send + Sync {
    fn ir_probability(&self, features: &TurnFeatures) -> Result<f64, String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuptureSource {
    Precomputed,
    Model,
    /// No flag and no usable model: the benign default.
    Default,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuptureReading {
    pub flag: bool,
    pub probability: Option<f64>,
    pub source: RuptureSource,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModerationCheck {
    pub verdict: ModerationVerdict,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub observation: TurnObservation,
    pub state: StateVector,
    pub reward: RewardComponents,
    pub q_values: [f64; NUM_ACTIONS],
    pub epsilon: f64,
    pub draw: ActionDraw,
    pub action: DialogueAction,
    pub prompt: String,
    /// Online update triggered by the previous turn's transition.
    pub update: Option<UpdateReport>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TurnTiming {
    pub awaiting_at_s: f64,
    pub input_at_s: Option<f64>,
    pub decided_at_s: Option<f64>,
    pub spoken_at_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn_index: usize,
    pub input: Option<CoacheeTurnInput>,
    pub reprompted: bool,
    pub silent: bool,
    /// Absent only for empty transcripts.
    pub input_moderation: Option<ModerationCheck>,
    pub rupture: Option<RuptureReading>,
    pub decision: Option<DecisionRecord>,
    pub llm_attempts: u32,
    pub llm_error: Option<String>,
    /// Present exactly when the utterance came from the language model.
    pub output_moderation: Option<ModerationCheck>,
    pub coach_utterance: Option<String>,
    pub utterance_source: Option<UtteranceSource>,
    pub timing: TurnTiming,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedUtterance {
    pub source: UtteranceSource,
    pub text: String,
    pub turn_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub session_id: String,
    pub coachee_id: String,
    pub exercise: ExerciseKind,
    pub session_index: usize,
    pub policy_ref: Option<String>,
    pub baseline: BaselineValence,
    /// Every coach utterance, in the order it was delivered.
    pub utterances: Vec<LoggedUtterance>,
    pub turns: Vec<TurnRecord>,
    pub termination: TerminationReason,
    pub error: Option<String>,
    pub ticks: u64,
    pub duration_s: f64,
}

impl SessionLog {
    /// Turns in which the policy chose an action.
    pub fn decision_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.decision.is_some()).count()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.turns.iter().filter_map(|t| t.decision.as_ref().map(|d| d.reward.total)).collect()
    }

    pub fn mean_reward(&self) -> Option<f64> {
        let r = self.rewards();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }

    /// Re-derives every logged action from its logged q-values and draw.
    pub fn verify_decisions(&self) -> Result<(), String> {
        for t in &self.turns {
            if let Some(d) = &t.decision {
                let replayed = select_action_with(&d.q_values, d.epsilon, d.draw);
                if replayed != d.action {
                    return Err(format!(
                        "turn {}: logged {} but q-values replay to {}",
                        t.turn_index,
                        d.action.name(),
                        replayed.name()
                    ));
                }
            }
        }
        Ok(())
    }

    /// One input check per non-empty transcript, one output check per LLM utterance.
    pub fn verify_moderation(&self) -> Result<(), String> {
        for t in &self.turns {
            let spoke = t.input.as_ref().is_some_and(|i| !i.transcript.trim().is_empty());
            if spoke != t.input_moderation.is_some() {
                return Err(format!("turn {}: input moderation does not match transcript", t.turn_index));
            }
            let from_llm = t.decision.is_some() && t.llm_error.is_none() && t.llm_attempts > 0
                && t.utterance_source != Some(UtteranceSource::Fallback);
            if from_llm != t.output_moderation.is_some() {
                return Err(format!("turn {}: output moderation does not match utterance", t.turn_index));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub log: SessionLog,
    pub transitions: Vec<Transition>,
}
