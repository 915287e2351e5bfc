//! Domain types shared across the engine and the canonical policy observation encoding.
//!
//! The observation vector has eleven entries laid out as
//!
//! | index | content                                   |
//! |-------|-------------------------------------------|
//! | 0..2  | rupture one-hot `[absent, present]`       |
//! | 2..6  | exercise one-hot (codes 0..3)             |
//! | 6     | z-normalized speech duration (clipped ±5) |
//! | 7     | z-normalized silence duration (clipped ±5)|
//! | 8..11 | previous-action one-hot, all-zero on turn 1 |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::DurationStats;

pub const STATE_DIM: usize = 11;
pub const NUM_ACTIONS: usize = 3;
/// Bound applied to z-scored durations before they enter the state.
pub const STATE_Z_CLIP: f64 = 5.0;

const IR_OFFSET: usize = 0;
const EXERCISE_OFFSET: usize = 2;
const SPEECH_INDEX: usize = 6;
const SILENCE_INDEX: usize = 7;
const PREV_ACTION_OFFSET: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("action index {0} out of range (expected 0..=2)")]
    ActionOutOfRange(usize),
    #[error("exercise code {0} out of range (expected 0..=3)")]
    ExerciseOutOfRange(usize),
    #[error("unknown exercise `{0}`; valid names: savouring, gratitude, accomplishment, one-door-closes-one-door-opens")]
    UnknownExercise(String),
    #[error("unknown action `{0}`; valid names: summarise, follow-up-question, new-episode")]
    UnknownAction(String),
    #[error("{field} must be finite and non-negative, got {value}")]
    InvalidDuration { field: &'static str, value: f64 },
    #[error("state vector must have {STATE_DIM} entries, got {0}")]
    StateLength(usize),
    #[error("state vector entry {index} is not finite")]
    NonFiniteState { index: usize },
}

/// The four positive-psychology exercises, one per weekly session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExerciseKind {
    Savouring,
    Gratitude,
    Accomplishment,
    OneDoorClosesOneDoorOpens,
}

impl ExerciseKind {
    pub const ALL: [ExerciseKind; 4] = [
        ExerciseKind::Savouring,
        ExerciseKind::Gratitude,
        ExerciseKind::Accomplishment,
        ExerciseKind::OneDoorClosesOneDoorOpens,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self, DomainError> {
        Self::ALL
            .get(code)
            .copied()
            .ok_or(DomainError::ExerciseOutOfRange(code))
    }

    pub fn name(self) -> &'static str {
        match self {
            ExerciseKind::Savouring => "savouring",
            ExerciseKind::Gratitude => "gratitude",
            ExerciseKind::Accomplishment => "accomplishment",
            ExerciseKind::OneDoorClosesOneDoorOpens => "one-door-closes-one-door-opens",
        }
    }
}

impl fmt::Display for ExerciseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExerciseKind {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        Self::ALL
            .into_iter()
            .find(|e| e.name() == norm || (norm == "onedoorclosesonedooropens" && e.code() == 3))
            .ok_or_else(|| DomainError::UnknownExercise(s.to_string()))
    }
}

/// The coach's per-turn dialogue-flow choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DialogueAction {
    Summarise = 0,
    FollowUpQuestion = 1,
    NewEpisode = 2,
}

impl DialogueAction {
    pub const ALL: [DialogueAction; NUM_ACTIONS] = [
        DialogueAction::Summarise,
        DialogueAction::FollowUpQuestion,
        DialogueAction::NewEpisode,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DialogueAction::Summarise => "summarise",
            DialogueAction::FollowUpQuestion => "follow-up-question",
            DialogueAction::NewEpisode => "new-episode",
        }
    }
}

impl fmt::Display for DialogueAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DialogueAction {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        Self::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| DomainError::UnknownAction(s.to_string()))
    }
}

pub fn decode_action(index: usize) -> Result<DialogueAction, DomainError> {
    DialogueAction::ALL
        .get(index)
        .copied()
        .ok_or(DomainError::ActionOutOfRange(index))
}

/// Raw per-turn features collected once the coachee has answered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnObservation {
    pub rupture_flag: bool,
    pub exercise: ExerciseKind,
    pub speech_duration_s: f64,
    pub silence_duration_s: f64,
    pub previous_action: Option<DialogueAction>,
    pub turn_index: usize,
}

/// Normalization statistics for both duration entries of the state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateNormalizer {
    pub speech: DurationStats,
    pub silence: DurationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct StateVector([f64; STATE_DIM]);

impl StateVector {
    pub fn new(values: [f64; STATE_DIM]) -> Result<Self, DomainError> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(DomainError::NonFiniteState { index });
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self, DomainError> {
        let arr: [f64; STATE_DIM] = values
            .try_into()
            .map_err(|_| DomainError::StateLength(values.len()))?;
        Self::new(arr)
    }

    pub fn zeros() -> Self {
        Self([0.0; STATE_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn values(&self) -> &[f64; STATE_DIM] {
        &self.0
    }

    pub fn rupture_block(&self) -> &[f64] {
        &self.0[IR_OFFSET..EXERCISE_OFFSET]
    }

    pub fn exercise_block(&self) -> &[f64] {
        &self.0[EXERCISE_OFFSET..SPEECH_INDEX]
    }

    pub fn previous_action_block(&self) -> &[f64] {
        &self.0[PREV_ACTION_OFFSET..]
    }

    pub fn speech_z(&self) -> f64 {
        self.0[SPEECH_INDEX]
    }

    pub fn silence_z(&self) -> f64 {
        self.0[SILENCE_INDEX]
    }
}

impl TryFrom<Vec<f64>> for StateVector {
    type Error = DomainError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::from_slice(&v)
    }
}

impl From<StateVector> for Vec<f64> {
    fn from(s: StateVector) -> Self {
        s.0.to_vec()
    }
}

fn z_clipped(value: f64, stats: &DurationStats) -> f64 {
    ((value - stats.mean_s) / stats.std_s).clamp(-STATE_Z_CLIP, STATE_Z_CLIP)
}

pub fn encode_state(
    obs: &TurnObservation,
    normalizer: &StateNormalizer,
) -> Result<StateVector, DomainError> {
    for (field, value) in [
        ("speech_duration_s", obs.speech_duration_s),
        ("silence_duration_s", obs.silence_duration_s),
    ] {
        if !value.is_finite() || value < 0.0 {
            return Err(DomainError::InvalidDuration { field, value });
        }
    }
    let mut v = [0.0; STATE_DIM];
    v[IR_OFFSET + usize::from(obs.rupture_flag)] = 1.0;
    v[EXERCISE_OFFSET + obs.exercise.code()] = 1.0;
    v[SPEECH_INDEX] = z_clipped(obs.speech_duration_s, &normalizer.speech);
    v[SILENCE_INDEX] = z_clipped(obs.silence_duration_s, &normalizer.silence);
    if let Some(prev) = obs.previous_action {
        v[PREV_ACTION_OFFSET + prev.code()] = 1.0;
    }
    StateVector::new(v)
}

/// One `(s, a, r, s', done)` learning record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: StateVector,
    pub action: DialogueAction,
    pub reward: f64,
    pub next_state: StateVector,
    pub done: bool,
    pub coachee_id: String,
    pub session_index: usize,
    pub turn_index: usize,
}
