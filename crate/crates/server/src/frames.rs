//! WebSocket frame schema. `contract/frames.json` mirrors it for clients.

use coach_core::dialogue::{CoacheeTurnInput, SessionEvent, TerminationReason, TurnFeatures, UtteranceSource};
use coach_core::domain::{DialogueAction, NUM_ACTIONS};
use serde::{Deserialize, Serialize};

pub const FRAME_PROTOCOL_VERSION: u32 = 1;

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    CoachUtterance {
        text: String,
        source: UtteranceSource,
        turn_index: Option<usize>,
        /// Only present on debug sessions.
        #[serde(default, skip_serializing_if = "Option::is_none")]
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
    Error {
        code: String,
        message: String,
    },
}

impl ServerFrame {
    pub fn error(code: &str, message: impl Into<String>) -> Self {
        ServerFrame::Error { code: code.to_string(), message: message.into() }
    }

    /// Maps a session event to its frame; decision traces and actions are dropped unless `debug`.
    pub fn from_event(event: &SessionEvent, debug: bool) -> Option<Self> {
        Some(match event.clone() {
            SessionEvent::CoachUtterance { text, source, turn_index, action } => {
                ServerFrame::CoachUtterance { text, source, turn_index, action: action.filter(|_| debug) }
            }
            SessionEvent::AwaitingInput { turn_index } => ServerFrame::AwaitingInput { turn_index },
            SessionEvent::DecisionTrace { turn_index, action, q_values, epsilon } => {
                if !debug {
                    return None;
                }
                ServerFrame::DecisionTrace { turn_index, action, q_values, epsilon }
            }
            SessionEvent::SessionEnd { reason } => ServerFrame::SessionEnd { reason },
        })
    }
}

/// Client to server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientFrame {
    CoacheeUtterance(CoacheeUtterance),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoacheeUtterance {
    pub text: String,
    #[serde(default)]
    pub speech_duration_s: Option<f64>,
    #[serde(default)]
    pub silence_duration_s: Option<f64>,
    /// Facial valence samples in `[-1, 1]` for this answer.
    #[serde(default)]
    pub valence: Option<Vec<f64>>,
    #[serde(default)]
    pub features: Option<TurnFeatures>,
}

/// Fills what a text-only client cannot measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextOnlyDefaults {
    pub words_per_second: f64,
    pub neutral_valence: f64,
    pub neutral_samples: usize,
}

impl CoacheeUtterance {
    pub fn validate(&self) -> Result<(), String> {
        if self.text.trim().is_empty() {
            return Err("text must not be empty".into());
        }
        let dur_ok = |d: Option<f64>| d.is_none_or(|d| d.is_finite() && d >= 0.0);
        if !dur_ok(self.speech_duration_s) || !dur_ok(self.silence_duration_s) {
            return Err("durations must be finite and non-negative".into());
        }
        if let Some(v) = &self.valence {
            if v.iter().any(|x| !(x.is_finite() && (-1.0..=1.0).contains(x))) {
                return Err("valence samples must lie in [-1, 1]".into());
            }
        }
        Ok(())
    }

    /// `latency_s` is the time from the awaiting prompt to this frame. Without
    /// client measurements, speech lasts `words / words_per_second` and
    /// silence is the latency not spent speaking.
    pub fn into_turn_input(self, latency_s: f64, d: &TextOnlyDefaults) -> CoacheeTurnInput {
        let words = self.text.split_whitespace().count() as f64;
        let speech = self.speech_duration_s.unwrap_or(words / d.words_per_second);
        let silence = self.silence_duration_s.unwrap_or((latency_s - speech).max(0.0));
        let valence = self.valence.unwrap_or_else(|| vec![d.neutral_valence; d.neutral_samples]);
        CoacheeTurnInput {
            transcript: self.text,
            speech_duration_s: speech,
            silence_duration_s: silence,
            valence,
            rupture_flag: None,
            features: self.features,
        }
    }
}
