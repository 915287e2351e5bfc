//! Chat-completion and moderation clients, prompt construction and the
//! conversation history shared with the language model.

mod adversarial;
mod remote;
mod stub;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::DialogueAction;

pub use adversarial::{
    adversarial_suite, parse_corpus, AdversarialCase, AdversarialReport, AdversarialRow, DEFAULT_ADVERSARIAL_CORPUS,
};
pub use remote::{RemoteBackend, RemoteConfig};
pub use stub::{StubBackend, StubConfig};

/// What the coach says when either side of the exchange is flagged.
pub const REFUSAL_TEXT: &str =
    "I found your answer very inappropriate. I would stop here the coaching practice and call the researcher";

pub const SUMMARISE_PROMPT: &str = "Can you please summarise what the Human has just shared?";
pub const FOLLOW_UP_PROMPT: &str =
    "Can you please ask me a follow-up question about the exercise episode I have just shared?";
pub const NEW_EPISODE_PROMPT: &str = "Can you please ask me about a new episode to share?";

pub fn build_prompt(action: DialogueAction) -> &'static str {
    match action {
        DialogueAction::Summarise => SUMMARISE_PROMPT,
        DialogueAction::FollowUpQuestion => FOLLOW_UP_PROMPT,
        DialogueAction::NewEpisode => NEW_EPISODE_PROMPT,
    }
}

/// Recovers the action whose prompt ends `text`, if any.
pub fn action_of_prompt(text: &str) -> Option<DialogueAction> {
    DialogueAction::ALL.into_iter().find(|a| text.trim_end().ends_with(build_prompt(*a)))
}

/// Human turn sent to the model: the coachee's words followed by the action prompt.
pub fn compose_human_turn(transcript: &str, action: DialogueAction) -> String {
    let transcript = transcript.trim();
    if transcript.is_empty() {
        build_prompt(action).to_string()
    } else {
        format!("{transcript}\n\n{}", build_prompt(action))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("prompt must not be empty")]
    EmptyPrompt,
    #[error("text to moderate must not be empty")]
    EmptyText,
    #[error("request timed out after {0:.1}s")]
    Timeout(f64),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("service returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("missing credential: environment variable `{0}` is not set")]
    MissingCredential(String),
}

impl LlmError {
    /// Whether retrying the same request may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            LlmError::Timeout(_) | LlmError::Transport(_) => true,
            LlmError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    Human,
    Ai,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
}

/// System message first, then strictly alternating human/ai messages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatHistory {
    messages: Vec<ChatMessage>,
}

impl ChatHistory {
    pub fn new(system_context: impl Into<String>) -> Self {
        Self { messages: vec![ChatMessage { role: Role::System, text: system_context.into() }] }
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    pub fn system(&self) -> &str {
        &self.messages[0].text
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    /// Never true: the system message is always present.
    pub fn is_empty(&self) -> bool {
        false
    }

    fn push_exchange(&mut self, human: &str, ai: &str) {
        self.messages.push(ChatMessage { role: Role::Human, text: human.to_string() });
        self.messages.push(ChatMessage { role: Role::Ai, text: ai.to_string() });
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModerationVerdict {
    pub flagged: bool,
    pub categories: BTreeSet<String>,
}

impl ModerationVerdict {
    pub fn clean() -> Self {
        Self::default()
    }

    pub fn from_categories<I: IntoIterator<Item = S>, S: Into<String>>(categories: I) -> Self {
        let categories: BTreeSet<String> = categories.into_iter().map(Into::into).collect();
        Self { flagged: !categories.is_empty(), categories }
    }

    /// The verdict used when the moderation service itself failed.
    pub fn fail_closed() -> Self {
        Self::from_categories(["moderation-unavailable"])
    }
}

/// A chat-completion plus moderation service.
pub trait LlmBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Produces the assistant reply to `history` followed by the human turn `prompt`.
    fn complete_raw(&self, history: &ChatHistory, prompt: &str) -> Result<String, LlmError>;

    fn moderate_raw(&self, text: &str) -> Result<ModerationVerdict, LlmError>;
}

/// Completes the conversation and, on success, appends the exchange to `history`.
pub fn complete(backend: &dyn LlmBackend, history: &mut ChatHistory, prompt: &str) -> Result<String, LlmError> {
    if prompt.trim().is_empty() {
        return Err(LlmError::EmptyPrompt);
    }
    let reply = backend.complete_raw(history, prompt)?;
    history.push_exchange(prompt, &reply);
    Ok(reply)
}

pub fn moderate(backend: &dyn LlmBackend, text: &str) -> Result<ModerationVerdict, LlmError> {
    if text.trim().is_empty() {
        return Err(LlmError::EmptyText);
    }
    let verdict = backend.moderate_raw(text)?;
    // keep the flagged <=> non-empty invariant even for sloppy services
    if verdict.flagged && verdict.categories.is_empty() {
        return Ok(ModerationVerdict::from_categories(["unspecified"]));
    }
    Ok(ModerationVerdict { flagged: !verdict.categories.is_empty(), ..verdict })
}

/// Moderation that never lets an error through: failures come back flagged.
pub fn moderate_fail_closed(backend: &dyn LlmBackend, text: &str) -> (ModerationVerdict, Option<LlmError>) {
    if text.trim().is_empty() {
        return (ModerationVerdict::clean(), None);
    }
    match moderate(backend, text) {
        Ok(v) => (v, None),
        Err(e) => (ModerationVerdict::fail_closed(), Some(e)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Stub(StubConfig),
    Remote(RemoteConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Stub(StubConfig::default())
    }
}

impl BackendConfig {
    pub fn build(&self) -> Result<Arc<dyn LlmBackend>, LlmError> {
        Ok(match self {
            BackendConfig::Stub(c) => Arc::new(StubBackend::new(c.clone())),
            BackendConfig::Remote(c) => Arc::new(RemoteBackend::new(c.clone())?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompts_are_verbatim() {
        assert_eq!(
            build_prompt(DialogueAction::Summarise),
            "Can you please summarise what the Human has just shared?"
        );
        assert_eq!(
            build_prompt(DialogueAction::FollowUpQuestion),
            "Can you please ask me a follow-up question about the exercise episode I have just shared?"
        );
        assert_eq!(build_prompt(DialogueAction::NewEpisode), "Can you please ask me about a new episode to share?");
        for a in DialogueAction::ALL {
            assert_eq!(action_of_prompt(&compose_human_turn("I went running.", a)), Some(a));
        }
    }

    #[test]
    fn verdict_invariant() {
        assert!(!ModerationVerdict::clean().flagged);
        assert!(ModerationVerdict::from_categories(["violence"]).flagged);
        assert!(ModerationVerdict::fail_closed().flagged);
    }
}
