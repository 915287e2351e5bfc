use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{action_of_prompt, ChatHistory, LlmBackend, LlmError, ModerationVerdict};
use crate::domain::DialogueAction;

/// Hermetic backend: template replies and keyword moderation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubConfig {
    pub seed: u64,
    /// The first N completion calls fail with a transport error.
    pub fail_completions: u32,
    /// Every moderation call fails with a timeout.
    pub fail_moderation: bool,
    /// Artificial latency per call.
    pub latency_ms: u64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self { seed: 0, fail_completions: 0, fail_moderation: false, latency_ms: 0 }
    }
}

const OPENERS: [&str; 4] = [
    "That's wonderful to hear.",
    "Thank you for sharing that.",
    "That sounds really meaningful.",
    "I appreciate you telling me about it.",
];

const SUMMARIES: [&str; 4] = [
    "So you noticed a moment that mattered to you and took the time to enjoy it.",
    "It sounds like this experience brought you some calm and a sense of connection.",
    "You described something positive and how it left you feeling afterwards.",
    "In short, this was a small but important good moment in your week.",
];

const FOLLOW_UPS: [&str; 4] = [
    "How did you feel right after it happened?",
    "What do you think made that moment stand out for you?",
    "Did it change anything about the rest of your day?",
    "Who else was part of that experience?",
];

const NEW_EPISODES: [&str; 4] = [
    "Can you please tell me about another moment you would like to share?",
    "Is there another small thing from the last week you could tell me about?",
    "Could you think of a different episode from the past few days?",
    "What is another example that comes to mind?",
];

// (category, phrases); single-word entries also match inflections ("punched").
const KEYWORDS: &[(&str, &[&str])] = &[
    (
        "violence",
        &[
            "punch", "kill", "murder", "stab", "beat up", "shoot", "strangle", "assault", "hit him",
            "hit her", "hit someone", "attack", "smash his", "smash her", "torture",
        ],
    ),
    (
        "self-harm",
        &["hurt myself", "harm myself", "kill myself", "suicide", "suicidal", "end my life", "cut myself", "self-harm", "overdose"],
    ),
    ("sexual", &["sexual", "explicit sex", "nude", "porn"]),
    ("harassment", &["worthless idiot", "hate you", "shut up you", "go die", "stupid robot"]),
];

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn phrase_matches(words: &[String], phrase: &str) -> bool {
    let parts: Vec<&str> = phrase.split(' ').collect();
    if parts.len() == 1 {
        return words.iter().any(|w| w.starts_with(parts[0]));
    }
    words.windows(parts.len()).any(|win| win.iter().zip(&parts).all(|(w, p)| w == p))
}

/// Categories triggered by `text` under the stub's keyword lists.
pub fn keyword_categories(text: &str) -> Vec<&'static str> {
    let words = tokens(text);
    KEYWORDS
        .iter()
        .filter(|(_, phrases)| phrases.iter().any(|p| phrase_matches(&words, p)))
        .map(|(c, _)| *c)
        .collect()
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

#[derive(Debug)]
pub struct StubBackend {
    config: StubConfig,
    completions: AtomicU32,
}

impl StubBackend {
    pub fn new(config: StubConfig) -> Self {
        Self { config, completions: AtomicU32::new(0) }
    }

    fn pause(&self) {
        if self.config.latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.config.latency_ms));
        }
    }

    fn rng_for(&self, history: &ChatHistory, prompt: &str) -> ChaCha8Rng {
        let mut h = 0xcbf2_9ce4_8422_2325 ^ self.config.seed;
        for m in history.messages() {
            h = fnv1a(m.text.as_bytes(), h);
        }
        ChaCha8Rng::seed_from_u64(fnv1a(prompt.as_bytes(), h))
    }
}

impl LlmBackend for StubBackend {
    fn name(&self) -> &str {
        "stub"
    }

    fn complete_raw(&self, history: &ChatHistory, prompt: &str) -> Result<String, LlmError> {
        self.pause();
        let n = self.completions.fetch_add(1, Ordering::SeqCst);
        if n < self.config.fail_completions {
            return Err(LlmError::Transport(format!("injected failure {} of {}", n + 1, self.config.fail_completions)));
        }
        let mut rng = self.rng_for(history, prompt);
        let pick = |rng: &mut ChaCha8Rng, bank: &[&'static str]| *bank.choose(rng).expect("non-empty bank");
        let reply = match action_of_prompt(prompt) {
            Some(DialogueAction::Summarise) => pick(&mut rng, &SUMMARIES).to_string(),
            Some(DialogueAction::FollowUpQuestion) => {
                format!("{} {}", pick(&mut rng, &OPENERS), pick(&mut rng, &FOLLOW_UPS))
            }
            Some(DialogueAction::NewEpisode) => pick(&mut rng, &NEW_EPISODES).to_string(),
            None => pick(&mut rng, &OPENERS).to_string(),
        };
        Ok(reply)
    }

    fn moderate_raw(&self, text: &str) -> Result<ModerationVerdict, LlmError> {
        self.pause();
        if self.config.fail_moderation {
            return Err(LlmError::Timeout(0.0));
        }
        Ok(ModerationVerdict::from_categories(keyword_categories(text)))
    }
}
