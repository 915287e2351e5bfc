//! Simulated coachees: parametric response models, a channel that plugs them
//! into the session orchestrator, the synthetic pretraining corpus, and the
//! multi-session study runner.

mod corpus;
mod study;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{ChannelPoll, CoacheeChannel, CoacheeTurnInput, SessionEvent, UtteranceSource};
use crate::domain::DialogueAction;

pub use corpus::{generate_corpus, CalibrationStats, CorpusConfig, CorpusRecord, GeneratedCorpus};
pub use study::{
    linear_slope, run_study, sign_test_one_sided, ArmReport, CoacheeSessions, PolicyArm, ReplicationResult,
    SessionStat, SignTest, StudyConfig, StudyReport,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("invalid study config: {0}")]
    Config(String),
    #[error("session failed: {0}")]
    Session(String),
    #[error("training failed: {0}")]
    Policy(String),
}

/// How a coachee reacts to the action that preceded their answer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActionAffinity {
    pub valence: f64,
    pub speech_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AffinityTable {
    pub summarise: ActionAffinity,
    pub follow_up_question: ActionAffinity,
    pub new_episode: ActionAffinity,
}

impl AffinityTable {
    pub fn get(&self, action: DialogueAction) -> ActionAffinity {
        match action {
            DialogueAction::Summarise => self.summarise,
            DialogueAction::FollowUpQuestion => self.follow_up_question,
            DialogueAction::NewEpisode => self.new_episode,
        }
    }

    pub fn set(&mut self, action: DialogueAction, value: ActionAffinity) {
        match action {
            DialogueAction::Summarise => self.summarise = value,
            DialogueAction::FollowUpQuestion => self.follow_up_question = value,
            DialogueAction::NewEpisode => self.new_episode = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoacheeProfile {
    pub id: String,
    pub base_valence: f64,
    /// Extra valence while the scripted introduction plays.
    pub greeting_lift: f64,
    pub talk_mean_s: f64,
    pub talk_std_s: f64,
    pub silence_mean_s: f64,
    pub silence_std_s: f64,
    pub affinity: AffinityTable,
    /// Valence change per session after the first.
    pub engagement_drift: f64,
    pub noise_std: f64,
    pub valence_samples: usize,
    pub rupture_rate: f64,
    pub seed: u64,
}

impl CoacheeProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        let finite = [
            self.base_valence,
            self.greeting_lift,
            self.talk_mean_s,
            self.talk_std_s,
            self.silence_mean_s,
            self.silence_std_s,
            self.engagement_drift,
            self.noise_std,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Profile(format!("{}: non-finite parameter", self.id)));
        }
        if !(-1.0..=1.0).contains(&self.base_valence) {
            return Err(SimError::Profile(format!("{}: base_valence outside [-1, 1]", self.id)));
        }
        if self.talk_std_s < 0.0 || self.silence_std_s < 0.0 || self.noise_std < 0.0 {
            return Err(SimError::Profile(format!("{}: negative spread", self.id)));
        }
        if self.valence_samples == 0 {
            return Err(SimError::Profile(format!("{}: valence_samples must be >= 1", self.id)));
        }
        if !(0.0..=1.0).contains(&self.rupture_rate) {
            return Err(SimError::Profile(format!("{}: rupture_rate outside [0, 1]", self.id)));
        }
        Ok(())
    }
}

const TRANSCRIPTS: [&str; 12] = [
    "I went for a long walk by the river and the light was beautiful.",
    "My friend cooked dinner for me and we talked for hours.",
    "I finally finished a project at work that had been dragging on.",
    "I had a quiet coffee in the morning before anyone else woke up.",
    "My brother sent me a photo from our old holidays.",
    "I helped a neighbour carry their shopping upstairs.",
    "I tried a new yoga class and felt really relaxed afterwards.",
    "A stranger held the door and smiled at me.",
    "I read a chapter of a book I love.",
    "My team said thank you for the work I did last week.",
    "I cleaned the flat and it felt like a fresh start.",
    "I called my grandmother and she told me a funny story.",
];

fn normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        return mean;
    }
    Normal::new(mean, std).expect("finite std").sample(rng)
}

/// One simulated answer to whatever `action` produced the last coach line
/// (`None` for the scripted first question).
pub fn coachee_respond(
    profile: &CoacheeProfile,
    action: Option<DialogueAction>,
    session_index: usize,
    rng: &mut ChaCha8Rng,
) -> CoacheeTurnInput {
    let aff = action.map(|a| profile.affinity.get(a)).unwrap_or_default();
    let drift = profile.engagement_drift * session_index.saturating_sub(1) as f64;
    let centre = profile.base_valence + aff.valence + drift;
    let valence = (0..profile.valence_samples)
        .map(|_| normal(rng, centre, profile.noise_std).clamp(-1.0, 1.0))
        .collect();
    let speech = normal(rng, profile.talk_mean_s + aff.speech_s, profile.talk_std_s).max(0.0);
    let silence = normal(rng, profile.silence_mean_s, profile.silence_std_s).max(0.0);
    let rupture = rng.random_bool(profile.rupture_rate);
    CoacheeTurnInput {
        transcript: TRANSCRIPTS.choose(rng).expect("non-empty bank").to_string(),
        speech_duration_s: speech,
        silence_duration_s: silence,
        valence,
        rupture_flag: Some(rupture),
        features: None,
    }
}

/// Intro-phase valence, used for the session baseline.
pub fn intro_valence(profile: &CoacheeProfile, session_index: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let drift = profile.engagement_drift * session_index.saturating_sub(1) as f64;
    let centre = profile.base_valence + profile.greeting_lift + drift;
    (0..profile.valence_samples).map(|_| normal(rng, centre, profile.noise_std).clamp(-1.0, 1.0)).collect()
}

/// Answers every `awaiting_input` immediately, reacting to the last action.
#[derive(Debug, Clone)]
pub struct SimulatedCoachee {
    profile: CoacheeProfile,
    session_index: usize,
    rng: ChaCha8Rng,
    last_action: Option<DialogueAction>,
    waiting: bool,
    pub events: Vec<SessionEvent>,
}

impl SimulatedCoachee {
    pub fn new(profile: CoacheeProfile, session_index: usize, seed: u64) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(profile.seed ^ seed.rotate_left(17) ^ (session_index as u64) << 48);
        Self { profile, session_index, rng, last_action: None, waiting: false, events: Vec::new() }
    }

    pub fn profile(&self) -> &CoacheeProfile {
        &self.profile
    }
}

impl CoacheeChannel for SimulatedCoachee {
    fn deliver(&mut self, event: &SessionEvent) {
        match event {
            SessionEvent::AwaitingInput { .. } => self.waiting = true,
            SessionEvent::CoachUtterance { source: UtteranceSource::Llm | UtteranceSource::Fallback, action, .. } => {
                self.last_action = *action;
            }
            _ => {}
        }
        self.events.push(event.clone());
    }

    fn poll_input(&mut self) -> ChannelPoll {
        if !self.waiting {
            return ChannelPoll::Pending;
        }
        self.waiting = false;
        ChannelPoll::Ready(coachee_respond(&self.profile, self.last_action, self.session_index, &mut self.rng))
    }

    fn intro_valence(&mut self) -> Vec<f64> {
        intro_valence(&self.profile, self.session_index, &mut self.rng)
    }
}

/// Distribution of coachee profiles. Every sampled coachee prefers one
/// action, drawn uniformly, which raises valence and speech time in the
/// answer that follows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationConfig {
    pub base_valence_mean: f64,
    pub base_valence_std: f64,
    pub greeting_lift_mean: f64,
    pub greeting_lift_std: f64,
    pub talk_mean_s: f64,
    pub talk_between_std_s: f64,
    pub talk_within_std_s: f64,
    pub silence_mean_s: f64,
    pub silence_between_std_s: f64,
    pub silence_within_std_s: f64,
    pub preferred: ActionAffinity,
    pub other: ActionAffinity,
    pub engagement_drift: f64,
    pub noise_std: f64,
    pub valence_samples: usize,
    pub rupture_rate: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            base_valence_mean: 0.1,
            base_valence_std: 0.1,
            greeting_lift_mean: 0.25,
            greeting_lift_std: 0.05,
            talk_mean_s: 25.0,
            talk_between_std_s: 8.0,
            talk_within_std_s: 6.0,
            silence_mean_s: 2.5,
            silence_between_std_s: 0.8,
            silence_within_std_s: 1.0,
            preferred: ActionAffinity { valence: 0.15, speech_s: 6.0 },
            other: ActionAffinity { valence: -0.05, speech_s: -2.0 },
            engagement_drift: 0.0,
            noise_std: 0.15,
            valence_samples: 5,
            rupture_rate: 0.1,
        }
    }
}

impl PopulationConfig {
    pub fn sample(&self, n: usize, prefix: &str, seed: u64) -> Vec<CoacheeProfile> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let preferred = DialogueAction::ALL[rng.random_range(0..DialogueAction::ALL.len())];
                let mut affinity = AffinityTable::default();
                for a in DialogueAction::ALL {
                    affinity.set(a, if a == preferred { self.preferred } else { self.other });
                }
                CoacheeProfile {
                    id: format!("{prefix}-{i:02}"),
                    base_valence: normal(&mut rng, self.base_valence_mean, self.base_valence_std).clamp(-0.9, 0.9),
                    greeting_lift: normal(&mut rng, self.greeting_lift_mean, self.greeting_lift_std),
                    talk_mean_s: normal(&mut rng, self.talk_mean_s, self.talk_between_std_s).max(3.0),
                    talk_std_s: self.talk_within_std_s,
                    silence_mean_s: normal(&mut rng, self.silence_mean_s, self.silence_between_std_s).max(0.2),
                    silence_std_s: self.silence_within_std_s,
                    affinity,
                    engagement_drift: self.engagement_drift,
                    noise_std: self.noise_std,
                    valence_samples: self.valence_samples,
                    rupture_rate: self.rupture_rate,
                    seed: rng.random(),
                }
            })
            .collect()
    }
}
