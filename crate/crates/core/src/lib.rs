//! Adaptive coaching dialogue engine.
//!
//! The crate chooses per-turn dialogue-flow actions with a Q-network that is
//! pretrained on a logged corpus and fine-tuned online per coachee, detects
//! interaction ruptures from windowed facial/audio feature streams, scaffolds
//! LLM-generated coach utterances behind a moderation gate, and ships a
//! simulated-coachee harness for longitudinal studies.

pub mod config;
pub mod dialogue;
pub mod domain;
pub mod llm;
pub mod neural;
pub mod policy;
pub mod reward;
pub mod rupture;
pub mod sim;
pub mod store;

pub use domain::{
    decode_action, encode_state, DialogueAction, ExerciseKind, StateNormalizer, StateVector,
    Transition, TurnObservation, NUM_ACTIONS, STATE_DIM,
};
