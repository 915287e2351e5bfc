use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CoacheeProfile, PopulationConfig, SimError, SimulatedCoachee};
use crate::dialogue::{run_session, DispatchMode, Script, SessionConfig, SessionEnv, SessionOutcome, VirtualClock};
use crate::domain::{ExerciseKind, StateNormalizer, Transition};
use crate::llm::{StubBackend, StubConfig};
use crate::policy::UniformRandomPolicy;
use crate::reward::{DurationStats, RewardComponents, RewardConfig, StatsSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub population: PopulationConfig,
    pub profiles: usize,
    pub sessions: usize,
    pub turn_limit: usize,
    pub reward: RewardConfig,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            population: PopulationConfig::default(),
            profiles: 5,
            sessions: 19,
            turn_limit: 8,
            reward: RewardConfig::default(),
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl CalibrationStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 0 { (sorted[mid - 1] + sorted[mid]) / 2.0 } else { sorted[mid] };
        Some(Self { count: values.len(), mean, std, median })
    }
}

/// A transition with the reward terms behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub transition: Transition,
    pub components: RewardComponents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCorpus {
    pub id: String,
    pub records: Vec<CorpusRecord>,
    pub normalizer: StateNormalizer,
    pub reward: RewardConfig,
    pub stats: CalibrationStats,
    pub profiles: Vec<CoacheeProfile>,
}

impl GeneratedCorpus {
    pub fn transitions(&self) -> Vec<Transition> {
        self.records.iter().map(|r| r.transition.clone()).collect()
    }

    pub fn shared_transitions(&self) -> Arc<[Transition]> {
        self.transitions().into()
    }
}

pub(crate) fn session_seed(seed: u64, a: usize, b: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((a as u64) << 32) ^ (b as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn run_all(
    cfg: &CorpusConfig,
    profiles: &[CoacheeProfile],
    normalizer: StateNormalizer,
) -> Result<Vec<SessionOutcome>, SimError> {
    let env = SessionEnv::new(
        Arc::new(Script::bundled()),
        Arc::new(StubBackend::new(StubConfig { seed: cfg.seed, ..StubConfig::default() })),
        normalizer,
        cfg.reward,
    );
    let jobs: Vec<(usize, usize)> =
        (0..profiles.len()).flat_map(|p| (1..=cfg.sessions).map(move |s| (p, s))).collect();
    jobs.par_iter()
        .map(|&(p, s)| {
            let profile = &profiles[p];
            let seed = session_seed(cfg.seed, p, s);
            let session = SessionConfig {
                session_id: format!("corpus-{}-{s:02}", profile.id),
                coachee_id: profile.id.clone(),
                exercise: ExerciseKind::ALL[(s - 1) % ExerciseKind::ALL.len()],
                session_index: s,
                turn_limit: cfg.turn_limit,
                dispatch: DispatchMode::Inline,
                seed,
                ..SessionConfig::default()
            };
            let mut coachee = SimulatedCoachee::new(profile.clone(), s, seed);
            let out = run_session(&session, &env, &mut coachee, &mut UniformRandomPolicy, &mut VirtualClock::new())
                .map_err(|e| SimError::Session(e.to_string()))?;
            if out.log.termination != crate::dialogue::TerminationReason::Completed {
                return Err(SimError::Session(format!(
                    "{} ended with {}",
                    session.session_id,
                    out.log.termination.name()
                )));
            }
            Ok(out)
        })
        .collect()
}

/// Logged sessions of simulated coachees under uniformly random actions.
/// A first pass measures the duration statistics used to normalize states;
/// the second pass replays the same seeds with those statistics.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<GeneratedCorpus, SimError> {
    if cfg.profiles == 0 || cfg.sessions == 0 {
        return Err(SimError::Config("corpus needs at least one profile and one session".into()));
    }
    let profiles = cfg.population.sample(cfg.profiles, "corpus", cfg.seed);
    for p in &profiles {
        p.validate()?;
    }
    let unit = DurationStats::new(0.0, 1.0, StatsSource::ReferenceCorpus).expect("unit stats");
    let first = run_all(cfg, &profiles, StateNormalizer { speech: unit, silence: unit })?;
    let inputs: Vec<_> = first.iter().flat_map(|o| o.log.turns.iter().filter_map(|t| t.input.as_ref())).collect();
    let speech: Vec<f64> = inputs.iter().map(|i| i.speech_duration_s).collect();
    let silence: Vec<f64> = inputs.iter().map(|i| i.silence_duration_s).collect();
    let stats = |v: &[f64]| {
        DurationStats::from_samples(v, StatsSource::ReferenceCorpus).map_err(|e| SimError::Config(e.to_string()))
    };
    let normalizer = StateNormalizer { speech: stats(&speech)?, silence: stats(&silence)? };

    let outcomes = run_all(cfg, &profiles, normalizer)?;
    let mut records = Vec::new();
    for out in outcomes {
        for t in out.transitions {
            let components = out
                .log
                .turns
                .iter()
                .find(|r| r.turn_index == t.turn_index)
                .and_then(|r| r.decision.as_ref())
                .map(|d| d.reward)
                .ok_or_else(|| SimError::Session(format!("turn {} has no decision", t.turn_index)))?;
            records.push(CorpusRecord { transition: t, components });
        }
    }
    let rewards: Vec<f64> = records.iter().map(|r| r.transition.reward).collect();
    let stats = CalibrationStats::of(&rewards).ok_or_else(|| SimError::Config("empty corpus".into()))?;
    Ok(GeneratedCorpus {
        id: format!("synthetic-{}x{}-seed{}", cfg.profiles, cfg.sessions, cfg.seed),
        records,
        normalizer,
        reward: cfg.reward,
        stats,
        profiles,
    })
}
