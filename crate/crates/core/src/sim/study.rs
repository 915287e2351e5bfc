use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::{session_seed, CalibrationStats};
use super::{CoacheeProfile, PopulationConfig, SimError, SimulatedCoachee};
use crate::dialogue::{run_session, DispatchMode, SessionConfig, SessionEnv, VirtualClock};
use crate::domain::{ExerciseKind, Transition, NUM_ACTIONS};
use crate::policy::{fork_for_coachee, AdaptivePolicy, DecisionPolicy, FrozenPolicy, OnlineConfig, PolicyCheckpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyArm {
    GenericFrozen,
    Adaptive,
}

impl PolicyArm {
    pub fn name(self) -> &'static str {
        match self {
            PolicyArm::GenericFrozen => "generic-frozen",
            PolicyArm::Adaptive => "adaptive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub population: PopulationConfig,
    /// Fixed coachees; when empty, each replication samples `coachees` from the population.
    pub profiles: Vec<CoacheeProfile>,
    pub coachees: usize,
    pub sessions: usize,
    pub exercises: Vec<ExerciseKind>,
    pub arms: Vec<PolicyArm>,
    pub replications: usize,
    pub turn_limit: usize,
    pub online: OnlineConfig,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            population: PopulationConfig::default(),
            profiles: Vec::new(),
            coachees: 17,
            sessions: 4,
            exercises: ExerciseKind::ALL.to_vec(),
            arms: vec![PolicyArm::GenericFrozen, PolicyArm::Adaptive],
            replications: 20,
            turn_limit: 8,
            online: OnlineConfig::default(),
            seed: 99,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.sessions == 0 {
            return Err(SimError::Config("sessions must be >= 1".into()));
        }
        if self.arms.is_empty() {
            return Err(SimError::Config("at least one arm is required".into()));
        }
        if self.exercises.is_empty() {
            return Err(SimError::Config("exercise order is empty".into()));
        }
        if self.replications == 0 {
            return Err(SimError::Config("replications must be >= 1".into()));
        }
        if self.profiles.is_empty() && self.coachees == 0 {
            return Err(SimError::Config("no coachees".into()));
        }
        for p in &self.profiles {
            p.validate()?;
        }
        self.online.validate().map_err(|e| SimError::Config(e.to_string()))
    }

    fn population_for(&self, replication: usize) -> Vec<CoacheeProfile> {
        if self.profiles.is_empty() {
            let seed = session_seed(self.seed, replication, usize::MAX >> 1);
            self.population.sample(self.coachees, &format!("r{replication:02}"), seed)
        } else {
            self.profiles.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoacheeSessions {
    pub coachee_id: String,
    /// Mean turn reward per session; `None` where the session failed.
    pub session_means: Vec<Option<f64>>,
    pub action_counts: Vec<[usize; NUM_ACTIONS]>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub replication: usize,
    pub coachees: Vec<CoacheeSessions>,
    /// Mean over coachees per session (`NaN` serialized as null when no session succeeded).
    pub pooled_means: Vec<Option<f64>>,
    pub slope: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionStat {
    pub session: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: PolicyArm,
    pub replications: Vec<ReplicationResult>,
    /// Per-session statistics over every coachee-session of every replication.
    pub sessions: Vec<SessionStat>,
    pub action_counts: Vec<[usize; NUM_ACTIONS]>,
    pub mean_slope: Option<f64>,
    pub slope_std_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided `P(X >= wins)` under `Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub policy_corpus: String,
    pub arms: Vec<ArmReport>,
    /// Adaptive arm, pooled session-4 mean vs session-2 mean per replication.
    pub adaptive_late_vs_early: Option<SignTest>,
    /// Share of replications where adaptive beats generic on the last session.
    pub adaptive_beats_generic_last: Option<f64>,
    pub errors: Vec<String>,
    /// Reward statistics of the corpus the generic policy was trained on, when known.
    pub corpus_stats: Option<CalibrationStats>,
}

impl StudyReport {
    pub fn arm(&self, arm: PolicyArm) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    /// Flat `arm,replication,coachee_id,session,mean_reward` rows.
    pub fn session_table_csv(&self) -> String {
        let mut out = String::from("arm,replication,coachee_id,session,mean_reward\n");
        for arm in &self.arms {
            for r in &arm.replications {
                for c in &r.coachees {
                    for (i, m) in c.session_means.iter().enumerate() {
                        let v = m.map(|v| v.to_string()).unwrap_or_default();
                        out.push_str(&format!("{},{},{},{},{v}\n", arm.arm.name(), r.replication, c.coachee_id, i + 1));
                    }
                }
            }
        }
        out
    }

    /// `arm,session,mean,std,n` rows.
    pub fn pooled_table_csv(&self) -> String {
        let mut out = String::from("arm,session,mean,std,n\n");
        for arm in &self.arms {
            for s in &arm.sessions {
                out.push_str(&format!("{},{},{},{},{}\n", arm.arm.name(), s.session, s.mean, s.std, s.n));
            }
        }
        out
    }
}

/// One-sided sign test for "more wins than chance".
pub fn sign_test_one_sided(wins: usize, losses: usize, ties: usize) -> SignTest {
    let n = wins + losses;
    // sum_{k >= wins} C(n, k) / 2^n, in log space for stability
    let ln_choose = |n: usize, k: usize| -> f64 {
        (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
    };
    let p = if n == 0 {
        1.0
    } else {
        (wins..=n).map(|k| (ln_choose(n, k) - n as f64 * std::f64::consts::LN_2).exp()).sum::<f64>().min(1.0)
    };
    SignTest { wins, losses, ties, p_value: p }
}

/// Least-squares slope of `ys` against `1, 2, ...`; `None` entries are skipped.
pub fn linear_slope(ys: &[Option<f64>]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = ys.iter().enumerate().filter_map(|(i, y)| y.map(|y| ((i + 1) as f64, y))).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn run_coachee(
    cfg: &StudyConfig,
    env: &SessionEnv,
    generic: &PolicyCheckpoint,
    corpus: &Arc<[Transition]>,
    arm: PolicyArm,
    replication: usize,
    index: usize,
    profile: &CoacheeProfile,
) -> CoacheeSessions {
    let mut result = CoacheeSessions {
        coachee_id: profile.id.clone(),
        session_means: Vec::with_capacity(cfg.sessions),
        action_counts: Vec::with_capacity(cfg.sessions),
        errors: Vec::new(),
    };
    let mut policy: Box<dyn DecisionPolicy> = match arm {
        PolicyArm::GenericFrozen => match FrozenPolicy::from_checkpoint(generic) {
            Ok(p) => Box::new(p),
            Err(e) => {
                result.errors.push(e.to_string());
                return result;
            }
        },
        PolicyArm::Adaptive => {
            let online = OnlineConfig { seed: session_seed(cfg.online.seed, replication, index), ..cfg.online.clone() };
            match fork_for_coachee(generic, &profile.id)
                .and_then(|fork| AdaptivePolicy::new(&fork, Arc::clone(corpus), online))
            {
                Ok(p) => Box::new(p),
                Err(e) => {
                    result.errors.push(e.to_string());
                    return result;
                }
            }
        }
    };
    for s in 1..=cfg.sessions {
        // both arms see the same coachee randomness for a given session
        let seed = session_seed(cfg.seed ^ replication as u64, index, s);
        let session = SessionConfig {
            session_id: format!("{}-r{replication:02}-{}-s{s}", arm.name(), profile.id),
            coachee_id: profile.id.clone(),
            exercise: cfg.exercises[(s - 1) % cfg.exercises.len()],
            session_index: s,
            turn_limit: cfg.turn_limit,
            dispatch: DispatchMode::Inline,
            seed,
            ..SessionConfig::default()
        };
        let mut coachee = SimulatedCoachee::new(profile.clone(), s, seed);
        match run_session(&session, env, &mut coachee, policy.as_mut(), &mut VirtualClock::new()) {
            Ok(out) => {
                let mut counts = [0usize; NUM_ACTIONS];
                for t in &out.log.turns {
                    if let Some(d) = &t.decision {
                        counts[d.action.code()] += 1;
                    }
                }
                if let Some(e) = out.log.error.clone() {
                    result.errors.push(format!("{}: {e}", session.session_id));
                }
                result.session_means.push(out.log.mean_reward());
                result.action_counts.push(counts);
            }
            Err(e) => {
                result.errors.push(format!("{}: {e}", session.session_id));
                result.session_means.push(None);
                result.action_counts.push([0; NUM_ACTIONS]);
            }
        }
    }
    result
}

fn pooled(coachees: &[CoacheeSessions], sessions: usize) -> Vec<Option<f64>> {
    (0..sessions)
        .map(|s| {
            let v: Vec<f64> = coachees.iter().filter_map(|c| c.session_means.get(s).copied().flatten()).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

/// Runs every arm over every replication's coachees; coachees run in parallel.
pub fn run_study(
    cfg: &StudyConfig,
    generic: &PolicyCheckpoint,
    generic_corpus: Arc<[Transition]>,
    env: &SessionEnv,
) -> Result<StudyReport, SimError> {
    cfg.validate()?;
    if generic.coachee_id.is_some() {
        return Err(SimError::Config("study needs the generic (un-forked) checkpoint".into()));
    }
    let populations: Vec<Vec<CoacheeProfile>> = (0..cfg.replications).map(|r| cfg.population_for(r)).collect();
    let mut arms = Vec::new();
    let mut errors = Vec::new();
    for &arm in &cfg.arms {
        let jobs: Vec<(usize, usize)> =
            (0..cfg.replications).flat_map(|r| (0..populations[r].len()).map(move |c| (r, c))).collect();
        let results: Vec<CoacheeSessions> = jobs
            .par_iter()
            .map(|&(r, c)| run_coachee(cfg, env, generic, &generic_corpus, arm, r, c, &populations[r][c]))
            .collect();
        let mut replications: Vec<ReplicationResult> = (0..cfg.replications)
            .map(|r| ReplicationResult { replication: r, coachees: Vec::new(), pooled_means: Vec::new(), slope: None })
            .collect();
        for (&(r, _), res) in jobs.iter().zip(results) {
            errors.extend(res.errors.iter().map(|e| format!("{}: {e}", arm.name())));
            replications[r].coachees.push(res);
        }
        for rep in &mut replications {
            rep.pooled_means = pooled(&rep.coachees, cfg.sessions);
            rep.slope = linear_slope(&rep.pooled_means);
        }
        let sessions = (0..cfg.sessions)
            .map(|s| {
                let v: Vec<f64> = replications
                    .iter()
                    .flat_map(|r| r.coachees.iter().filter_map(|c| c.session_means.get(s).copied().flatten()))
                    .collect();
                let (mean, std) = if v.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&v) };
                SessionStat { session: s + 1, mean, std, n: v.len() }
            })
            .collect();
        let action_counts = (0..cfg.sessions)
            .map(|s| {
                let mut total = [0usize; NUM_ACTIONS];
                for c in replications.iter().flat_map(|r| &r.coachees) {
                    if let Some(counts) = c.action_counts.get(s) {
                        total.iter_mut().zip(counts).for_each(|(t, x)| *t += x);
                    }
                }
                total
            })
            .collect();
        let slopes: Vec<f64> = replications.iter().filter_map(|r| r.slope).collect();
        let (mean_slope, slope_std_error) = if slopes.len() >= 2 {
            let (m, s) = mean_std(&slopes);
            (Some(m), Some(s / (slopes.len() as f64).sqrt()))
        } else {
            (slopes.first().copied(), None)
        };
        arms.push(ArmReport { arm, replications, sessions, action_counts, mean_slope, slope_std_error });
    }

    let find = |a: PolicyArm| arms.iter().find(|r| r.arm == a);
    let adaptive_late_vs_early = find(PolicyArm::Adaptive).filter(|_| cfg.sessions >= 4).map(|a| {
        let (mut w, mut l, mut t) = (0, 0, 0);
        for r in &a.replications {
            match (r.pooled_means[3], r.pooled_means[1]) {
                (Some(late), Some(early)) if late > early => w += 1,
                (Some(late), Some(early)) if late < early => l += 1,
                _ => t += 1,
            }
        }
        sign_test_one_sided(w, l, t)
    });
    let adaptive_beats_generic_last = match (find(PolicyArm::Adaptive), find(PolicyArm::GenericFrozen)) {
        (Some(a), Some(g)) => {
            let last = cfg.sessions - 1;
            let wins = a
                .replications
                .iter()
                .zip(&g.replications)
                .filter(|(ra, rg)| matches!((ra.pooled_means[last], rg.pooled_means[last]), (Some(x), Some(y)) if x > y))
                .count();
            Some(wins as f64 / cfg.replications as f64)
        }
        _ => None,
    };
    Ok(StudyReport {
        config: cfg.clone(),
        policy_corpus: generic.metadata.corpus_id.clone(),
        arms,
        adaptive_late_vs_early,
        adaptive_beats_generic_last,
        errors,
        corpus_stats: None,
    })
}
