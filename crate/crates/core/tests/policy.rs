use std::sync::Arc;

use coach_core::neural::TrainConfig;
use coach_core::policy::{
    fork_for_coachee, greedy_action, train_batch, AdaptivePolicy, Algorithm, DecisionPolicy, OnlineConfig,
    PolicyCheckpoint, PolicyError, QLearningConfig,
};
use coach_core::reward::{DurationStats, RewardConfig, StatsSource};
use coach_core::{DialogueAction, StateNormalizer, StateVector, Transition, NUM_ACTIONS};

const GAMMA: f64 = 0.9;

// Deterministic 4-state MDP; state 2's best action only pays off through the
// successor, so a purely myopic learner gets it wrong.
const REWARD: [[f64; 3]; 4] = [[0.0, 1.0, 0.0], [0.0, 0.0, 2.0], [1.0, 0.0, 0.0], [4.0, 0.0, 1.0]];

fn next_state(s: usize, a: usize) -> usize {
    (s + a) % 4
}

fn state(s: usize) -> StateVector {
    let mut v = [0.0; 11];
    v[0] = 1.0;
    v[2 + s] = 1.0;
    StateVector::new(v).unwrap()
}

fn value_iteration() -> [[f64; 3]; 4] {
    let mut q = [[0.0; 3]; 4];
    for _ in 0..1000 {
        let v: Vec<f64> = q.iter().map(|row| row.iter().copied().fold(f64::MIN, f64::max)).collect();
        let mut next = [[0.0; 3]; 4];
        for s in 0..4 {
            for a in 0..3 {
                next[s][a] = REWARD[s][a] + GAMMA * v[next_state(s, a)];
            }
        }
        q = next;
    }
    q
}

fn tabular_greedy(q: &[[f64; 3]; 4]) -> Vec<usize> {
    q.iter()
        .map(|row| (0..3).fold(0, |best, a| if row[a] > row[best] { a } else { best }))
        .collect()
}

fn transition(s: StateVector, a: DialogueAction, r: f64, next: StateVector, done: bool) -> Transition {
    Transition {
        state: s,
        action: a,
        reward: r,
        next_state: next,
        done,
        coachee_id: "toy".into(),
        session_index: 1,
        turn_index: 0,
    }
}

fn toy_corpus(copies: usize) -> Vec<Transition> {
    let mut out = Vec::new();
    for _ in 0..copies {
        for s in 0..4 {
            for a in 0..3 {
                out.push(transition(state(s), DialogueAction::ALL[a], REWARD[s][a], state(next_state(s, a)), false));
            }
        }
    }
    out
}

fn normalizer() -> StateNormalizer {
    let stats = DurationStats::new(20.0, 10.0, StatsSource::ReferenceCorpus).unwrap();
    StateNormalizer { speech: stats, silence: stats }
}

fn toy_config() -> QLearningConfig {
    QLearningConfig {
        gamma: GAMMA,
        hidden: 32,
        target_sync_steps: 50,
        nfq_refresh_epochs: 8,
        train: TrainConfig { learning_rate: 3e-3, batch_size: 32, epochs: 500, ..TrainConfig::default() },
        seed: 3,
    }
}

fn learned_greedy(ckpt: &PolicyCheckpoint) -> Vec<usize> {
    let q = ckpt.q_network().unwrap();
    (0..4).map(|s| greedy_action(&q.q_values(&state(s)).unwrap()).code()).collect()
}

#[test]
fn all_algorithms_recover_value_iteration_policy() {
    let oracle = tabular_greedy(&value_iteration());
    assert_eq!(oracle, vec![1, 2, 1, 0]);
    let corpus = toy_corpus(20);
    let mut policies = Vec::new();
    for algo in Algorithm::ALL {
        let out = train_batch(&corpus, algo, &toy_config(), normalizer(), RewardConfig::default(), "toy").unwrap();
        let greedy = learned_greedy(&out.checkpoint);
        assert_eq!(greedy, oracle, "{}", algo.name());
        policies.push(greedy);
    }
    assert!(policies.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn terminal_only_corpus_regresses_onto_rewards() {
    let mut corpus = Vec::new();
    for _ in 0..20 {
        for s in 0..4 {
            let a = DialogueAction::ALL[s % NUM_ACTIONS];
            corpus.push(transition(state(s), a, s as f64 - 1.5, state(s), true));
        }
    }
    let mut cfg = toy_config();
    cfg.train.epochs = 300;
    for algo in Algorithm::ALL {
        let out = train_batch(&corpus, algo, &cfg, normalizer(), RewardConfig::default(), "terminal").unwrap();
        let q = out.checkpoint.q_network().unwrap();
        for s in 0..4 {
            let got = q.q_values(&state(s)).unwrap()[s % NUM_ACTIONS];
            assert!((got - (s as f64 - 1.5)).abs() < 0.05, "{} state {s}: {got}", algo.name());
        }
    }
}

#[test]
fn invalid_inputs_rejected() {
    let corpus = toy_corpus(1);
    let mut cfg = toy_config();
    assert!(matches!(
        train_batch(&[], Algorithm::Dqn, &cfg, normalizer(), RewardConfig::default(), "x"),
        Err(PolicyError::EmptyCorpus)
    ));
    cfg.gamma = 1.0;
    assert!(matches!(
        train_batch(&corpus, Algorithm::Dqn, &cfg, normalizer(), RewardConfig::default(), "x"),
        Err(PolicyError::Gamma(_))
    ));
}

#[test]
fn training_is_deterministic() {
    let corpus = toy_corpus(2);
    let mut cfg = toy_config();
    cfg.train.epochs = 5;
    let a = train_batch(&corpus, Algorithm::DoubleDqn, &cfg, normalizer(), RewardConfig::default(), "d").unwrap();
    let b = train_batch(&corpus, Algorithm::DoubleDqn, &cfg, normalizer(), RewardConfig::default(), "d").unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.loss_curve, b.loss_curve);
}

fn small_generic() -> PolicyCheckpoint {
    let mut cfg = toy_config();
    cfg.train.epochs = 2;
    train_batch(&toy_corpus(1), Algorithm::Dqn, &cfg, normalizer(), RewardConfig::default(), "generic")
        .unwrap()
        .checkpoint
}

#[test]
fn zero_steps_leave_parameters_unchanged() {
    let generic = small_generic();
    let fork = fork_for_coachee(&generic, "c1").unwrap();
    let cfg = OnlineConfig { steps_per_turn: 0, ..OnlineConfig::default() };
    let mut p = AdaptivePolicy::new(&fork, Arc::from(Vec::new()), cfg).unwrap();
    let t = transition(state(0), DialogueAction::NewEpisode, 3.0, state(1), false);
    for _ in 0..10 {
        p.observe(&t);
    }
    assert_eq!(p.to_checkpoint().params, generic.params);
    assert_eq!(p.buffer().len(), 10);
}

#[test]
fn repeated_follow_up_reward_becomes_argmax() {
    // a generic policy that prefers Summarise in state 3
    let generic = train_batch(&toy_corpus(20), Algorithm::Dqn, &toy_config(), normalizer(), RewardConfig::default(), "g")
        .unwrap()
        .checkpoint;
    let s = state(3);
    let q0 = generic.q_network().unwrap().q_values(&s).unwrap();
    assert_ne!(greedy_action(&q0), DialogueAction::FollowUpQuestion);
    let mut p = AdaptivePolicy::new(
        &fork_for_coachee(&generic, "c").unwrap(),
        Arc::from(Vec::new()),
        OnlineConfig::default(),
    )
    .unwrap();
    let top = q0.iter().copied().fold(f64::MIN, f64::max);
    let t = transition(s.clone(), DialogueAction::FollowUpQuestion, top + 5.0, s.clone(), true);
    let mut reached = None;
    for i in 1..=200 {
        let report = p.observe(&t);
        assert!(report.error.is_none());
        if greedy_action(&p.q_values(&s).unwrap()) == DialogueAction::FollowUpQuestion {
            reached = Some(i);
            break;
        }
    }
    assert!(reached.is_some(), "FollowUp never became the argmax");
}

#[test]
fn forks_evolve_independently() {
    let generic = small_generic();
    let before = generic.clone();
    let a = fork_for_coachee(&generic, "a").unwrap();
    let b = fork_for_coachee(&generic, "b").unwrap();
    assert!(matches!(fork_for_coachee(&a, "x"), Err(PolicyError::AlreadyPersonalised(_))));
    let probe = state(1);
    let qa0 = a.q_network().unwrap().q_values(&probe).unwrap();
    assert_eq!(qa0, generic.q_network().unwrap().q_values(&probe).unwrap());

    let mut pa = AdaptivePolicy::new(&a, Arc::from(Vec::new()), OnlineConfig::default()).unwrap();
    let mut pb = AdaptivePolicy::new(&b, Arc::from(Vec::new()), OnlineConfig::default()).unwrap();
    for _ in 0..20 {
        pa.observe(&transition(probe.clone(), DialogueAction::Summarise, 10.0, probe.clone(), true));
        pb.observe(&transition(probe.clone(), DialogueAction::NewEpisode, -10.0, probe.clone(), true));
    }
    let (ca, cb) = (pa.to_checkpoint(), pb.to_checkpoint());
    assert_ne!(ca.params, cb.params);
    assert_ne!(ca.params, generic.params);
    assert_eq!(ca.coachee_id.as_deref(), Some("a"));
    assert_eq!(generic, before);
}

#[test]
fn generic_replay_mixes_into_batches() {
    let generic = small_generic();
    let corpus: Arc<[Transition]> = Arc::from(toy_corpus(1));
    let mut p = AdaptivePolicy::new(&fork_for_coachee(&generic, "m").unwrap(), corpus, OnlineConfig::default()).unwrap();
    assert!((p.generic_mix() - 0.5).abs() < 1e-12);
    p.begin_session(4);
    assert!((p.generic_mix() - 0.2).abs() < 1e-12);
    assert!((p.epsilon() - 0.0125).abs() < 1e-12);
    let r = p.observe(&transition(state(0), DialogueAction::Summarise, 1.0, state(1), false));
    assert_eq!(r.steps, 4);
    assert!(r.mean_loss.unwrap().is_finite());
}
