use std::sync::Arc;

use coach_core::dialogue::{run_session, DispatchMode, Script, SessionConfig, SessionEnv, SessionLog, VirtualClock};
use coach_core::domain::{ExerciseKind, StateNormalizer, StateVector, STATE_DIM};
use coach_core::llm::{StubBackend, StubConfig};
use coach_core::policy::{train_batch, Algorithm, FrozenPolicy, PolicyCheckpoint, QLearningConfig, QNetwork};
use coach_core::reward::{DurationStats, RewardConfig, StatsSource};
use coach_core::rupture::{synthetic_corpus, train_detector, Fusion, RuptureModelKind, SynthConfig, TieBreak};
use coach_core::sim::{generate_corpus, CorpusConfig, PopulationConfig, SimulatedCoachee};
use coach_core::store::{
    assemble_session_logs, load_checkpoint, load_detector, read_session_logs, read_transitions, save_checkpoint,
    save_detector, session_log_jsonl, write_transitions, append_session_log, LogLine, StoreError,
    CHECKPOINT_VERSION,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normalizer() -> StateNormalizer {
    StateNormalizer {
        speech: DurationStats::new(20.0, 8.0, StatsSource::ReferenceCorpus).unwrap(),
        silence: DurationStats::new(2.0, 1.0, StatsSource::ReferenceCorpus).unwrap(),
    }
}

fn small_checkpoint() -> PolicyCheckpoint {
    let corpus = generate_corpus(&CorpusConfig { profiles: 2, sessions: 2, ..CorpusConfig::default() }).unwrap();
    let mut cfg = QLearningConfig::default();
    cfg.train.epochs = 3;
    train_batch(&corpus.transitions(), Algorithm::DoubleDqn, &cfg, corpus.normalizer, corpus.reward, &corpus.id)
        .unwrap()
        .checkpoint
}

fn random_state(rng: &mut ChaCha8Rng) -> StateVector {
    let mut v = [0.0; STATE_DIM];
    for x in &mut v {
        *x = rng.random_range(-5.0..5.0);
    }
    StateVector::new(v).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("generic.ckpt");
    let ckpt = small_checkpoint();
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    let (a, b) = (ckpt.q_network().unwrap(), back.q_network().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let s = random_state(&mut rng);
        let (qa, qb) = (a.q_values(&s).unwrap(), b.q_values(&s).unwrap());
        assert_eq!(qa.map(f64::to_bits), qb.map(f64::to_bits));
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&path, &small_checkpoint()).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let truncated = dir.path().join("truncated.ckpt");
    std::fs::write(&truncated, &bytes[..bytes.len() - 13]).unwrap();
    assert!(matches!(load_checkpoint(&truncated), Err(StoreError::Corrupt(_))));

    let header_only = dir.path().join("header.ckpt");
    std::fs::write(&header_only, &bytes[..20]).unwrap();
    assert!(matches!(load_checkpoint(&header_only), Err(StoreError::Corrupt(_))));

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    let flipped_path = dir.path().join("flipped.ckpt");
    std::fs::write(&flipped_path, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&flipped_path), Err(StoreError::Corrupt(_))));

    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let future_path = dir.path().join("future.ckpt");
    std::fs::write(&future_path, &future).unwrap();
    let err = load_checkpoint(&future_path).unwrap_err();
    assert!(matches!(err, StoreError::Version { found: 2, supported: 1 }));
    let msg = err.to_string();
    assert!(msg.contains('2') && msg.contains('1'), "{msg}");

    let mut magic = bytes;
    magic[0] = b'X';
    let magic_path = dir.path().join("magic.ckpt");
    std::fs::write(&magic_path, &magic).unwrap();
    assert!(matches!(load_checkpoint(&magic_path), Err(StoreError::BadMagic)));
}

#[test]
fn detector_checkpoint_round_trip_and_kind_check() {
    let ds = synthetic_corpus(&SynthConfig { subjects: 6, ..SynthConfig::default() })
        .unwrap()
        .dataset()
        .unwrap()
        .undersample(3)
        .unwrap();
    let cfg = coach_core::rupture::RuptureTrainConfig { epochs: 2, ..Default::default() };
    let det = train_detector(&ds, RuptureModelKind::Lstm, Fusion::Late, &cfg, TieBreak::Audio).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ir.ckpt");
    save_detector(&path, &det).unwrap();
    assert_eq!(load_detector(&path).unwrap(), det);
    assert!(matches!(load_checkpoint(&path), Err(StoreError::Kind { .. })));
}

#[test]
fn transitions_round_trip_and_retrain() {
    let corpus = generate_corpus(&CorpusConfig { profiles: 2, sessions: 2, ..CorpusConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let ts = corpus.transitions();
    write_transitions(&path, &ts).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), ts.len());
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["state"].as_array().unwrap().len(), STATE_DIM);
    assert!(first["action"].is_u64());
    let back = read_transitions(&path).unwrap();
    assert_eq!(back, ts);

    let mut cfg = QLearningConfig::default();
    cfg.train.epochs = 2;
    let a = train_batch(&ts, Algorithm::Nfq, &cfg, corpus.normalizer, corpus.reward, "c").unwrap();
    let b = train_batch(&back, Algorithm::Nfq, &cfg, corpus.normalizer, corpus.reward, "c").unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);

    let bad = dir.path().join("bad.jsonl");
    let mut lines: Vec<&str> = text.lines().take(3).collect();
    let short = r#"{"coachee_id":"x","session_index":1,"turn_index":0,"state":[0.0],"action":0,"reward":0.0,"next_state":[0.0],"done":false}"#;
    lines.push(short);
    std::fs::write(&bad, lines.join("\n")).unwrap();
    match read_transitions(&bad) {
        Err(StoreError::Line { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }
}

fn run_logs(n: usize) -> Vec<SessionLog> {
    let env = SessionEnv::new(
        Arc::new(Script::bundled()),
        Arc::new(StubBackend::new(StubConfig::default())),
        normalizer(),
        RewardConfig::default(),
    );
    let profiles = PopulationConfig::default().sample(n, "log", 4);
    profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let cfg = SessionConfig {
                session_id: format!("s{i}"),
                coachee_id: p.id.clone(),
                exercise: ExerciseKind::Gratitude,
                dispatch: DispatchMode::Inline,
                seed: i as u64,
                ..SessionConfig::default()
            };
            let mut policy = FrozenPolicy::new(QNetwork::new(16, 5).unwrap(), 0.1);
            let mut coachee = SimulatedCoachee::new(p.clone(), 1, i as u64);
            run_session(&cfg, &env, &mut coachee, &mut policy, &mut VirtualClock::new()).unwrap().log
        })
        .collect()
}

#[test]
fn session_log_lines_and_round_trip() {
    let logs = run_logs(2);
    assert_eq!(logs[0].decision_turns(), 8);
    let text = session_log_jsonl(&logs[0]);
    assert_eq!(text.lines().count(), 9);
    let kinds: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds.iter().filter(|k| *k == "turn").count(), 8);
    assert_eq!(kinds.last().unwrap(), "summary");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("logs").join("sessions.jsonl");
    for log in &logs {
        append_session_log(&path, log).unwrap();
    }
    let back = read_session_logs(&path).unwrap();
    assert_eq!(back, logs);
    for log in &back {
        log.verify_decisions().unwrap();
    }
}

#[test]
fn interleaved_logs_reconstruct_per_session() {
    let logs = run_logs(3);
    let mut queues: Vec<Vec<LogLine>> =
        logs.iter().map(|l| coach_core::store::log_lines(l).into_iter().rev().collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mixed = Vec::new();
    while queues.iter().any(|q| !q.is_empty()) {
        let live: Vec<usize> = (0..queues.len()).filter(|&i| !queues[i].is_empty()).collect();
        let pick = *live.choose(&mut rng).unwrap();
        mixed.push((mixed.len() + 1, queues[pick].pop().unwrap()));
    }
    let mut back = assemble_session_logs(mixed).unwrap();
    back.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    assert_eq!(back, logs);
}

#[test]
fn malformed_log_line_reports_line_number() {
    let logs = run_logs(1);
    let mut lines: Vec<String> = session_log_jsonl(&logs[0]).lines().map(String::from).collect();
    lines[4] = "{\"kind\":\"turn\",".to_string();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.jsonl");
    std::fs::write(&path, lines.join("\n")).unwrap();
    let err = read_session_logs(&path).unwrap_err();
    assert!(matches!(err, StoreError::Line { line: 5, .. }), "{err}");
    assert!(err.to_string().starts_with("line 5:"));

    let lines_ok: Vec<String> = session_log_jsonl(&logs[0]).lines().take(8).map(String::from).collect();
    std::fs::write(&path, lines_ok.join("\n")).unwrap();
    assert!(matches!(read_session_logs(&path), Err(StoreError::Format(_))));
}
