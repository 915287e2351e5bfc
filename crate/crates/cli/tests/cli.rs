use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::sync::Arc;

use coach_core::dialogue::{run_session, DispatchMode, Script, SessionConfig, SessionEnv, VirtualClock};
use coach_core::domain::ExerciseKind;
use coach_core::llm::{StubBackend, StubConfig};
use coach_core::policy::FrozenPolicy;
use coach_core::sim::{PopulationConfig, SimulatedCoachee};
use coach_core::store;

fn coach(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coach")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = coach(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("# resolved config\n"), "{stderr}");
    String::from_utf8(out.stdout).unwrap()
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

const FAST: &str = "[batch.train]\nepochs = 5\n[rupture.synth]\nsubjects = 10\nmin_duration_s = 40\nmax_duration_s = 60\n[rupture.cv.train]\nepochs = 2\nhidden = 4\n";

#[test]
fn corpus_and_training_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("fast.toml"), FAST).unwrap();
    for run in ["a", "b"] {
        let out = ok(d, &["gen-corpus", "--out", run, "--profiles", "2", "--sessions", "3"]);
        assert!(out.contains("48 transitions"), "{out}");
        let corpus = format!("{run}/corpus.jsonl");
        ok(d, &["--config", "fast.toml", "train-batch", "--algo", "double-dqn", "--corpus", &corpus, "--out", run]);
    }
    for f in ["corpus.jsonl", "corpus.meta.json", "profiles.json", "generic.ckpt", "generic_loss.csv", "resolved_config.toml"] {
        assert_eq!(bytes(&d.join("a").join(f)), bytes(&d.join("b").join(f)), "{f} differs between runs");
    }
    let loss = String::from_utf8(bytes(&d.join("a/generic_loss.csv"))).unwrap();
    assert_eq!(loss.lines().count(), 6);
    let ckpt = store::load_checkpoint(&d.join("a/generic.ckpt")).unwrap();
    assert_eq!(ckpt.algorithm, coach_core::policy::Algorithm::DoubleDqn);

    // a different seed changes the corpus
    ok(d, &["--seed", "3", "gen-corpus", "--out", "c", "--profiles", "2", "--sessions", "3"]);
    assert_ne!(bytes(&d.join("a/corpus.jsonl")), bytes(&d.join("c/corpus.jsonl")));
}

#[test]
fn failures_are_single_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = coach(d, &["train-batch", "--corpus", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    let last = err.lines().last().unwrap();
    assert!(last.starts_with("error: ") && last.contains("missing.jsonl"), "{last}");
    assert_eq!(err.lines().filter(|l| l.starts_with("error")).count(), 1);

    let out = coach(d, &["gen-corpus", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: usage:"));

    let out = coach(d, &["train-batch", "--algo", "sarsa", "--corpus", "x"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(d.join("bad.toml"), "[batch]\ngamma = 2.0\n").unwrap();
    let out = coach(d, &["--config", "bad.toml", "gen-corpus"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("batch: discount factor"), "{err}");
}

#[test]
fn rupture_evaluation_writes_fifty_folds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("fast.toml"), FAST).unwrap();
    let out = ok(d, &["--config", "fast.toml", "eval-rupture", "--model", "bilstm", "--fusion", "late", "--out", "r"]);
    assert!(out.contains("Bi-LSTM") && out.contains("late"), "{out}");
    let folds = String::from_utf8(bytes(&d.join("r/folds_bilstm_late.csv"))).unwrap();
    assert_eq!(folds.lines().count(), 51);
    assert!(d.join("r/rupture_summary.txt").is_file());

    // the synthetic data written alongside reads back to the same result
    ok(d, &["--config", "fast.toml", "eval-rupture", "--data", "r/synthetic_rupture", "--out", "r2", "--save-detector"]);
    assert_eq!(bytes(&d.join("r/folds_bilstm_late.csv")), bytes(&d.join("r2/folds_bilstm_late.csv")));
    store::load_detector(&d.join("r2/rupture.ckpt")).unwrap();
}

#[test]
fn study_and_report_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("fast.toml"), FAST).unwrap();
    let args = [
        "--config", "fast.toml", "simulate-study", "--arms", "adaptive,generic", "--seeds", "2", "--coachees", "3",
        "--sessions", "2",
    ];
    for run in ["s1", "s2"] {
        let mut a = args.to_vec();
        a.extend(["--out", run]);
        let out = ok(d, &a);
        assert!(out.contains("adaptive:") && out.contains("generic-frozen:"), "{out}");
    }
    for f in ["study.json", "sessions.csv", "pooled.csv", "summary.txt", "reward_trend.svg"] {
        assert_eq!(bytes(&d.join("s1").join(f)), bytes(&d.join("s2").join(f)), "{f} differs between runs");
    }
    let sessions = String::from_utf8(bytes(&d.join("s1/sessions.csv"))).unwrap();
    assert_eq!(sessions.lines().count(), 1 + 2 * 2 * 3 * 2);
    let svg = String::from_utf8(bytes(&d.join("s1/reward_trend.svg"))).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("adaptive"));

    ok(d, &["export-report", "--report", "s1/study.json", "--out", "e"]);
    for f in ["sessions.csv", "pooled.csv", "summary.txt", "reward_trend.svg"] {
        assert_eq!(bytes(&d.join("s1").join(f)), bytes(&d.join("e").join(f)), "{f}");
    }
}

#[test]
fn session_replay_verifies_logs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("fast.toml"), FAST).unwrap();
    ok(d, &["gen-corpus", "--out", "c", "--profiles", "2", "--sessions", "2"]);
    ok(d, &["--config", "fast.toml", "train-batch", "--corpus", "c/corpus.jsonl", "--out", "c"]);
    let ckpt = store::load_checkpoint(&d.join("c/generic.ckpt")).unwrap();

    let env = SessionEnv::new(
        Arc::new(Script::bundled()),
        Arc::new(StubBackend::new(StubConfig::default())),
        ckpt.normalizer,
        ckpt.reward,
    );
    let log_path = d.join("sessions.jsonl");
    for (i, p) in PopulationConfig::default().sample(2, "r", 1).into_iter().enumerate() {
        let cfg = SessionConfig {
            session_id: format!("s{i}"),
            coachee_id: p.id.clone(),
            exercise: ExerciseKind::Gratitude,
            dispatch: DispatchMode::Inline,
            seed: i as u64,
            ..SessionConfig::default()
        };
        let mut policy = FrozenPolicy::new(ckpt.q_network().unwrap(), 0.2);
        let mut coachee = SimulatedCoachee::new(p, 1, i as u64);
        let out = run_session(&cfg, &env, &mut coachee, &mut policy, &mut VirtualClock::new()).unwrap();
        store::append_session_log(&log_path, &out.log).unwrap();
    }

    let out = ok(d, &["session-replay", "--log", "sessions.jsonl", "--checkpoint", "c/generic.ckpt", "--out", "rp"]);
    assert!(out.contains("2 sessions verified"), "{out}");
    assert_eq!(out.matches("q-values reproduced by checkpoint: 8/8").count(), 2, "{out}");
    assert!(out.contains("coach [intro]:"));
    let one = ok(d, &["session-replay", "--log", "sessions.jsonl", "--session", "s1", "--out", "rp1"]);
    assert!(one.contains("1 sessions verified") && one.contains("session s1"));

    // a tampered action no longer replays from its q-values
    let text = std::fs::read_to_string(&log_path).unwrap();
    let mut lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let turn = &mut lines[0]["turn"]["decision"];
    let q: Vec<f64> = serde_json::from_value(turn["q_values"].clone()).unwrap();
    let worst = (0..3).min_by(|&a, &b| q[a].total_cmp(&q[b])).unwrap();
    turn["draw"]["explore_u"] = serde_json::json!(1.0);
    turn["action"] = serde_json::json!(["summarise", "follow-up-question", "new-episode"][worst]);
    let body: Vec<String> = lines.iter().map(|v| v.to_string()).collect();
    std::fs::write(d.join("tampered.jsonl"), body.join("\n")).unwrap();
    let out = coach(d, &["session-replay", "--log", "tampered.jsonl", "--out", "rp2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("decisions: FAILED"));
}

#[test]
fn serve_answers_health_checks() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_coach"))
        .current_dir(dir.path())
        .args(["serve", "--bind", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    stdout.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("{line}")).to_string();
    let mut stream = std::net::TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /healthz HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"status\":\"ok\""));
}
