use std::collections::VecDeque;
use std::sync::Arc;

use coach_core::dialogue::{
    run_session, ChannelPoll, CoacheeChannel, CoacheeTurnInput, DispatchMode, Script, SessionConfig, SessionEnv,
    SessionEvent, SessionMachine, Status, TerminationReason, UtteranceSource, VirtualClock,
};
use coach_core::llm::{ChatHistory, LlmBackend, LlmError, ModerationVerdict, StubBackend, StubConfig, REFUSAL_TEXT};
use coach_core::policy::{FrozenPolicy, QNetwork};
use coach_core::reward::{DurationStats, RewardConfig, StatsSource};
use coach_core::{DialogueAction, ExerciseKind, StateNormalizer};

/// Answers from a fixed list, optionally staying silent for some polls first.
#[derive(Default)]
struct Scripted {
    answers: VecDeque<CoacheeTurnInput>,
    events: Vec<SessionEvent>,
    disconnect_when_empty: bool,
}

impl Scripted {
    fn new(texts: &[&str]) -> Self {
        let answers = texts
            .iter()
            .enumerate()
            .map(|(i, t)| CoacheeTurnInput {
                transcript: t.to_string(),
                speech_duration_s: 10.0 + 3.0 * i as f64,
                silence_duration_s: 1.5,
                valence: vec![0.1, 0.2],
                ..CoacheeTurnInput::default()
            })
            .collect();
        Self { answers, ..Self::default() }
    }

    fn awaiting_count(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, SessionEvent::AwaitingInput { .. })).count()
    }
}

impl CoacheeChannel for Scripted {
    fn deliver(&mut self, event: &SessionEvent) {
        self.events.push(event.clone());
    }

    fn poll_input(&mut self) -> ChannelPoll {
        // only answer once the coach is waiting
        if !matches!(self.events.last(), Some(SessionEvent::AwaitingInput { .. }) | Some(SessionEvent::DecisionTrace { .. }))
            && !matches!(self.events.last(), Some(SessionEvent::CoachUtterance { source: UtteranceSource::Reprompt, .. }))
        {
            return ChannelPoll::Pending;
        }
        match self.answers.pop_front() {
            Some(a) => ChannelPoll::Ready(a),
            None if self.disconnect_when_empty => ChannelPoll::Disconnected,
            None => ChannelPoll::Pending,
        }
    }

    fn intro_valence(&mut self) -> Vec<f64> {
        vec![0.05, 0.15]
    }
}

fn normalizer() -> StateNormalizer {
    let s = DurationStats::new(20.0, 8.0, StatsSource::ReferenceCorpus).unwrap();
    StateNormalizer { speech: s, silence: DurationStats::new(2.0, 1.0, StatsSource::ReferenceCorpus).unwrap() }
}

fn env_with(llm: Arc<dyn LlmBackend>) -> SessionEnv {
    SessionEnv::new(Arc::new(Script::bundled()), llm, normalizer(), RewardConfig::default())
}

fn stub_env(cfg: StubConfig) -> SessionEnv {
    env_with(Arc::new(StubBackend::new(cfg)))
}

fn config() -> SessionConfig {
    SessionConfig {
        exercise: ExerciseKind::Gratitude,
        dispatch: DispatchMode::Inline,
        seed: 11,
        ..SessionConfig::default()
    }
}

fn policy(epsilon: f64) -> FrozenPolicy {
    FrozenPolicy::new(QNetwork::new(16, 5).unwrap(), epsilon)
}

const ANSWERS: [&str; 8] = [
    "I had a nice yoga class on Monday.",
    "My sister called me and we laughed a lot.",
    "I finished a book I had been reading for months.",
    "The weather was lovely so I walked to work.",
    "A colleague helped me with a difficult task.",
    "I cooked a new recipe and it turned out well.",
    "My neighbour brought me some flowers.",
    "I slept well for the first time in weeks.",
];

#[test]
fn full_session_runs_eight_decision_turns() {
    let env = stub_env(StubConfig::default());
    let cfg = config();
    let mut ch = Scripted::new(&ANSWERS);
    let mut pol = policy(0.3);
    let out = run_session(&cfg, &env, &mut ch, &mut pol, &mut VirtualClock::new()).unwrap();
    let log = &out.log;

    assert_eq!(log.termination, TerminationReason::Completed);
    assert_eq!(ch.awaiting_count(), 8);
    assert_eq!(log.decision_turns(), 8);
    assert_eq!(out.transitions.len(), 8);
    assert!(out.transitions[..7].iter().all(|t| !t.done));
    assert!(out.transitions[7].done);
    for w in out.transitions.windows(2) {
        assert_eq!(w[0].next_state, w[1].state);
    }

    let sources: Vec<_> = log.utterances.iter().map(|u| u.source).collect();
    assert_eq!(sources.first(), Some(&UtteranceSource::Intro));
    assert_eq!(sources[1], UtteranceSource::FirstQuestion);
    assert_eq!(sources.last(), Some(&UtteranceSource::Outro));
    assert_eq!(sources.iter().filter(|s| **s == UtteranceSource::Llm).count(), 8);
    assert!(log.utterances[0].text.contains("Hi, my name is QT"));

    // first state has an empty previous-action block, later ones carry the last action
    let first = log.turns[0].decision.as_ref().unwrap();
    assert_eq!(first.state.previous_action_block(), &[0.0; 3]);
    let second = log.turns[1].decision.as_ref().unwrap();
    let mut expected = [0.0; 3];
    expected[first.action.code()] = 1.0;
    assert_eq!(second.state.previous_action_block(), &expected);

    log.verify_decisions().unwrap();
    log.verify_moderation().unwrap();
    assert!(matches!(ch.events.last(), Some(SessionEvent::SessionEnd { reason: TerminationReason::Completed })));
}

#[test]
fn sessions_are_reproducible_and_logs_replay() {
    let run = || {
        let env = stub_env(StubConfig { seed: 3, ..StubConfig::default() });
        let mut ch = Scripted::new(&ANSWERS);
        run_session(&config(), &env, &mut ch, &mut policy(0.5), &mut VirtualClock::new()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let mut tampered = a.log.clone();
    let d = tampered.turns[2].decision.as_mut().unwrap();
    d.draw.explore_u = 1.0;
    d.q_values = [0.0, 1.0, 0.0];
    d.action = DialogueAction::NewEpisode;
    assert!(tampered.verify_decisions().is_err());
}

#[test]
fn harmful_input_stops_with_refusal() {
    let env = stub_env(StubConfig::default());
    let mut ch = Scripted::new(&[ANSWERS[0], ANSWERS[1], "I want to punch him in the face"]);
    let out = run_session(&config(), &env, &mut ch, &mut policy(0.0), &mut VirtualClock::new()).unwrap();
    assert_eq!(out.log.termination, TerminationReason::ModerationStop);
    let last = out.log.utterances.last().unwrap();
    assert_eq!(last.source, UtteranceSource::Refusal);
    assert_eq!(last.text, REFUSAL_TEXT);
    assert_eq!(out.log.decision_turns(), 2);
    let stopped = out.log.turns.last().unwrap();
    assert!(stopped.input_moderation.as_ref().unwrap().verdict.categories.contains("violence"));
    assert!(stopped.decision.is_none());
    assert_eq!(out.transitions.len(), 2);
    assert!(out.transitions[1].done);
    assert!(!out.log.utterances.iter().any(|u| u.source == UtteranceSource::Outro));
}

#[test]
fn moderation_outage_fails_closed() {
    let env = stub_env(StubConfig { fail_moderation: true, ..StubConfig::default() });
    let mut ch = Scripted::new(&ANSWERS);
    let out = run_session(&config(), &env, &mut ch, &mut policy(0.0), &mut VirtualClock::new()).unwrap();
    assert_eq!(out.log.termination, TerminationReason::ModerationStop);
    let check = out.log.turns[0].input_moderation.as_ref().unwrap();
    assert!(check.verdict.categories.contains("moderation-unavailable"));
    assert!(check.error.is_some());
}

/// Replies with something the stub moderation flags.
struct Rogue(StubBackend);

impl LlmBackend for Rogue {
    fn name(&self) -> &str {
        "rogue"
    }
    fn complete_raw(&self, _: &ChatHistory, _: &str) -> Result<String, LlmError> {
        Ok("You should kill the cat.".into())
    }
    fn moderate_raw(&self, text: &str) -> Result<ModerationVerdict, LlmError> {
        self.0.moderate_raw(text)
    }
}

#[test]
fn harmful_output_is_never_spoken() {
    let env = env_with(Arc::new(Rogue(StubBackend::new(StubConfig::default()))));
    let mut ch = Scripted::new(&ANSWERS);
    let out = run_session(&config(), &env, &mut ch, &mut policy(0.0), &mut VirtualClock::new()).unwrap();
    assert_eq!(out.log.termination, TerminationReason::ModerationStop);
    assert!(out.log.utterances.iter().all(|u| !u.text.contains("kill")));
    assert_eq!(out.log.utterances.last().unwrap().text, REFUSAL_TEXT);
    assert!(out.log.turns[0].output_moderation.as_ref().unwrap().verdict.flagged);
}

#[test]
fn llm_failures_retry_then_fall_back() {
    let env = stub_env(StubConfig { fail_completions: 3, ..StubConfig::default() });
    let cfg = SessionConfig { llm_retries: 2, retry_backoff_s: 0.5, ..config() };
    let mut ch = Scripted::new(&ANSWERS);
    let out = run_session(&cfg, &env, &mut ch, &mut policy(0.0), &mut VirtualClock::new()).unwrap();
    let t0 = &out.log.turns[0];
    assert_eq!(t0.llm_attempts, 3);
    assert_eq!(t0.utterance_source, Some(UtteranceSource::Fallback));
    assert!(t0.output_moderation.is_none());
    // backoff of 0.5 s then 1 s before giving up
    let waited = t0.timing.spoken_at_s.unwrap() - t0.timing.decided_at_s.unwrap();
    assert!((1.5 - 1e-9..1.7).contains(&waited), "{waited}");
    // the stub recovers on the next turn
    assert_eq!(out.log.turns[1].utterance_source, Some(UtteranceSource::Llm));
    assert_eq!(out.log.termination, TerminationReason::Completed);
    out.log.verify_moderation().unwrap();
}

#[test]
fn waiting_for_input_keeps_running() {
    let env = stub_env(StubConfig::default());
    let cfg = config();
    let mut ch = Scripted::default();
    let mut pol = policy(0.0);
    let mut m = SessionMachine::new(&cfg, &env, &mut ch, &mut pol).unwrap();
    m.tick(0.0);
    for i in 1..20 {
        assert_eq!(m.tick(i as f64 * 0.1), Status::Running);
        assert_eq!(m.last_path().last().map(String::as_str), Some("AwaitCoachee"));
    }
    assert_eq!(m.turns_completed(), 0);
    assert!(!m.is_finished());
    drop(m);
    assert_eq!(ch.awaiting_count(), 1);
}

#[test]
fn turn_limit_routes_to_outro() {
    let env = stub_env(StubConfig::default());
    let cfg = SessionConfig { turn_limit: 3, ..config() };
    let mut ch = Scripted::new(&ANSWERS);
    let out = run_session(&cfg, &env, &mut ch, &mut policy(0.0), &mut VirtualClock::new()).unwrap();
    assert_eq!(out.log.decision_turns(), 3);
    assert_eq!(out.log.utterances.last().unwrap().source, UtteranceSource::Outro);
    assert_eq!(out.log.termination, TerminationReason::Completed);
}

#[test]
fn silence_reprompts_then_times_out() {
    let env = stub_env(StubConfig::default());
    let cfg = SessionConfig { listen_timeout_s: 2.0, max_silent_turns: 2, ..config() };
    let mut ch = Scripted::default();
    let out = run_session(&cfg, &env, &mut ch, &mut policy(0.0), &mut VirtualClock::new()).unwrap();
    assert_eq!(out.log.termination, TerminationReason::Timeout);
    assert_eq!(out.log.turns.len(), 3);
    assert!(out.log.turns.iter().all(|t| t.silent && t.reprompted));
    let reprompts = out.log.utterances.iter().filter(|u| u.source == UtteranceSource::Reprompt).count();
    assert_eq!(reprompts, 3);
    // two silent turns were still decided and spoken
    assert_eq!(out.log.decision_turns(), 2);
}

#[test]
fn disconnect_ends_session() {
    let env = stub_env(StubConfig::default());
    let mut ch = Scripted::new(&ANSWERS[..2]);
    ch.disconnect_when_empty = true;
    let out = run_session(&config(), &env, &mut ch, &mut policy(0.0), &mut VirtualClock::new()).unwrap();
    assert_eq!(out.log.termination, TerminationReason::ClientDisconnect);
    assert_eq!(out.log.decision_turns(), 2);
    assert!(out.transitions.last().unwrap().done);
}

#[test]
fn threaded_dispatch_matches_inline_decisions() {
    let inline = {
        let env = stub_env(StubConfig::default());
        let mut ch = Scripted::new(&ANSWERS);
        run_session(&config(), &env, &mut ch, &mut policy(0.2), &mut VirtualClock::new()).unwrap()
    };
    let threaded = {
        let env = stub_env(StubConfig { latency_ms: 5, ..StubConfig::default() });
        let cfg = SessionConfig { dispatch: DispatchMode::Threaded, ..config() };
        let mut ch = Scripted::new(&ANSWERS);
        run_session(&cfg, &env, &mut ch, &mut policy(0.2), &mut VirtualClock::new()).unwrap()
    };
    let actions = |o: &coach_core::dialogue::SessionOutcome| {
        o.log.turns.iter().map(|t| t.decision.as_ref().unwrap().action).collect::<Vec<_>>()
    };
    assert_eq!(actions(&inline), actions(&threaded));
    assert_eq!(inline.transitions, threaded.transitions);
    assert!(threaded.log.ticks >= inline.log.ticks);
}

#[test]
fn precomputed_rupture_sets_state_bit() {
    let env = stub_env(StubConfig::default());
    let mut ch = Scripted::new(&ANSWERS);
    ch.answers[1].rupture_flag = Some(true);
    let out = run_session(&config(), &env, &mut ch, &mut policy(0.0), &mut VirtualClock::new()).unwrap();
    let s0 = &out.log.turns[0].decision.as_ref().unwrap().state;
    let s1 = &out.log.turns[1].decision.as_ref().unwrap().state;
    assert_eq!(s0.rupture_block(), &[1.0, 0.0]);
    assert_eq!(s1.rupture_block(), &[0.0, 1.0]);
}

#[test]
fn debug_trace_reports_decisions() {
    let env = stub_env(StubConfig::default());
    let cfg = SessionConfig { debug_trace: true, ..config() };
    let mut ch = Scripted::new(&ANSWERS);
    run_session(&cfg, &env, &mut ch, &mut policy(0.0), &mut VirtualClock::new()).unwrap();
    let traces = ch.events.iter().filter(|e| matches!(e, SessionEvent::DecisionTrace { .. })).count();
    assert_eq!(traces, 8);
    let json = serde_json::to_value(&ch.events[0]).unwrap();
    assert_eq!(json["type"], "coach_utterance");
    assert_eq!(json["source"], "intro");
}
