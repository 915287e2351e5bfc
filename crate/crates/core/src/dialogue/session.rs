use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    BehaviorTree, ChannelPoll, Clock, CoacheeChannel, CoacheeTurnInput, DecisionRecord, DialogueError, DispatchMode,
    LoggedUtterance, ModerationCheck, Node, RuptureDetector, RuptureReading, RuptureSource, Script, ScriptPhase,
    SessionConfig, SessionEvent, SessionLog, SessionOutcome, Status, TerminationReason, TurnRecord, TurnTiming,
    UtteranceSource,
};
use crate::domain::{encode_state, DialogueAction, StateNormalizer, StateVector, Transition, TurnObservation};
use crate::llm::{
    build_prompt, complete, compose_human_turn, moderate_fail_closed, ChatHistory, LlmBackend, LlmError,
    ModerationVerdict, REFUSAL_TEXT,
};
use crate::policy::{select_action_with, ActionDraw, DecisionPolicy};
use crate::reward::{calibrate_baseline, turn_reward, BaselineValence, DurationStats, RewardConfig};

/// Shared, read-only services a session runs against.
#[derive(Clone)]
pub struct SessionEnv {
    pub script: Arc<Script>,
    pub llm: Arc<dyn LlmBackend>,
    pub normalizer: StateNormalizer,
    pub reward: RewardConfig,
    /// Speech statistics for the reward term; the normalizer's when absent.
    pub speech_stats: Option<DurationStats>,
    pub rupture: Option<Arc<dyn RuptureDetector>>,
}

impl SessionEnv {
    pub fn new(script: Arc<Script>, llm: Arc<dyn LlmBackend>, normalizer: StateNormalizer, reward: RewardConfig) -> Self {
        Self { script, llm, normalizer, reward, speech_stats: None, rupture: None }
    }
}

/// A call that runs inline or on a worker thread, polled from the tick loop.
enum Job<T> {
    Idle,
    Inflight(Receiver<T>),
    Done(T),
}

impl<T: Send + 'static> Job<T> {
    fn is_idle(&self) -> bool {
        matches!(self, Job::Idle)
    }

    fn start(&mut self, mode: DispatchMode, f: impl FnOnce() -> T + Send + 'static) {
        *self = match mode {
            DispatchMode::Inline => Job::Done(f()),
            DispatchMode::Threaded => {
                let (tx, rx) = mpsc::channel();
                std::thread::spawn(move || {
                    let _ = tx.send(f());
                });
                Job::Inflight(rx)
            }
        };
    }

    /// `Some(Err(()))` when the worker died without answering.
    fn poll(&mut self) -> Option<Result<T, ()>> {
        match std::mem::replace(self, Job::Idle) {
            Job::Idle => None,
            Job::Done(v) => Some(Ok(v)),
            Job::Inflight(rx) => match rx.try_recv() {
                Ok(v) => Some(Ok(v)),
                Err(TryRecvError::Empty) => {
                    *self = Job::Inflight(rx);
                    None
                }
                Err(TryRecvError::Disconnected) => Some(Err(())),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Opening,
    Dialogue,
}

type Completion = Result<(String, ChatHistory), LlmError>;
type Moderation = (ModerationVerdict, Option<LlmError>);

struct TurnState {
    record: TurnRecord,
    waiting_since: f64,
    input: Option<CoacheeTurnInput>,
    action: Option<DialogueAction>,
    human_turn: String,
    in_mod: Job<Moderation>,
    out_mod: Job<Moderation>,
    llm: Job<Completion>,
    next_attempt_at: f64,
    utterance: Option<(String, UtteranceSource)>,
    completed_history: Option<ChatHistory>,
}

struct Pending {
    state: StateVector,
    action: DialogueAction,
    reward: f64,
    turn_index: usize,
}

struct Ctx<'a> {
    cfg: &'a SessionConfig,
    env: &'a SessionEnv,
    channel: &'a mut dyn CoacheeChannel,
    policy: &'a mut dyn DecisionPolicy,
    now: f64,
    rng: ChaCha8Rng,
    phase: Phase,
    turns_done: usize,
    silent_streak: usize,
    termination: Option<TerminationReason>,
    error: Option<String>,
    finished: bool,
    baseline: BaselineValence,
    history: ChatHistory,
    previous_action: Option<DialogueAction>,
    pending: Option<Pending>,
    transitions: Vec<Transition>,
    turns: Vec<TurnRecord>,
    utterances: Vec<LoggedUtterance>,
    cur: Option<TurnState>,
}

impl<'a> Ctx<'a> {
    fn deliver(&mut self, event: SessionEvent) {
        if let SessionEvent::CoachUtterance { text, source, turn_index, .. } = &event {
            self.utterances.push(LoggedUtterance { source: *source, text: text.clone(), turn_index: *turn_index });
        }
        self.channel.deliver(&event);
    }

    fn say(&mut self, text: String, source: UtteranceSource, action: Option<DialogueAction>) {
        let turn_index = self.cur.as_ref().map(|t| t.record.turn_index);
        self.deliver(SessionEvent::CoachUtterance { text, source, turn_index, action });
    }

    fn terminate(&mut self, reason: TerminationReason) -> Status {
        self.termination.get_or_insert(reason);
        Status::Failure
    }

    fn fail(&mut self, message: String) -> Status {
        self.error.get_or_insert(message);
        self.terminate(TerminationReason::Error)
    }

    fn turn(&mut self) -> &mut TurnState {
        self.cur.as_mut().expect("turn state exists after AwaitCoachee")
    }

    fn finish(&mut self) -> Status {
        if self.finished {
            return Status::Success;
        }
        if let Some(t) = self.cur.take() {
            self.turns.push(t.record);
        }
        if let Some(p) = self.pending.take() {
            // the last state has no successor
            self.transitions.push(Transition {
                state: p.state.clone(),
                action: p.action,
                reward: p.reward,
                next_state: p.state,
                done: true,
                coachee_id: self.cfg.coachee_id.clone(),
                session_index: self.cfg.session_index,
                turn_index: p.turn_index,
            });
        }
        let reason = *self.termination.get_or_insert(TerminationReason::Completed);
        self.deliver(SessionEvent::SessionEnd { reason });
        self.finished = true;
        Status::Success
    }

    fn say_intro(&mut self) -> Status {
        let line = self.env.script.line(self.cfg.exercise, ScriptPhase::Intro).to_string();
        self.say(line, UtteranceSource::Intro, None);
        let samples = self.channel.intro_valence();
        // neutral baseline when no calibration frames arrived
        let samples = if samples.is_empty() { vec![0.0] } else { samples };
        match calibrate_baseline(&samples) {
            Ok(b) => {
                self.baseline = b;
                Status::Success
            }
            Err(e) => self.fail(format!("baseline calibration: {e}")),
        }
    }

    fn say_first_question(&mut self) -> Status {
        let line = self.env.script.line(self.cfg.exercise, ScriptPhase::FirstQuestion).to_string();
        self.say(line, UtteranceSource::FirstQuestion, None);
        self.phase = Phase::Dialogue;
        Status::Success
    }

    fn await_coachee(&mut self) -> Status {
        if self.cur.as_ref().is_some_and(|t| t.input.is_some()) {
            return Status::Success;
        }
        if self.cur.is_none() {
            let turn_index = self.turns_done;
            self.cur = Some(TurnState {
                record: TurnRecord {
                    turn_index,
                    input: None,
                    reprompted: false,
                    silent: false,
                    input_moderation: None,
                    rupture: None,
                    decision: None,
                    llm_attempts: 0,
                    llm_error: None,
                    output_moderation: None,
                    coach_utterance: None,
                    utterance_source: None,
                    timing: TurnTiming { awaiting_at_s: self.now, ..TurnTiming::default() },
                },
                waiting_since: self.now,
                input: None,
                action: None,
                human_turn: String::new(),
                in_mod: Job::Idle,
                out_mod: Job::Idle,
                llm: Job::Idle,
                next_attempt_at: 0.0,
                utterance: None,
                completed_history: None,
            });
            self.deliver(SessionEvent::AwaitingInput { turn_index });
        }
        match self.channel.poll_input() {
            ChannelPoll::Ready(input) => {
                let input = sanitize(input);
                self.silent_streak = 0;
                self.accept_input(input);
                Status::Success
            }
            ChannelPoll::Disconnected => self.terminate(TerminationReason::ClientDisconnect),
            ChannelPoll::Pending => {
                let now = self.now;
                let timeout = self.cfg.listen_timeout_s;
                let t = self.turn();
                if now - t.waiting_since < timeout {
                    return Status::Running;
                }
                if !t.record.reprompted {
                    t.record.reprompted = true;
                    t.waiting_since = now;
                    let line = self.env.script.common.reprompt.clone();
                    self.say(line, UtteranceSource::Reprompt, None);
                    return Status::Running;
                }
                let silence = now - t.record.timing.awaiting_at_s;
                t.record.silent = true;
                self.silent_streak += 1;
                self.accept_input(CoacheeTurnInput { silence_duration_s: silence, ..CoacheeTurnInput::default() });
                if self.silent_streak > self.cfg.max_silent_turns {
                    return self.terminate(TerminationReason::Timeout);
                }
                Status::Success
            }
        }
    }

    fn accept_input(&mut self, input: CoacheeTurnInput) {
        let now = self.now;
        let t = self.turn();
        t.record.timing.input_at_s = Some(now);
        t.record.input = Some(input.clone());
        t.input = Some(input);
    }

    fn moderate_input(&mut self) -> Status {
        let mode = self.cfg.dispatch;
        let llm = Arc::clone(&self.env.llm);
        let t = self.turn();
        let text = t.input.as_ref().map(|i| i.transcript.clone()).unwrap_or_default();
        if text.trim().is_empty() || t.record.input_moderation.is_some() {
            return Status::Success;
        }
        if t.in_mod.is_idle() {
            t.in_mod.start(mode, move || moderate_fail_closed(&*llm, &text));
        }
        let Some(result) = t.in_mod.poll() else { return Status::Running };
        let check = moderation_check(result);
        let flagged = check.verdict.flagged;
        t.record.input_moderation = Some(check);
        if flagged {
            return self.terminate(TerminationReason::ModerationStop);
        }
        Status::Success
    }

    fn detect_rupture(&mut self) -> Status {
        let threshold = self.cfg.rupture_threshold;
        let detector = self.env.rupture.clone();
        let t = self.turn();
        let input = t.input.as_ref().expect("input accepted");
        let reading = match (input.rupture_flag, &input.features, detector) {
            (Some(flag), _, _) => {
                RuptureReading { flag, probability: None, source: RuptureSource::Precomputed, error: None }
            }
            (None, Some(features), Some(det)) => match det.ir_probability(features) {
                Ok(p) => RuptureReading {
                    flag: p >= threshold,
                    probability: Some(p),
                    source: RuptureSource::Model,
                    error: None,
                },
                Err(e) => RuptureReading { flag: false, probability: None, source: RuptureSource::Default, error: Some(e) },
            },
            _ => RuptureReading { flag: false, probability: None, source: RuptureSource::Default, error: None },
        };
        t.record.rupture = Some(reading);
        Status::Success
    }

    fn decide(&mut self) -> Status {
        let now = self.now;
        let t = self.cur.as_ref().expect("turn state");
        let input = t.input.clone().expect("input accepted");
        let turn_index = t.record.turn_index;
        let observation = TurnObservation {
            rupture_flag: t.record.rupture.as_ref().is_some_and(|r| r.flag),
            exercise: self.cfg.exercise,
            speech_duration_s: input.speech_duration_s,
            silence_duration_s: input.silence_duration_s,
            previous_action: self.previous_action,
            turn_index,
        };
        let state = match encode_state(&observation, &self.env.normalizer) {
            Ok(s) => s,
            Err(e) => return self.fail(format!("state encoding: {e}")),
        };
        let valence = if input.valence.is_empty() { vec![self.baseline.value] } else { input.valence.clone() };
        let stats = self.env.speech_stats.unwrap_or(self.env.normalizer.speech);
        let reward = match turn_reward(&valence, input.speech_duration_s, &self.baseline, &stats, &self.env.reward) {
            Ok(r) => r,
            Err(e) => return self.fail(format!("reward: {e}")),
        };

        let update = self.pending.take().map(|p| {
            let tr = Transition {
                state: p.state,
                action: p.action,
                reward: p.reward,
                next_state: state.clone(),
                done: false,
                coachee_id: self.cfg.coachee_id.clone(),
                session_index: self.cfg.session_index,
                turn_index: p.turn_index,
            };
            let report = self.policy.observe(&tr);
            self.transitions.push(tr);
            report
        });

        let q_values = match self.policy.q_values(&state) {
            Ok(q) => q,
            Err(e) => return self.fail(format!("policy: {e}")),
        };
        let epsilon = self.policy.epsilon();
        let draw = ActionDraw::sample(&mut self.rng);
        let action = select_action_with(&q_values, epsilon, draw);
        self.pending = Some(Pending { state: state.clone(), action, reward: reward.total, turn_index });
        self.previous_action = Some(action);

        if self.cfg.debug_trace {
            self.deliver(SessionEvent::DecisionTrace { turn_index, action, q_values, epsilon });
        }
        let prompt = build_prompt(action).to_string();
        let t = self.turn();
        t.human_turn = compose_human_turn(&input.transcript, action);
        t.action = Some(action);
        t.record.timing.decided_at_s = Some(now);
        t.record.decision =
            Some(DecisionRecord { observation, state, reward, q_values, epsilon, draw, action, prompt, update });
        Status::Success
    }

    fn prompt_llm(&mut self) -> Status {
        let now = self.now;
        let mode = self.cfg.dispatch;
        let retries = self.cfg.llm_retries;
        let backoff = self.cfg.retry_backoff_s;
        let llm = Arc::clone(&self.env.llm);
        let mut history = self.history.clone();
        let t = self.cur.as_mut().expect("turn state");
        if t.utterance.is_some() {
            return Status::Success;
        }
        if t.llm.is_idle() {
            if now < t.next_attempt_at {
                return Status::Running;
            }
            let human = t.human_turn.clone();
            t.record.llm_attempts += 1;
            t.llm.start(mode, move || complete(&*llm, &mut history, &human).map(|reply| (reply, history)));
        }
        let Some(result) = t.llm.poll() else { return Status::Running };
        match result {
            Ok(Ok((reply, history))) => {
                t.record.llm_error = None;
                t.utterance = Some((reply, UtteranceSource::Llm));
                t.completed_history = Some(history);
                Status::Success
            }
            failed => {
                let err = match failed {
                    Ok(Err(e)) => e.to_string(),
                    _ => "language model worker exited".to_string(),
                };
                t.record.llm_error = Some(err);
                if t.record.llm_attempts > retries {
                    let action = t.action.expect("decided");
                    t.utterance = Some((self.env.script.fallback(action).to_string(), UtteranceSource::Fallback));
                    return Status::Success;
                }
                t.next_attempt_at = now + backoff * 2f64.powi(t.record.llm_attempts as i32 - 1);
                Status::Running
            }
        }
    }

    fn moderate_output(&mut self) -> Status {
        let mode = self.cfg.dispatch;
        let llm = Arc::clone(&self.env.llm);
        let t = self.turn();
        let Some((text, source)) = t.utterance.clone() else { return Status::Failure };
        if source != UtteranceSource::Llm || t.record.output_moderation.is_some() {
            return Status::Success;
        }
        if t.out_mod.is_idle() {
            t.out_mod.start(mode, move || moderate_fail_closed(&*llm, &text));
        }
        let Some(result) = t.out_mod.poll() else { return Status::Running };
        let check = moderation_check(result);
        let flagged = check.verdict.flagged;
        t.record.output_moderation = Some(check);
        if flagged {
            return self.terminate(TerminationReason::ModerationStop);
        }
        Status::Success
    }

    fn speak(&mut self) -> Status {
        let now = self.now;
        let Some(mut t) = self.cur.take() else { return Status::Failure };
        let Some((text, source)) = t.utterance.take() else { return Status::Failure };
        if let Some(h) = t.completed_history.take() {
            self.history = h;
        }
        t.record.coach_utterance = Some(text.clone());
        t.record.utterance_source = Some(source);
        t.record.timing.spoken_at_s = Some(now);
        let turn_index = t.record.turn_index;
        self.deliver(SessionEvent::CoachUtterance { text, source, turn_index: Some(turn_index), action: t.action });
        self.turns.push(t.record);
        self.turns_done += 1;
        Status::Success
    }

    fn say_refusal(&mut self) -> Status {
        if let Some(t) = self.cur.as_mut() {
            t.record.coach_utterance = Some(REFUSAL_TEXT.to_string());
            t.record.utterance_source = Some(UtteranceSource::Refusal);
        }
        self.say(REFUSAL_TEXT.to_string(), UtteranceSource::Refusal, None);
        Status::Success
    }

    fn say_outro(&mut self) -> Status {
        let line = self.env.script.line(self.cfg.exercise, ScriptPhase::Outro).to_string();
        self.say(line, UtteranceSource::Outro, None);
        Status::Success
    }
}

fn moderation_check(result: Result<Moderation, ()>) -> ModerationCheck {
    match result {
        Ok((verdict, err)) => ModerationCheck { verdict, error: err.map(|e| e.to_string()) },
        Err(()) => ModerationCheck {
            verdict: ModerationVerdict::fail_closed(),
            error: Some("moderation worker exited".into()),
        },
    }
}

/// Non-finite or negative durations from a client become zero.
fn sanitize(mut input: CoacheeTurnInput) -> CoacheeTurnInput {
    for d in [&mut input.speech_duration_s, &mut input.silence_duration_s] {
        if !(d.is_finite() && *d >= 0.0) {
            *d = 0.0;
        }
    }
    input.valence.retain(|v| v.is_finite());
    input
}

fn session_tree<'a>() -> Node<Ctx<'a>> {
    let active = |c: &Ctx<'_>| c.phase == Phase::Dialogue && c.termination.is_none();
    Node::fallback(
        "Session",
        vec![
            Node::sequence(
                "Opening",
                vec![
                    Node::condition("InOpening", |c: &Ctx<'_>| c.phase == Phase::Opening),
                    Node::leaf("SayIntro", |c: &mut Ctx<'_>| c.say_intro()),
                    Node::leaf("SayFirstQuestion", |c: &mut Ctx<'_>| c.say_first_question()),
                ],
            ),
            Node::sequence(
                "Turn",
                vec![
                    Node::condition("Active", active),
                    Node::condition("BelowTurnLimit", |c: &Ctx<'_>| c.turns_done < c.cfg.turn_limit),
                    Node::leaf("AwaitCoachee", |c: &mut Ctx<'_>| c.await_coachee()),
                    Node::leaf("ModerateInput", |c: &mut Ctx<'_>| c.moderate_input()),
                    Node::leaf("DetectRupture", |c: &mut Ctx<'_>| c.detect_rupture()),
                    Node::leaf("Decide", |c: &mut Ctx<'_>| c.decide()),
                    Node::leaf("Prompt", |c: &mut Ctx<'_>| c.prompt_llm()),
                    Node::leaf("ModerateOutput", |c: &mut Ctx<'_>| c.moderate_output()),
                    Node::leaf("Speak", |c: &mut Ctx<'_>| c.speak()),
                ],
            ),
            Node::sequence(
                "Refusal",
                vec![
                    Node::condition("ModerationStopped", |c: &Ctx<'_>| {
                        c.termination == Some(TerminationReason::ModerationStop)
                    }),
                    Node::leaf("SayRefusal", |c: &mut Ctx<'_>| c.say_refusal()),
                    Node::leaf("Finish", |c: &mut Ctx<'_>| c.finish()),
                ],
            ),
            Node::sequence(
                "Outro",
                vec![
                    Node::condition("Active", active),
                    Node::condition("TurnLimitReached", |c: &Ctx<'_>| c.turns_done >= c.cfg.turn_limit),
                    Node::leaf("SayOutro", |c: &mut Ctx<'_>| c.say_outro()),
                    Node::leaf("Finish", |c: &mut Ctx<'_>| c.finish()),
                ],
            ),
            Node::sequence(
                "Terminated",
                vec![
                    Node::condition("Terminated", |c: &Ctx<'_>| c.termination.is_some()),
                    Node::leaf("Finish", |c: &mut Ctx<'_>| c.finish()),
                ],
            ),
        ],
    )
}

/// A session advanced one tick at a time by the caller.
pub struct SessionMachine<'a> {
    ctx: Ctx<'a>,
    tree: BehaviorTree<Ctx<'a>>,
}

impl<'a> SessionMachine<'a> {
    pub fn new(
        cfg: &'a SessionConfig,
        env: &'a SessionEnv,
        channel: &'a mut dyn CoacheeChannel,
        policy: &'a mut dyn DecisionPolicy,
    ) -> Result<Self, DialogueError> {
        cfg.validate()?;
        env.reward.validate().map_err(|e| DialogueError::Config(e.to_string()))?;
        policy.begin_session(cfg.session_index);
        let system = env.script.exercise(cfg.exercise).system_context.clone();
        let ctx = Ctx {
            cfg,
            env,
            channel,
            policy,
            now: 0.0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            phase: Phase::Opening,
            turns_done: 0,
            silent_streak: 0,
            termination: None,
            error: None,
            finished: false,
            baseline: BaselineValence { value: 0.0, sample_count: 0 },
            history: ChatHistory::new(system),
            previous_action: None,
            pending: None,
            transitions: Vec::new(),
            turns: Vec::new(),
            utterances: Vec::new(),
            cur: None,
        };
        Ok(Self { ctx, tree: BehaviorTree::new(session_tree()) })
    }

    /// Evaluates the tree once at time `now_s`.
    pub fn tick(&mut self, now_s: f64) -> Status {
        if self.ctx.finished {
            return Status::Success;
        }
        self.ctx.now = now_s;
        let status = self.tree.tick(&mut self.ctx);
        if status == Status::Failure && !self.ctx.finished {
            self.ctx.fail("behavior tree found no applicable branch".into());
            self.ctx.finish();
        }
        if let Some(max) = self.ctx.cfg.max_ticks {
            if !self.ctx.finished && self.tree.ticks() >= max {
                self.ctx.fail(format!("tick budget of {max} exhausted"));
                self.ctx.finish();
            }
        }
        status
    }

    pub fn is_finished(&self) -> bool {
        self.ctx.finished
    }

    pub fn ticks(&self) -> u64 {
        self.tree.ticks()
    }

    pub fn last_path(&self) -> &[String] {
        self.tree.last_path()
    }

    pub fn turns_completed(&self) -> usize {
        self.ctx.turns_done
    }

    pub fn termination(&self) -> Option<TerminationReason> {
        self.ctx.termination
    }

    pub fn into_outcome(self) -> SessionOutcome {
        let c = self.ctx;
        let log = SessionLog {
            session_id: c.cfg.session_id.clone(),
            coachee_id: c.cfg.coachee_id.clone(),
            exercise: c.cfg.exercise,
            session_index: c.cfg.session_index,
            policy_ref: c.cfg.policy_ref.clone(),
            baseline: c.baseline,
            utterances: c.utterances,
            turns: c.turns,
            termination: c.termination.unwrap_or(TerminationReason::Error),
            error: c.error,
            ticks: self.tree.ticks(),
            duration_s: c.now,
        };
        SessionOutcome { log, transitions: c.transitions }
    }
}

/// Runs one session to completion at the configured tick rate.
pub fn run_session(
    cfg: &SessionConfig,
    env: &SessionEnv,
    channel: &mut dyn CoacheeChannel,
    policy: &mut dyn DecisionPolicy,
    clock: &mut dyn Clock,
) -> Result<SessionOutcome, DialogueError> {
    let period = 1.0 / cfg.tick_rate_hz;
    let mut machine = SessionMachine::new(cfg, env, channel, policy)?;
    loop {
        machine.tick(clock.now_s());
        if machine.is_finished() {
            break;
        }
        clock.wait_tick(period);
    }
    Ok(machine.into_outcome())
}
