mod plot;
mod report;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use coach_core::config::EngineConfig;
use coach_core::dialogue::{Script, SessionEnv, SessionLog};
use coach_core::domain::{StateNormalizer, Transition};
use coach_core::llm::{StubBackend, StubConfig};
use coach_core::policy::{train_batch, Algorithm, PolicyCheckpoint};
use coach_core::reward::RewardConfig;
use coach_core::rupture::{
    read_labels_csv, read_streams_csv, render_table, run_cv, synthetic_corpus, train_detector, write_labels_csv,
    write_streams_csv, CvReport, Fusion, Modality, RuptureDataset, RuptureModelKind,
};
use coach_core::sim::{generate_corpus, run_study, CalibrationStats, CorpusConfig, PolicyArm, StudyReport};
use coach_core::store;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "coach", version, about = "Adaptive coaching dialogue engine")]
struct Cli {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the calibrated synthetic transition corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a generic policy offline.
    TrainBatch(TrainBatchArgs),
    /// Cross-validate a rupture detector.
    EvalRupture(EvalRuptureArgs),
    /// Run the simulated generic-vs-adaptive study.
    SimulateStudy(SimulateArgs),
    /// Serve live sessions over HTTP and WebSocket.
    Serve(ServeArgs),
    /// Verify and print stored session logs.
    SessionReplay(ReplayArgs),
    /// Rebuild tables and the reward plot from a study report.
    ExportReport(ExportArgs),
}

#[derive(Debug, Args)]
struct GenCorpusArgs {
    #[arg(long)]
    profiles: Option<usize>,
    #[arg(long)]
    sessions: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainBatchArgs {
    /// dqn, double-dqn or nfq.
    #[arg(long, value_parser = kebab::<Algorithm>)]
    algo: Option<Algorithm>,
    /// Transition JSONL; its `.meta.json` sidecar supplies the normaliser.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint file stem.
    #[arg(long, default_value = "generic")]
    name: String,
}

#[derive(Debug, Args)]
struct EvalRuptureArgs {
    /// lstm, gru or bilstm.
    #[arg(long, value_parser = kebab::<RuptureModelKind>)]
    model: Option<RuptureModelKind>,
    /// facial, audio, early or late.
    #[arg(long, value_parser = kebab::<Fusion>)]
    fusion: Option<Fusion>,
    /// Directory with facial.csv, audio.csv and labels.csv; synthetic data when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluate every model and fusion combination.
    #[arg(long)]
    all: bool,
    /// Also fit the selected configuration on all data and save it as a detector checkpoint.
    #[arg(long)]
    save_detector: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Comma-separated: adaptive, generic.
    #[arg(long, value_delimiter = ',', value_parser = arm)]
    arms: Option<Vec<PolicyArm>>,
    /// Replications.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    coachees: Option<usize>,
    #[arg(long)]
    sessions: Option<usize>,
    /// Generic checkpoint; trained from the corpus when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Generic transitions for adaptive replay; generated when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Session log JSONL.
    #[arg(long)]
    log: PathBuf,
    /// Only this session.
    #[arg(long)]
    session: Option<String>,
    /// Recompute logged q-values with this (generic) checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// StudyReport JSON.
    #[arg(long)]
    report: PathBuf,
}

fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.trim().to_ascii_lowercase()))
        .map_err(|e| e.to_string().split(" at line").next().unwrap_or_default().to_string())
}

/// The value's spelling in config files and flags.
fn config_name<T: Serialize>(v: T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

fn arm(s: &str) -> Result<PolicyArm, String> {
    match s.trim() {
        "generic" | "generic-frozen" => Ok(PolicyArm::GenericFrozen),
        "adaptive" => Ok(PolicyArm::Adaptive),
        other => Err(format!("unknown arm `{other}`; valid: adaptive, generic")),
    }
}

/// Corpus facts the transitions alone do not carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CorpusMeta {
    id: String,
    normalizer: StateNormalizer,
    reward: RewardConfig,
    stats: CalibrationStats,
    config: CorpusConfig,
}

fn meta_path(corpus: &Path) -> PathBuf {
    corpus.with_extension("meta.json")
}

fn resolve(cli: &Cli) -> Result<EngineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.corpus.seed = s;
        cfg.batch.q.seed = s;
        cfg.online.seed = s;
        cfg.study.seed = s;
        cfg.study.online.seed = s;
        cfg.rupture.cv.seed = s;
        cfg.rupture.cv.train.seed = s;
        cfg.rupture.synth.seed = s;
        cfg.session.seed = s;
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    match &cli.command {
        Command::GenCorpus(a) => {
            cfg.corpus.profiles = a.profiles.unwrap_or(cfg.corpus.profiles);
            cfg.corpus.sessions = a.sessions.unwrap_or(cfg.corpus.sessions);
        }
        Command::TrainBatch(a) => {
            cfg.batch.algorithm = a.algo.unwrap_or(cfg.batch.algorithm);
            cfg.batch.q.train.epochs = a.epochs.unwrap_or(cfg.batch.q.train.epochs);
        }
        Command::EvalRupture(a) => {
            cfg.rupture.model = a.model.unwrap_or(cfg.rupture.model);
            cfg.rupture.fusion = a.fusion.unwrap_or(cfg.rupture.fusion);
        }
        Command::SimulateStudy(a) => {
            if let Some(arms) = &a.arms {
                cfg.study.arms = arms.clone();
            }
            cfg.study.replications = a.seeds.unwrap_or(cfg.study.replications);
            cfg.study.coachees = a.coachees.unwrap_or(cfg.study.coachees);
            cfg.study.sessions = a.sessions.unwrap_or(cfg.study.sessions);
        }
        Command::Serve(a) => {
            if let Some(b) = &a.bind {
                cfg.server.bind = b.clone();
            }
            if let Some(d) = &a.checkpoint_dir {
                cfg.server.checkpoint_dir = d.clone();
            }
        }
        Command::SessionReplay(_) | Command::ExportReport(_) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg.replace('\n', " ")
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    let resolved = cfg.to_toml_string();
    eprintln!("# resolved config\n{resolved}");
    if let Some(j) = cfg.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().context("worker pool")?;
    }
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    if !matches!(cli.command, Command::Serve(_)) {
        write(&cli.out.join("resolved_config.toml"), &resolved)?;
    }
    match &cli.command {
        Command::GenCorpus(_) => gen_corpus(&cfg, &cli.out),
        Command::TrainBatch(a) => train(&cfg, a, &cli.out),
        Command::EvalRupture(a) => eval_rupture(&cfg, a, &cli.out),
        Command::SimulateStudy(a) => simulate(&cfg, a, &cli.out),
        Command::Serve(_) => serve(cfg),
        Command::SessionReplay(a) => replay(a, &cli.out),
        Command::ExportReport(a) => {
            let r: StudyReport = store::read_json(&a.report)?;
            report::export(&r, &cli.out)
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_corpus(cfg: &EngineConfig, out: &Path) -> Result<()> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let path = out.join("corpus.jsonl");
    store::write_transitions(&path, &corpus.transitions())?;
    let meta = CorpusMeta {
        id: corpus.id.clone(),
        normalizer: corpus.normalizer,
        reward: corpus.reward,
        stats: corpus.stats,
        config: cfg.corpus.clone(),
    };
    store::write_json(&meta_path(&path), &meta)?;
    store::write_json(&out.join("profiles.json"), &corpus.profiles)?;
    let s = corpus.stats;
    println!("corpus {}: {} transitions, reward mean {:.3} std {:.3} median {:.3}", corpus.id, s.count, s.mean, s.std, s.median);
    println!("wrote {}", path.display());
    Ok(())
}

fn load_corpus(path: &Path) -> Result<(Vec<Transition>, CorpusMeta)> {
    let transitions = store::read_transitions(path)?;
    let meta: CorpusMeta = store::read_json(&meta_path(path))
        .with_context(|| format!("corpus metadata for {} (written by gen-corpus)", path.display()))?;
    Ok((transitions, meta))
}

fn train(cfg: &EngineConfig, a: &TrainBatchArgs, out: &Path) -> Result<()> {
    if a.name.is_empty() || !a.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        bail!("--name must be non-empty [A-Za-z0-9_-]");
    }
    let (transitions, meta) = load_corpus(&a.corpus)?;
    let outcome = train_batch(&transitions, cfg.batch.algorithm, &cfg.batch.q, meta.normalizer, meta.reward, &meta.id)?;
    let ckpt = out.join(format!("{}.ckpt", a.name));
    store::save_checkpoint(&ckpt, &outcome.checkpoint)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in outcome.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write(&out.join(format!("{}_loss.csv", a.name)), &csv)?;
    println!(
        "{} on {} transitions: final loss {:.5}",
        cfg.batch.algorithm.name(),
        transitions.len(),
        outcome.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn rupture_data(cfg: &EngineConfig, dir: Option<&Path>, out: &Path) -> Result<RuptureDataset> {
    let open = |name: &str| -> Result<BufReader<File>> {
        let p = dir.expect("data dir").join(name);
        Ok(BufReader::new(File::open(&p).with_context(|| format!("opening {}", p.display()))?))
    };
    let raw = match dir {
        Some(_) => RuptureDataset::from_streams(
            &read_streams_csv(open("facial.csv")?, Modality::Facial)?,
            &read_streams_csv(open("audio.csv")?, Modality::Audio)?,
            &read_labels_csv(open("labels.csv")?)?,
        )?,
        None => {
            let synth = synthetic_corpus(&cfg.rupture.synth)?;
            let data = out.join("synthetic_rupture");
            std::fs::create_dir_all(&data)?;
            write_streams_csv(File::create(data.join("facial.csv"))?, &synth.facial)?;
            write_streams_csv(File::create(data.join("audio.csv"))?, &synth.audio)?;
            write_labels_csv(File::create(data.join("labels.csv"))?, &synth.labels)?;
            synth.dataset()?
        }
    };
    Ok(raw.undersample(cfg.rupture.nearmiss_k)?)
}

fn fold_csv(report: &CvReport) -> String {
    let mut s = String::from(
        "model,fusion,repeat,fold,n_train,n_test,accuracy,precision,recall,f1,precision_undefined,recall_undefined,test_subjects\n",
    );
    for f in &report.folds {
        let m = &f.metrics;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            report.model.name(),
            report.fusion.name(),
            f.repeat,
            f.fold,
            f.n_train,
            f.n_test,
            m.accuracy,
            m.precision,
            m.recall,
            m.f1,
            m.precision_undefined,
            m.recall_undefined,
            f.test_subjects.join(" ")
        ));
    }
    s
}

fn eval_rupture(cfg: &EngineConfig, a: &EvalRuptureArgs, out: &Path) -> Result<()> {
    let ds = rupture_data(cfg, a.data.as_deref(), out)?;
    let combos: Vec<(RuptureModelKind, Fusion)> = if a.all {
        RuptureModelKind::ALL.iter().flat_map(|&m| Fusion::ALL.iter().map(move |&f| (m, f))).collect()
    } else {
        vec![(cfg.rupture.model, cfg.rupture.fusion)]
    };
    let mut reports = Vec::new();
    for (model, fusion) in combos {
        let r = run_cv(&ds, model, fusion, &cfg.rupture.cv)?;
        write(&out.join(format!("folds_{}_{}.csv", config_name(model), config_name(fusion))), &fold_csv(&r))?;
        reports.push(r);
    }
    let table = render_table(&reports);
    write(&out.join("rupture_summary.txt"), &table)?;
    store::write_json(&out.join("rupture_cv.json"), &reports)?;
    print!("{table}");
    if a.save_detector {
        let best = &reports[coach_core::rupture::rank_by_precision(&reports)[0]];
        let det = train_detector(&ds, best.model, best.fusion, &cfg.rupture.cv.train, cfg.rupture.cv.tie)?;
        let path = out.join("rupture.ckpt");
        store::save_detector(&path, &det)?;
        println!("wrote {} ({} {})", path.display(), best.model.name(), best.fusion.name());
    }
    Ok(())
}

fn simulate(cfg: &EngineConfig, a: &SimulateArgs, out: &Path) -> Result<()> {
    let (transitions, meta) = match &a.corpus {
        Some(p) => load_corpus(p)?,
        None => {
            let c = generate_corpus(&cfg.corpus)?;
            let meta = CorpusMeta {
                id: c.id.clone(),
                normalizer: c.normalizer,
                reward: c.reward,
                stats: c.stats,
                config: cfg.corpus.clone(),
            };
            (c.transitions(), meta)
        }
    };
    let generic: PolicyCheckpoint = match &a.checkpoint {
        Some(p) => store::load_checkpoint(p)?,
        None => {
            train_batch(&transitions, cfg.batch.algorithm, &cfg.batch.q, meta.normalizer, meta.reward, &meta.id)?.checkpoint
        }
    };
    let env = SessionEnv::new(
        Arc::new(Script::bundled()),
        Arc::new(StubBackend::new(StubConfig { seed: cfg.study.seed, ..StubConfig::default() })),
        generic.normalizer,
        generic.reward,
    );
    let mut report = run_study(&cfg.study, &generic, transitions.into(), &env)?;
    report.corpus_stats = Some(meta.stats);
    store::write_json(&out.join("study.json"), &report)?;
    report::export(&report, out)
}

fn serve(cfg: EngineConfig) -> Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let bind = cfg.server.bind.clone();
    let state = coach_server::AppState::new(cfg)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind).await.with_context(|| format!("binding {bind}"))?;
        println!("listening on {}", listener.local_addr()?);
        coach_server::serve(listener, state).await?;
        Ok(())
    })
}

#[derive(Debug, Serialize)]
struct ReplaySummary {
    session_id: String,
    coachee_id: String,
    termination: String,
    decision_turns: usize,
    mean_reward: Option<f64>,
    decisions_verified: bool,
    moderation_verified: bool,
    /// Decisions whose logged q-values the checkpoint reproduces exactly.
    q_reproduced: Option<usize>,
}

fn replay(a: &ReplayArgs, out: &Path) -> Result<()> {
    let mut logs = store::read_session_logs(&a.log)?;
    if let Some(id) = &a.session {
        logs.retain(|l| &l.session_id == id);
        if logs.is_empty() {
            bail!("no session `{id}` in {}", a.log.display());
        }
    }
    let qnet = match &a.checkpoint {
        Some(p) => Some(store::load_checkpoint(p)?.q_network()?),
        None => None,
    };
    let mut summaries = Vec::new();
    for log in &logs {
        print_transcript(log);
        let decisions = log.verify_decisions();
        let moderation = log.verify_moderation();
        let q_reproduced = qnet.as_ref().map(|q| {
            log.turns
                .iter()
                .filter_map(|t| t.decision.as_ref())
                .filter(|d| q.q_values(&d.state).is_ok_and(|v| v.map(f64::to_bits) == d.q_values.map(f64::to_bits)))
                .count()
        });
        if let Err(e) = &decisions {
            println!("  decisions: FAILED ({e})");
        }
        if let Err(e) = &moderation {
            println!("  moderation: FAILED ({e})");
        }
        if let Some(n) = q_reproduced {
            println!("  q-values reproduced by checkpoint: {n}/{}", log.decision_turns());
        }
        summaries.push(ReplaySummary {
            session_id: log.session_id.clone(),
            coachee_id: log.coachee_id.clone(),
            termination: log.termination.name().to_string(),
            decision_turns: log.decision_turns(),
            mean_reward: log.mean_reward(),
            decisions_verified: decisions.is_ok(),
            moderation_verified: moderation.is_ok(),
            q_reproduced,
        });
    }
    store::write_json(&out.join("replay.json"), &summaries)?;
    let bad = summaries.iter().filter(|s| !(s.decisions_verified && s.moderation_verified)).count();
    if bad > 0 {
        bail!("{bad} of {} sessions failed verification", summaries.len());
    }
    println!("{} sessions verified", summaries.len());
    Ok(())
}

fn print_transcript(log: &SessionLog) {
    println!(
        "session {} coachee {} {} week {}: {} ({} decision turns)",
        log.session_id,
        log.coachee_id,
        log.exercise.name(),
        log.session_index,
        log.termination.name(),
        log.decision_turns()
    );
    for u in &log.utterances {
        println!("  coach [{}]: {}", config_name(u.source), u.text);
    }
    for t in &log.turns {
        let said = t.input.as_ref().map(|i| i.transcript.as_str()).unwrap_or("");
        match &t.decision {
            Some(d) => println!(
                "  turn {}: \"{said}\" -> {} (reward {:.3}, q {:?})",
                t.turn_index,
                d.action.name(),
                d.reward.total,
                d.q_values
            ),
            None => println!("  turn {}: \"{said}\" (no decision)", t.turn_index),
        }
    }
}
