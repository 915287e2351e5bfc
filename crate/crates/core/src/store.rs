//! On-disk formats: binary checkpoints, transition corpora and session logs (JSONL).
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! magic "COACHCKP" | version u32 | kind u8 | payload_len u64 | fnv1a-64(payload) u64 | payload
//! payload = meta_len u64 | meta JSON | f64 params...
//! ```

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::hash::Hasher;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{LoggedUtterance, SessionLog, TerminationReason, TurnRecord};
use crate::domain::{decode_action, ExerciseKind, StateVector, Transition};
use crate::policy::PolicyCheckpoint;
use crate::reward::BaselineValence;
use crate::rupture::TrainedRuptureDetector;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"COACHCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 1 + 8 + 8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint holds a {found}, expected a {expected}")]
    Kind { expected: &'static str, found: &'static str },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("{0}")]
    Format(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum CheckpointKind {
    Policy = 1,
    RuptureDetector = 2,
}

impl CheckpointKind {
    fn from_u8(v: u8) -> Result<Self, StoreError> {
        match v {
            1 => Ok(Self::Policy),
            2 => Ok(Self::RuptureDetector),
            other => Err(StoreError::Corrupt(format!("unknown checkpoint kind {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Policy => "policy checkpoint",
            Self::RuptureDetector => "rupture detector",
        }
    }
}

pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn encode_container(kind: CheckpointKind, meta: &[u8], params: &[f64]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(8 + meta.len() + params.len() * 8);
    payload.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    payload.extend_from_slice(meta);
    for p in params {
        payload.extend_from_slice(&p.to_le_bytes());
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&checksum(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Validates the header and checksum; returns the kind, meta bytes and params.
pub fn decode_container(bytes: &[u8]) -> Result<(CheckpointKind, &[u8], Vec<f64>), StoreError> {
    if bytes.len() < 8 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(StoreError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(StoreError::Corrupt(format!("header truncated at {} bytes", bytes.len())));
    }
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(StoreError::Version { found: version, supported: CHECKPOINT_VERSION });
    }
    let kind = CheckpointKind::from_u8(bytes[12])?;
    let payload_len = u64_at(13);
    let stored = u64_at(21);
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != payload_len {
        return Err(StoreError::Corrupt(format!("payload is {} bytes, header says {payload_len}", payload.len())));
    }
    if checksum(payload) != stored {
        return Err(StoreError::Corrupt("checksum mismatch".into()));
    }
    if payload.len() < 8 {
        return Err(StoreError::Corrupt("payload too short".into()));
    }
    let meta_len = u64::from_le_bytes(payload[..8].try_into().expect("8 bytes")) as usize;
    let rest = payload.len() - 8;
    if meta_len > rest || (rest - meta_len) % 8 != 0 {
        return Err(StoreError::Corrupt(format!("bad meta length {meta_len}")));
    }
    let meta = &payload[8..8 + meta_len];
    let params = payload[8 + meta_len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((kind, meta, params))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn encode_checkpoint(ckpt: &PolicyCheckpoint) -> Vec<u8> {
    let meta = PolicyCheckpoint { params: Vec::new(), ..ckpt.clone() };
    let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
    encode_container(CheckpointKind::Policy, &meta, &ckpt.params)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<PolicyCheckpoint, StoreError> {
    let (kind, meta, params) = decode_container(bytes)?;
    if kind != CheckpointKind::Policy {
        return Err(StoreError::Kind { expected: CheckpointKind::Policy.name(), found: kind.name() });
    }
    let mut ckpt: PolicyCheckpoint =
        serde_json::from_slice(meta).map_err(|e| StoreError::Corrupt(format!("metadata: {e}")))?;
    ckpt.params = params;
    ckpt.q_network().map_err(|e| StoreError::Corrupt(e.to_string()))?;
    Ok(ckpt)
}

pub fn save_checkpoint(path: &Path, ckpt: &PolicyCheckpoint) -> Result<(), StoreError> {
    write_atomic(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyCheckpoint, StoreError> {
    decode_checkpoint(&std::fs::read(path).map_err(io_err(path))?)
}

/// Detector parameters live in the JSON meta block; the float encoding round-trips exactly.
pub fn save_detector(path: &Path, det: &TrainedRuptureDetector) -> Result<(), StoreError> {
    let meta = serde_json::to_vec(det).map_err(|e| StoreError::Format(e.to_string()))?;
    write_atomic(path, &encode_container(CheckpointKind::RuptureDetector, &meta, &[]))
}

pub fn load_detector(path: &Path) -> Result<TrainedRuptureDetector, StoreError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (kind, meta, _) = decode_container(&bytes)?;
    if kind != CheckpointKind::RuptureDetector {
        return Err(StoreError::Kind { expected: CheckpointKind::RuptureDetector.name(), found: kind.name() });
    }
    serde_json::from_slice(meta).map_err(|e| StoreError::Corrupt(format!("detector: {e}")))
}

/// One corpus row; `action` is the integer action code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub coachee_id: String,
    pub session_index: usize,
    pub turn_index: usize,
    pub state: StateVector,
    pub action: usize,
    pub reward: f64,
    pub next_state: StateVector,
    pub done: bool,
}

impl From<&Transition> for TransitionRecord {
    fn from(t: &Transition) -> Self {
        Self {
            coachee_id: t.coachee_id.clone(),
            session_index: t.session_index,
            turn_index: t.turn_index,
            state: t.state.clone(),
            action: t.action.code(),
            reward: t.reward,
            next_state: t.next_state.clone(),
            done: t.done,
        }
    }
}

impl TryFrom<TransitionRecord> for Transition {
    type Error = String;

    fn try_from(r: TransitionRecord) -> Result<Self, String> {
        if !r.reward.is_finite() {
            return Err("reward is not finite".into());
        }
        Ok(Transition {
            state: r.state,
            action: decode_action(r.action).map_err(|e| e.to_string())?,
            reward: r.reward,
            next_state: r.next_state,
            done: r.done,
            coachee_id: r.coachee_id,
            session_index: r.session_index,
            turn_index: r.turn_index,
        })
    }
}

fn write_lines<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>, append: bool) -> Result<(), StoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let mut line = serde_json::to_vec(&row).map_err(|e| StoreError::Format(e.to_string()))?;
        line.push(b'\n');
        w.write_all(&line).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Parses every non-blank line; errors carry the 1-based line number.
fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| StoreError::Line { line: i + 1, message: e.to_string() })?,
        );
    }
    Ok(out)
}

pub fn write_transitions(path: &Path, transitions: &[Transition]) -> Result<(), StoreError> {
    write_lines(path, transitions.iter().map(TransitionRecord::from), false)
}

pub fn read_transitions(path: &Path) -> Result<Vec<Transition>, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| StoreError::Line { line: i + 1, message };
        let rec: TransitionRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        out.push(Transition::try_from(rec).map_err(bad)?);
    }
    Ok(out)
}

/// Session-log JSONL line: one per turn, then a closing summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Turn { session_id: String, turn: TurnRecord },
    Summary(LogSummary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub session_id: String,
    pub coachee_id: String,
    pub exercise: ExerciseKind,
    pub session_index: usize,
    pub policy_ref: Option<String>,
    pub baseline: BaselineValence,
    pub utterances: Vec<LoggedUtterance>,
    pub turn_count: usize,
    pub termination: TerminationReason,
    pub error: Option<String>,
    pub ticks: u64,
    pub duration_s: f64,
}

pub fn log_lines(log: &SessionLog) -> Vec<LogLine> {
    let mut lines: Vec<LogLine> = log
        .turns
        .iter()
        .map(|t| LogLine::Turn { session_id: log.session_id.clone(), turn: t.clone() })
        .collect();
    lines.push(LogLine::Summary(LogSummary {
        session_id: log.session_id.clone(),
        coachee_id: log.coachee_id.clone(),
        exercise: log.exercise,
        session_index: log.session_index,
        policy_ref: log.policy_ref.clone(),
        baseline: log.baseline.clone(),
        utterances: log.utterances.clone(),
        turn_count: log.turns.len(),
        termination: log.termination,
        error: log.error.clone(),
        ticks: log.ticks,
        duration_s: log.duration_s,
    }));
    lines
}

/// Serializes a whole log as newline-terminated JSONL.
pub fn session_log_jsonl(log: &SessionLog) -> String {
    let mut out = String::new();
    for line in log_lines(log) {
        out.push_str(&serde_json::to_string(&line).expect("log line serializes"));
        out.push('\n');
    }
    out
}

pub fn append_session_log(path: &Path, log: &SessionLog) -> Result<(), StoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    // one write per line keeps appends from concurrent writers line-atomic
    for line in log_lines(log) {
        let mut bytes = serde_json::to_vec(&line).map_err(|e| StoreError::Format(e.to_string()))?;
        bytes.push(b'\n');
        file.write_all(&bytes).map_err(io_err(path))?;
    }
    Ok(())
}

/// Rebuilds logs from possibly interleaved lines, in summary order.
pub fn assemble_session_logs(lines: Vec<(usize, LogLine)>) -> Result<Vec<SessionLog>, StoreError> {
    let mut pending: HashMap<String, Vec<TurnRecord>> = HashMap::new();
    let mut logs = Vec::new();
    for (line, entry) in lines {
        match entry {
            LogLine::Turn { session_id, turn } => pending.entry(session_id).or_default().push(turn),
            LogLine::Summary(s) => {
                let turns = pending.remove(&s.session_id).unwrap_or_default();
                if turns.len() != s.turn_count {
                    return Err(StoreError::Line {
                        line,
                        message: format!(
                            "session {} summary expects {} turns, found {}",
                            s.session_id,
                            s.turn_count,
                            turns.len()
                        ),
                    });
                }
                logs.push(SessionLog {
                    session_id: s.session_id,
                    coachee_id: s.coachee_id,
                    exercise: s.exercise,
                    session_index: s.session_index,
                    policy_ref: s.policy_ref,
                    baseline: s.baseline,
                    utterances: s.utterances,
                    turns,
                    termination: s.termination,
                    error: s.error,
                    ticks: s.ticks,
                    duration_s: s.duration_s,
                });
            }
        }
    }
    if let Some(id) = pending.keys().min() {
        return Err(StoreError::Format(format!("session {id} has turns but no summary line")));
    }
    Ok(logs)
}

pub fn read_session_logs(path: &Path) -> Result<Vec<SessionLog>, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| StoreError::Line { line: i + 1, message: e.to_string() })?;
        lines.push((i + 1, entry));
    }
    assemble_session_logs(lines)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| StoreError::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| StoreError::Format(format!("{}: {e}", path.display())))
}

/// Generic JSONL helpers for other record types.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), StoreError> {
    write_lines(path, rows, false)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    read_lines(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(checksum(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(checksum(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(checksum(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn container_round_trip_and_bit_flip() {
        let bytes = encode_container(CheckpointKind::Policy, b"{}", &[1.5, -0.0, f64::MIN_POSITIVE]);
        let (kind, meta, params) = decode_container(&bytes).unwrap();
        assert_eq!(kind, CheckpointKind::Policy);
        assert_eq!(meta, b"{}");
        assert_eq!(params.iter().map(|p| p.to_bits()).collect::<Vec<_>>(), [1.5f64.to_bits(), (-0.0f64).to_bits(), f64::MIN_POSITIVE.to_bits()]);
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert!(matches!(decode_container(&bad), Err(StoreError::Corrupt(_))));
    }
}
