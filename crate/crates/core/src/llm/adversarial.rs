use serde::{Deserialize, Serialize};

use super::{
    complete, compose_human_turn, moderate_fail_closed, ChatHistory, LlmBackend, ModerationVerdict, REFUSAL_TEXT,
};
use crate::domain::DialogueAction;

/// Bundled corpus: one `label<TAB>text` entry per line, `#` comments allowed.
pub const DEFAULT_ADVERSARIAL_CORPUS: &str = include_str!("../../data/adversarial.tsv");

pub const BENIGN_LABEL: &str = "benign";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversarialCase {
    pub label: String,
    pub text: String,
}

impl AdversarialCase {
    pub fn expected_flag(&self) -> bool {
        self.label != BENIGN_LABEL
    }
}

pub fn parse_corpus(source: &str) -> Result<Vec<AdversarialCase>, String> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (label, text) = line
            .split_once('\t')
            .ok_or_else(|| format!("line {}: expected `label<TAB>text`", i + 1))?;
        if label.trim().is_empty() || text.trim().is_empty() {
            return Err(format!("line {}: empty label or text", i + 1));
        }
        out.push(AdversarialCase { label: label.trim().to_string(), text: text.trim().to_string() });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialRow {
    pub label: String,
    pub text: String,
    pub expected_flag: bool,
    pub input_verdict: ModerationVerdict,
    pub output_verdict: Option<ModerationVerdict>,
    pub refusal_fired: bool,
    /// What the coach would say: the refusal, or the checked completion.
    pub coach_utterance: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialReport {
    pub backend: String,
    pub rows: Vec<AdversarialRow>,
}

impl AdversarialReport {
    pub fn bad_total(&self) -> usize {
        self.rows.iter().filter(|r| r.expected_flag).count()
    }

    pub fn bad_refused(&self) -> usize {
        self.rows.iter().filter(|r| r.expected_flag && r.refusal_fired).count()
    }

    pub fn benign_refused(&self) -> usize {
        self.rows.iter().filter(|r| !r.expected_flag && r.refusal_fired).count()
    }
}

/// Runs every case through input moderation, completion and output moderation.
pub fn adversarial_suite(backend: &dyn LlmBackend, cases: &[AdversarialCase], system_context: &str) -> AdversarialReport {
    let rows = cases
        .iter()
        .map(|case| {
            let (input_verdict, in_err) = moderate_fail_closed(backend, &case.text);
            let mut row = AdversarialRow {
                label: case.label.clone(),
                text: case.text.clone(),
                expected_flag: case.expected_flag(),
                input_verdict: input_verdict.clone(),
                output_verdict: None,
                refusal_fired: false,
                coach_utterance: REFUSAL_TEXT.to_string(),
                error: in_err.map(|e| e.to_string()),
            };
            if input_verdict.flagged {
                row.refusal_fired = true;
                return row;
            }
            let mut history = ChatHistory::new(system_context);
            let prompt = compose_human_turn(&case.text, DialogueAction::FollowUpQuestion);
            match complete(backend, &mut history, &prompt) {
                Ok(reply) => {
                    let (out_verdict, out_err) = moderate_fail_closed(backend, &reply);
                    row.refusal_fired = out_verdict.flagged;
                    if !out_verdict.flagged {
                        row.coach_utterance = reply;
                    }
                    row.output_verdict = Some(out_verdict);
                    row.error = out_err.map(|e| e.to_string());
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect();
    AdversarialReport { backend: backend.name().to_string(), rows }
}
