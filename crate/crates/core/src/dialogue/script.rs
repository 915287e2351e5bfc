use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DialogueError;
use crate::domain::{DialogueAction, ExerciseKind};

pub const DEFAULT_SCRIPT: &str = include_str!("../../data/script.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScriptPhase {
    Intro,
    FirstQuestion,
    Outro,
}

impl FromStr for ScriptPhase {
    type Err = DialogueError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "intro" => Ok(ScriptPhase::Intro),
            "first-question" => Ok(ScriptPhase::FirstQuestion),
            "outro" => Ok(ScriptPhase::Outro),
            other => Err(DialogueError::Script(format!(
                "unknown phase `{other}` (expected intro, first-question or outro)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExerciseScript {
    pub intro: String,
    pub first_question: String,
    pub outro: String,
    pub system_context: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommonLines {
    pub reprompt: String,
    pub fallback_summarise: String,
    pub fallback_follow_up: String,
    pub fallback_new_episode: String,
}

/// Fixed coach lines per exercise, loaded from TOML.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    pub version: u32,
    pub common: CommonLines,
    exercises: BTreeMap<ExerciseKind, ExerciseScript>,
}

impl Script {
    pub fn parse(source: &str) -> Result<Self, DialogueError> {
        let script: Script = toml::from_str(source).map_err(|e| DialogueError::Script(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, DialogueError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DialogueError::Script(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_SCRIPT).expect("bundled script is valid")
    }

    /// Every exercise must have every line, all non-empty.
    pub fn validate(&self) -> Result<(), DialogueError> {
        for ex in ExerciseKind::ALL {
            let Some(s) = self.exercises.get(&ex) else {
                return Err(DialogueError::Script(format!("missing script for exercise `{}`", ex.name())));
            };
            for (field, text) in [
                ("intro", &s.intro),
                ("first_question", &s.first_question),
                ("outro", &s.outro),
                ("system_context", &s.system_context),
            ] {
                if text.trim().is_empty() {
                    return Err(DialogueError::Script(format!("empty `{field}` for exercise `{}`", ex.name())));
                }
            }
        }
        let c = &self.common;
        for text in [&c.reprompt, &c.fallback_summarise, &c.fallback_follow_up, &c.fallback_new_episode] {
            if text.trim().is_empty() {
                return Err(DialogueError::Script("empty line in [common]".into()));
            }
        }
        Ok(())
    }

    pub fn exercise(&self, exercise: ExerciseKind) -> &ExerciseScript {
        // validated at construction
        &self.exercises[&exercise]
    }

    pub fn line(&self, exercise: ExerciseKind, phase: ScriptPhase) -> &str {
        let s = self.exercise(exercise);
        match phase {
            ScriptPhase::Intro => &s.intro,
            ScriptPhase::FirstQuestion => &s.first_question,
            ScriptPhase::Outro => &s.outro,
        }
    }

    /// Scripted stand-in when the language model cannot be reached.
    pub fn fallback(&self, action: DialogueAction) -> &str {
        match action {
            DialogueAction::Summarise => &self.common.fallback_summarise,
            DialogueAction::FollowUpQuestion => &self.common.fallback_follow_up,
            DialogueAction::NewEpisode => &self.common.fallback_new_episode,
        }
    }
}

/// Scripted coach line for `(exercise, phase)`; the phase is parsed from its name.
pub fn scripted_lines(script: &Script, exercise: ExerciseKind, phase: &str) -> Result<String, DialogueError> {
    Ok(script.line(exercise, phase.parse()?).to_string())
}
