//! Dialogues and the role-prefixed conversation text template:
//!
//! ```text
//! System: default
//! User: Where does she live?
//! Assistant: She lives in
//! ```
//!
//! The last turn may be a partial assistant answer that a model is expected
//! to continue.

use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::prompts::append_to_system;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn label(self) -> &'static str {
        match self {
            Role::System => "System",
            Role::User => "User",
            Role::Assistant => "Assistant",
        }
    }

    /// Header that starts a turn in the text template, including the space.
    pub fn header(self) -> String {
        format!("{}: ", self.label())
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

impl Turn {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// A validated conversation: a system turn followed by user/assistant turns
/// that alternate starting with the user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn new(id: impl Into<String>, turns: Vec<Turn>) -> Result<Self> {
        let d = Self {
            id: id.into(),
            turns,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match self.turns.first() {
            None => return Err(Error::invalid("dialogue has no turns")),
            Some(t) if t.role != Role::System => {
                return Err(Error::invalid(format!(
                    "first turn must be system, found {}",
                    t.role
                )))
            }
            _ => {}
        }
        for (i, turn) in self.turns.iter().enumerate().skip(1) {
            let expected = if i % 2 == 1 { Role::User } else { Role::Assistant };
            if turn.role != expected {
                return Err(Error::invalid(format!(
                    "turn {i} is {} but {expected} was expected",
                    turn.role
                )));
            }
        }
        Ok(())
    }
}

/// Renders turns as role-prefixed lines joined by newlines.
pub fn render(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| format!("{}{}", t.role.header(), t.content))
        .collect::<Vec<_>>()
        .join("\n")
}

fn split_header(line: &str) -> Option<(Role, &str)> {
    [Role::System, Role::User, Role::Assistant]
        .into_iter()
        .find_map(|role| {
            let rest = line.strip_prefix(role.label())?.strip_prefix(':')?;
            Some((role, rest.strip_prefix(' ').unwrap_or(rest)))
        })
}

/// Parses template text into turns. The first turn must be the only system
/// turn; lines without a role header continue the previous turn.
pub fn parse_template(text: &str) -> Result<Vec<Turn>> {
    let mut turns: Vec<Turn> = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        match split_header(line) {
            Some((role, content)) => turns.push(Turn::new(role, content)),
            None => match turns.last_mut() {
                Some(last) => {
                    last.content.push('\n');
                    last.content.push_str(line);
                }
                None => {
                    return Err(Error::parse(
                        Some(i + 1),
                        "conversation must start with a role header",
                    ))
                }
            },
        }
    }
    match turns.first() {
        Some(t) if t.role == Role::System => {}
        _ => return Err(Error::parse(Some(1), "conversation must start with a System turn")),
    }
    if let Some(i) = turns.iter().skip(1).position(|t| t.role == Role::System) {
        return Err(Error::parse(None, format!("unexpected second System turn (turn {})", i + 1)));
    }
    Ok(turns)
}

/// Copy of `turns` with `sentence` appended to the system prompt.
pub fn with_system_suffix(turns: &[Turn], sentence: &str) -> Vec<Turn> {
    let mut out = turns.to_vec();
    if let Some(system) = out.first_mut().filter(|t| t.role == Role::System) {
        system.content = append_to_system(&system.content, sentence);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDialogue {
    id: String,
    messages: Vec<Turn>,
}

/// Reads JSONL dialogues, one `{"id", "messages": [{"role", "content"}]}`
/// per line. Invalid records are skipped and reported with 1-based line
/// numbers; blank lines are ignored.
pub fn parse_dialogues<R: BufRead>(reader: R) -> Result<(Vec<Dialogue>, Vec<RecordError>)> {
    let mut dialogues = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(Some(i + 1), e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RawDialogue>(&line)
            .map_err(|e| e.to_string())
            .and_then(|raw| Dialogue::new(raw.id, raw.messages).map_err(|e| e.to_string()));
        match parsed {
            Ok(d) => dialogues.push(d),
            Err(message) => {
                log::warn!("skipping dialogue on line {}: {message}", i + 1);
                errors.push(RecordError {
                    line: i + 1,
                    message,
                });
            }
        }
    }
    Ok((dialogues, errors))
}
