//! XML action grammar: parse policy output into memory actions and render
//! actions back to text.
//!
//! Two tag vocabularies are supported. Both map onto the same
//! [`MemoryAction`] values:
//!
//! | action     | `Table`          | `Prompt`          |
//! |------------|------------------|-------------------|
//! | Create     | `create_memory`  | `add_memory`      |
//! | Read       | `read_memory`    | `update_query`    |
//! | Update     | `update_memory`  | `modify_memory`   |
//! | Delete     | `delete_memory`  | `delete_memory`   |
//! | Scratchpad | `scratchpad`     | `update_memory`   |
//!
//! `<answer>` carries the task answer under both. Tags are matched as
//! non-greedy pairs: an opening tag is closed by the first matching closing
//! tag after it, and anything in between is payload, markup included.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::EntryId;

static TAG: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"<\s*(/?)\s*([A-Za-z_][A-Za-z0-9_]*)\s*>").unwrap());
static UPDATE_PAYLOAD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)^(?i:(?:memory|entry)\s*)?(\d+)\s*:(.*)$").unwrap());
static DELETE_PAYLOAD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?i:(?:memory|entry)\s*)?(\d+)\s*[.:]?$").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MemoryAction {
    Create { content: String },
    Read { query: String },
    Update { id: EntryId, content: String },
    Delete { id: EntryId },
    Scratchpad { content: String },
}

impl MemoryAction {
    pub fn kind(&self) -> ActionKind {
        match self {
            MemoryAction::Create { .. } => ActionKind::Create,
            MemoryAction::Read { .. } => ActionKind::Read,
            MemoryAction::Update { .. } => ActionKind::Update,
            MemoryAction::Delete { .. } => ActionKind::Delete,
            MemoryAction::Scratchpad { .. } => ActionKind::Scratchpad,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Create,
    Read,
    Update,
    Delete,
    Scratchpad,
}

impl ActionKind {
    pub const ALL: [ActionKind; 5] = [
        ActionKind::Create,
        ActionKind::Read,
        ActionKind::Update,
        ActionKind::Delete,
        ActionKind::Scratchpad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Create => "create",
            ActionKind::Read => "read",
            ActionKind::Update => "update",
            ActionKind::Delete => "delete",
            ActionKind::Scratchpad => "scratchpad",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaVariant {
    #[default]
    Table,
    Prompt,
}

impl FromStr for SchemaVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(SchemaVariant::Table),
            "prompt" => Ok(SchemaVariant::Prompt),
            other => Err(format!(
                "unknown schema '{other}' (expected table or prompt)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Action(ActionKind),
    Answer,
}

pub const ANSWER_TAG: &str = "answer";

impl SchemaVariant {
    pub fn tag_name(self, kind: ActionKind) -> &'static str {
        use ActionKind::*;
        match (self, kind) {
            (SchemaVariant::Table, Create) => "create_memory",
            (SchemaVariant::Table, Read) => "read_memory",
            (SchemaVariant::Table, Update) => "update_memory",
            (SchemaVariant::Table, Delete) => "delete_memory",
            (SchemaVariant::Table, Scratchpad) => "scratchpad",
            (SchemaVariant::Prompt, Create) => "add_memory",
            (SchemaVariant::Prompt, Read) => "update_query",
            (SchemaVariant::Prompt, Update) => "modify_memory",
            (SchemaVariant::Prompt, Delete) => "delete_memory",
            (SchemaVariant::Prompt, Scratchpad) => "update_memory",
        }
    }

    fn lookup(self, name: &str) -> Option<Tag> {
        if name == ANSWER_TAG {
            return Some(Tag::Answer);
        }
        ActionKind::ALL
            .into_iter()
            .find(|k| self.tag_name(*k) == name)
            .map(Tag::Action)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseDiagnostic {
    UnknownTag {
        tag: String,
        offset: usize,
    },
    UnclosedTag {
        tag: String,
        offset: usize,
    },
    StrayClosingTag {
        tag: String,
        offset: usize,
    },
    MissingId {
        tag: String,
        offset: usize,
    },
    BadId {
        tag: String,
        offset: usize,
        raw: String,
    },
    EmptyPayload {
        tag: String,
        offset: usize,
    },
    DuplicateAnswer {
        offset: usize,
    },
}

impl fmt::Display for ParseDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseDiagnostic::UnknownTag { tag, offset } => {
                write!(f, "unknown tag <{tag}> at byte {offset} was ignored")
            }
            ParseDiagnostic::UnclosedTag { tag, offset } => {
                write!(f, "<{tag}> at byte {offset} has no closing </{tag}>")
            }
            ParseDiagnostic::StrayClosingTag { tag, offset } => {
                write!(f, "</{tag}> at byte {offset} has no opening tag")
            }
            ParseDiagnostic::MissingId { tag, offset } => write!(
                f,
                "<{tag}> at byte {offset} does not name a memory (expected \"Memory i\")"
            ),
            ParseDiagnostic::BadId { tag, offset, raw } => {
                write!(
                    f,
                    "<{tag}> at byte {offset} has an invalid memory id '{raw}'"
                )
            }
            ParseDiagnostic::EmptyPayload { tag, offset } => {
                write!(f, "<{tag}> at byte {offset} is empty")
            }
            ParseDiagnostic::DuplicateAnswer { offset } => {
                write!(f, "extra <answer> at byte {offset} was ignored")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSequence {
    pub actions: Vec<MemoryAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<String>,
    #[serde(default)]
    pub diagnostics: Vec<ParseDiagnostic>,
}

impl ActionSequence {
    pub fn from_actions(actions: Vec<MemoryAction>) -> Self {
        Self {
            actions,
            ..Default::default()
        }
    }

    pub fn count(&self, kind: ActionKind) -> usize {
        self.actions.iter().filter(|a| a.kind() == kind).count()
    }

    pub fn reads(&self) -> impl Iterator<Item = &str> + '_ {
        self.actions.iter().filter_map(|a| match a {
            MemoryAction::Read { query } => Some(query.as_str()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("action {index} cannot be rendered: {reason}")]
    UnrenderableAction { index: usize, reason: &'static str },
}

/// Extracts all well-formed paired tags in document order. Never fails.
pub fn parse(text: &str, schema: SchemaVariant) -> ActionSequence {
    scan(text, schema).0
}

/// The text left after removing every tag and every consumed tag payload.
pub fn untagged_text(text: &str, schema: SchemaVariant) -> String {
    let (_, consumed) = scan(text, schema);
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for range in consumed {
        out.push_str(&text[cursor..range.start]);
        out.push(' ');
        cursor = range.end;
    }
    out.push_str(&text[cursor..]);
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn scan(text: &str, schema: SchemaVariant) -> (ActionSequence, Vec<Range<usize>>) {
    let mut seq = ActionSequence::default();
    let mut consumed = Vec::new();
    let mut cursor = 0;

    while let Some(caps) = TAG.captures_at(text, cursor) {
        let whole = caps.get(0).unwrap();
        let closing = !caps[1].is_empty();
        let name = caps[2].to_string();
        let offset = whole.start();
        cursor = whole.end();
        consumed.push(whole.range());

        let Some(tag) = schema.lookup(&name) else {
            seq.diagnostics
                .push(ParseDiagnostic::UnknownTag { tag: name, offset });
            continue;
        };
        if closing {
            seq.diagnostics
                .push(ParseDiagnostic::StrayClosingTag { tag: name, offset });
            continue;
        }
        let Some(close) = find_close(text, whole.end(), &name) else {
            seq.diagnostics
                .push(ParseDiagnostic::UnclosedTag { tag: name, offset });
            continue;
        };
        consumed.pop();
        consumed.push(offset..close.end);
        let payload = text[whole.end()..close.start].trim();
        cursor = close.end;

        match tag {
            Tag::Answer => {
                if seq.final_answer.is_some() {
                    seq.diagnostics
                        .push(ParseDiagnostic::DuplicateAnswer { offset });
                } else {
                    seq.final_answer = Some(payload.to_string());
                }
            }
            Tag::Action(kind) => match action_from_payload(kind, payload, &name, offset) {
                Ok(action) => seq.actions.push(action),
                Err(diag) => seq.diagnostics.push(diag),
            },
        }
    }
    (seq, consumed)
}

fn find_close(text: &str, from: usize, name: &str) -> Option<Range<usize>> {
    TAG.captures_iter(&text[from..])
        .find(|c| !c[1].is_empty() && &c[2] == name)
        .map(|c| {
            let m = c.get(0).unwrap();
            from + m.start()..from + m.end()
        })
}

fn action_from_payload(
    kind: ActionKind,
    payload: &str,
    tag: &str,
    offset: usize,
) -> Result<MemoryAction, ParseDiagnostic> {
    let empty = || ParseDiagnostic::EmptyPayload {
        tag: tag.to_string(),
        offset,
    };
    let missing = || ParseDiagnostic::MissingId {
        tag: tag.to_string(),
        offset,
    };
    let parse_id = |raw: &str| {
        raw.parse::<EntryId>().map_err(|_| ParseDiagnostic::BadId {
            tag: tag.to_string(),
            offset,
            raw: raw.to_string(),
        })
    };
    match kind {
        ActionKind::Create if payload.is_empty() => Err(empty()),
        ActionKind::Create => Ok(MemoryAction::Create {
            content: payload.to_string(),
        }),
        ActionKind::Read if payload.is_empty() => Err(empty()),
        ActionKind::Read => Ok(MemoryAction::Read {
            query: payload.to_string(),
        }),
        ActionKind::Scratchpad => Ok(MemoryAction::Scratchpad {
            content: payload.to_string(),
        }),
        ActionKind::Update => {
            if payload.is_empty() {
                return Err(empty());
            }
            let caps = UPDATE_PAYLOAD.captures(payload).ok_or_else(missing)?;
            let id = parse_id(&caps[1])?;
            let content = caps[2].trim();
            if content.is_empty() {
                return Err(empty());
            }
            Ok(MemoryAction::Update {
                id,
                content: content.to_string(),
            })
        }
        ActionKind::Delete => {
            if payload.is_empty() {
                return Err(empty());
            }
            let caps = DELETE_PAYLOAD.captures(payload).ok_or_else(missing)?;
            Ok(MemoryAction::Delete {
                id: parse_id(&caps[1])?,
            })
        }
    }
}

/// Renders a sequence in the given schema; `parse` of the result gives the
/// sequence back as long as no payload contains tag markup.
pub fn render(seq: &ActionSequence, schema: SchemaVariant) -> Result<String, RenderError> {
    let mut blocks = Vec::with_capacity(seq.actions.len() + 1);
    for (index, action) in seq.actions.iter().enumerate() {
        let unrenderable = |reason| RenderError::UnrenderableAction { index, reason };
        let body = match action {
            MemoryAction::Create { content } if content.trim().is_empty() => {
                return Err(unrenderable("empty content"))
            }
            MemoryAction::Read { query } if query.trim().is_empty() => {
                return Err(unrenderable("empty query"))
            }
            MemoryAction::Update { content, .. } if content.trim().is_empty() => {
                return Err(unrenderable("empty content"))
            }
            MemoryAction::Create { content } | MemoryAction::Scratchpad { content } => {
                content.clone()
            }
            MemoryAction::Read { query } => query.clone(),
            MemoryAction::Update { id, content } => match schema {
                SchemaVariant::Table => format!("{id}: {content}"),
                SchemaVariant::Prompt => format!("Memory {id}: {content}"),
            },
            MemoryAction::Delete { id } => match schema {
                SchemaVariant::Table => id.to_string(),
                SchemaVariant::Prompt => format!("Memory {id}"),
            },
        };
        blocks.push(wrap(schema, schema.tag_name(action.kind()), &body));
    }
    if let Some(answer) = &seq.final_answer {
        blocks.push(wrap(schema, ANSWER_TAG, answer));
    }
    Ok(blocks.join("\n"))
}

fn wrap(schema: SchemaVariant, tag: &str, body: &str) -> String {
    match schema {
        SchemaVariant::Table => format!("<{tag}>{body}</{tag}>"),
        SchemaVariant::Prompt => format!("<{tag}>\n{body}\n</{tag}>"),
    }
}
