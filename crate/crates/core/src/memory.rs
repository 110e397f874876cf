//! Memory state and the CRUD transitions over it.
//!
//! A [`MemoryState`] holds the long-term entry store plus a distinguished
//! scratchpad slot. The scratchpad has no id and is never part of `entries`,
//! so no entry operation can reach it.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{ActionSequence, MemoryAction};
use crate::retrieval::Embedding;

pub type EntryId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MemoryError {
    #[error("memory content is empty")]
    EmptyContent,
    #[error("no memory entry with id {id}")]
    UnknownId { id: EntryId },
}

/// One stored memory item.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub id: EntryId,
    pub content: String,
    pub created_step: u64,
    pub updated_step: u64,
    /// Lazily filled by retrieval; reset whenever the content changes.
    #[serde(skip)]
    pub(crate) embedding: OnceLock<Embedding>,
}

impl MemoryEntry {
    fn new(id: EntryId, content: String, step: u64) -> Self {
        Self {
            id,
            content,
            created_step: step,
            updated_step: step,
            embedding: OnceLock::new(),
        }
    }

    pub fn embedding(&self) -> Option<&Embedding> {
        self.embedding.get()
    }
}

// Equality covers the observable record; the embedding cache is derived data.
impl PartialEq for MemoryEntry {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.content == other.content
            && self.created_step == other.created_step
            && self.updated_step == other.updated_step
    }
}

impl Eq for MemoryEntry {}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryState {
    entries: BTreeMap<EntryId, MemoryEntry>,
    scratchpad: String,
    next_id: EntryId,
    step: u64,
}

impl MemoryState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &MemoryEntry> + '_ {
        self.entries.values()
    }

    pub fn get(&self, id: EntryId) -> Option<&MemoryEntry> {
        self.entries.get(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scratchpad(&self) -> &str {
        &self.scratchpad
    }

    pub fn next_id(&self) -> EntryId {
        self.next_id
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn create(&mut self, content: &str) -> Result<EntryId, MemoryError> {
        let content = non_blank(content)?;
        let id = self.next_id;
        self.next_id += 1;
        self.entries
            .insert(id, MemoryEntry::new(id, content, self.step));
        Ok(id)
    }

    pub fn update(&mut self, id: EntryId, content: &str) -> Result<(), MemoryError> {
        let content = non_blank(content)?;
        let step = self.step;
        let entry = self
            .entries
            .get_mut(&id)
            .ok_or(MemoryError::UnknownId { id })?;
        entry.content = content;
        entry.updated_step = step;
        entry.embedding = OnceLock::new();
        Ok(())
    }

    pub fn delete(&mut self, id: EntryId) -> Result<(), MemoryError> {
        self.entries
            .remove(&id)
            .map(|_| ())
            .ok_or(MemoryError::UnknownId { id })
    }

    /// Replaces the scratchpad wholesale. An empty string clears it.
    pub fn write_scratchpad(&mut self, content: &str) {
        self.scratchpad = content.to_string();
    }

    /// Applies the non-Read actions of `actions` in emission order.
    ///
    /// Failing actions are reported and skipped; the rest of the sequence
    /// still runs. Read queries are collected into `pending_reads`.
    pub fn apply_sequence(&mut self, actions: &ActionSequence) -> ApplyReport {
        let mut report = ApplyReport::default();
        for action in &actions.actions {
            let outcome = match action {
                MemoryAction::Create { content } => {
                    self.create(content).map(|id| ActionOutcome::Created { id })
                }
                MemoryAction::Update { id, content } => {
                    self.update(*id, content).map(|_| ActionOutcome::Applied)
                }
                MemoryAction::Delete { id } => self.delete(*id).map(|_| ActionOutcome::Applied),
                MemoryAction::Scratchpad { content } => {
                    self.write_scratchpad(content);
                    Ok(ActionOutcome::Applied)
                }
                MemoryAction::Read { query } => {
                    report.pending_reads.push(query.clone());
                    Ok(ActionOutcome::Deferred)
                }
            };
            report
                .outcomes
                .push(outcome.unwrap_or_else(ActionOutcome::Failed));
        }
        report
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            scratchpad: self.scratchpad.clone(),
            next_id: self.next_id,
            entries: self.entries.values().cloned().collect(),
        }
    }
}

fn non_blank(content: &str) -> Result<String, MemoryError> {
    if content.trim().is_empty() {
        Err(MemoryError::EmptyContent)
    } else {
        Ok(content.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ActionOutcome {
    Created {
        id: EntryId,
    },
    Applied,
    /// Read actions are answered at the next step.
    Deferred,
    Failed(MemoryError),
}

impl ActionOutcome {
    pub fn is_success(&self) -> bool {
        !matches!(self, ActionOutcome::Failed(_))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub outcomes: Vec<ActionOutcome>,
    pub pending_reads: Vec<String>,
}

impl ApplyReport {
    pub fn failures(&self) -> impl Iterator<Item = &MemoryError> + '_ {
        self.outcomes.iter().filter_map(|o| match o {
            ActionOutcome::Failed(e) => Some(e),
            _ => None,
        })
    }
}

/// JSON form of a memory state. Embeddings are not serialized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub scratchpad: String,
    pub next_id: EntryId,
    pub entries: Vec<MemoryEntry>,
}

impl From<MemorySnapshot> for MemoryState {
    fn from(snapshot: MemorySnapshot) -> Self {
        let entries: BTreeMap<_, _> = snapshot.entries.into_iter().map(|e| (e.id, e)).collect();
        let step = entries.values().map(|e| e.updated_step).max().unwrap_or(0);
        let next_id = entries
            .keys()
            .next_back()
            .map_or(snapshot.next_id, |max| snapshot.next_id.max(max + 1));
        Self {
            entries,
            scratchpad: snapshot.scratchpad,
            next_id,
            step,
        }
    }
}

impl Serialize for MemoryState {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.snapshot().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MemoryState {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        MemorySnapshot::deserialize(deserializer).map(Into::into)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(actions: Vec<MemoryAction>) -> ActionSequence {
        ActionSequence {
            actions,
            ..Default::default()
        }
    }

    #[test]
    fn first_create_gets_id_zero() {
        let mut m = MemoryState::new();
        assert_eq!(m.create("fact A").unwrap(), 0);
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn duplicate_content_gets_distinct_ids() {
        let mut m = MemoryState::new();
        let a = m.create("same").unwrap();
        let b = m.create("same").unwrap();
        assert_ne!(a, b);
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn blank_content_is_rejected() {
        let mut m = MemoryState::new();
        assert_eq!(m.create(""), Err(MemoryError::EmptyContent));
        assert_eq!(m.create("  \n\t"), Err(MemoryError::EmptyContent));
        assert_eq!(m.next_id(), 0);
        let id = m.create("x").unwrap();
        assert_eq!(m.update(id, " "), Err(MemoryError::EmptyContent));
    }

    #[test]
    fn update_replaces_content_and_drops_embedding() {
        let mut m = MemoryState::new();
        for i in 0..4 {
            m.create(&format!("entry {i}")).unwrap();
        }
        let _ = m.entries[&3]
            .embedding
            .set(Embedding::normalized(vec![1.0]).unwrap());
        m.set_step(5);
        m.update(3, "revised").unwrap();
        let e = m.get(3).unwrap();
        assert_eq!(e.content, "revised");
        assert!(e.embedding().is_none());
        assert_eq!((e.created_step, e.updated_step), (0, 5));
    }

    #[test]
    fn update_of_missing_id_is_a_diagnostic() {
        let mut m = MemoryState::new();
        assert_eq!(m.update(99, "x"), Err(MemoryError::UnknownId { id: 99 }));
        assert_eq!(m.delete(99), Err(MemoryError::UnknownId { id: 99 }));
    }

    #[test]
    fn update_does_not_move_the_counter() {
        // Hand-simulated: create "a" -> 0, update 0 -> "b", create "c" -> 1.
        let mut m = MemoryState::new();
        m.create("a").unwrap();
        m.update(0, "b").unwrap();
        let id = m.create("c").unwrap();
        assert_eq!(id, 1);
        let got: Vec<_> = m.entries().map(|e| (e.id, e.content.as_str())).collect();
        assert_eq!(got, vec![(0, "b"), (1, "c")]);
    }

    #[test]
    fn ids_are_not_reused_after_delete() {
        let mut m = MemoryState::new();
        m.create("a").unwrap();
        m.delete(0).unwrap();
        assert_eq!(m.create("b").unwrap(), 1);
    }

    #[test]
    fn scratchpad_overwrites_and_is_isolated() {
        let mut m = MemoryState::new();
        m.create("a").unwrap();
        m.write_scratchpad("plan: first");
        m.write_scratchpad("plan: second");
        assert_eq!(m.scratchpad(), "plan: second");
        assert_eq!((m.len(), m.next_id()), (1, 1));
        m.write_scratchpad("");
        assert_eq!(m.scratchpad(), "");
    }

    #[test]
    fn sequence_create_update_delete() {
        let mut m = MemoryState::new();
        let report = m.apply_sequence(&seq(vec![
            MemoryAction::Create {
                content: "a".into(),
            },
            MemoryAction::Update {
                id: 0,
                content: "b".into(),
            },
            MemoryAction::Delete { id: 0 },
        ]));
        assert!(m.is_empty());
        assert_eq!(report.outcomes.len(), 3);
        assert!(report.outcomes.iter().all(ActionOutcome::is_success));
    }

    #[test]
    fn sequence_defers_reads() {
        let mut m = MemoryState::new();
        let report = m.apply_sequence(&seq(vec![
            MemoryAction::Read { query: "q".into() },
            MemoryAction::Create {
                content: "a".into(),
            },
        ]));
        assert_eq!(m.len(), 1);
        assert_eq!(report.pending_reads, vec!["q".to_string()]);
    }

    #[test]
    fn sequence_keeps_going_after_failure() {
        let mut m = MemoryState::new();
        let report = m.apply_sequence(&seq(vec![MemoryAction::Update {
            id: 7,
            content: "x".into(),
        }]));
        assert!(m.is_empty());
        assert_eq!(
            report.failures().cloned().collect::<Vec<_>>(),
            vec![MemoryError::UnknownId { id: 7 }]
        );

        let report = m.apply_sequence(&seq(vec![
            MemoryAction::Delete { id: 3 },
            MemoryAction::Create {
                content: "ok".into(),
            },
        ]));
        assert_eq!(m.len(), 1);
        assert!(!report.outcomes[0].is_success());
        assert_eq!(report.outcomes[1], ActionOutcome::Created { id: 0 });
    }

    #[test]
    fn json_layout() {
        let mut m = MemoryState::new();
        m.create("a").unwrap();
        m.set_step(2);
        m.create("b").unwrap();
        m.delete(0).unwrap();
        m.write_scratchpad("pad");
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "scratchpad": "pad",
                "next_id": 2,
                "entries": [{"id": 1, "content": "b", "created_step": 2, "updated_step": 2}]
            })
        );
        let back: MemoryState = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }
}
