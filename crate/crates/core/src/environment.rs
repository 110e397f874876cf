//! Streaming episode loop over a long document sequence.
//!
//! An episode streams fixed-budget chunks of the concatenated documents, one
//! chunk per step, then asks each question in turn. At every step the policy
//! sees the current chunk (or question), the scratchpad, and the entries
//! retrieved for the Read queries it emitted at the *previous* step.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{EntryId, MemoryState};
use crate::policy::{self, Policy, PolicyError, PolicyInput};
use crate::protocol::{self, ActionSequence, MemoryAction, SchemaVariant};
use crate::retrieval::{self, Embedder, RetrievalError, DEFAULT_TOP_K};
use crate::reward::{TokenSpan, TrajectoryRecord};
use crate::task::TaskInstance;

pub const DEFAULT_CHUNK_TOKENS: usize = 4096;
pub const DEFAULT_TOKENS_PER_WORD: f64 = 1.3;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("corpus has no non-empty document")]
    EmptyCorpus,
    #[error("invalid episode config: {0}")]
    InvalidConfig(String),
    #[error("episode is already done")]
    EpisodeDone,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Counts model tokens. Chunking works in *units* (the spans returned by
/// [`TokenCounter::units`]); each unit stands for `tokens_per_unit` tokens.
pub trait TokenCounter: Send + Sync {
    fn units(&self, text: &str) -> Vec<Range<usize>>;

    fn tokens_per_unit(&self) -> f64 {
        1.0
    }

    fn count(&self, text: &str) -> usize {
        (self.units(text).len() as f64 * self.tokens_per_unit()).ceil() as usize
    }

    /// Whole units that fit in `tokens`.
    fn units_for(&self, tokens: usize) -> usize {
        (tokens as f64 / self.tokens_per_unit() + 1e-9).floor() as usize
    }
}

/// Whitespace words, each costing `tokens_per_word` tokens.
#[derive(Debug, Clone, Copy)]
pub struct WordCounter {
    pub tokens_per_word: f64,
}

impl Default for WordCounter {
    fn default() -> Self {
        Self {
            tokens_per_word: DEFAULT_TOKENS_PER_WORD,
        }
    }
}

impl WordCounter {
    pub fn exact() -> Self {
        Self {
            tokens_per_word: 1.0,
        }
    }
}

impl TokenCounter for WordCounter {
    fn units(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices() {
            match (c.is_whitespace(), start) {
                (true, Some(s)) => {
                    spans.push(s..i);
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push(s..text.len());
        }
        spans
    }

    fn tokens_per_unit(&self) -> f64 {
        self.tokens_per_word
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub chunk_size_tokens: usize,
    pub chunk_overlap_tokens: usize,
    pub retrieve_k: usize,
    pub schema: SchemaVariant,
    pub max_parse_diagnostics_shown: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            chunk_size_tokens: DEFAULT_CHUNK_TOKENS,
            chunk_overlap_tokens: 0,
            retrieve_k: DEFAULT_TOP_K,
            schema: SchemaVariant::Table,
            max_parse_diagnostics_shown: 5,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.chunk_size_tokens == 0 {
            return Err(EnvError::InvalidConfig(
                "chunk_size_tokens must be >= 1".into(),
            ));
        }
        if self.retrieve_k == 0 {
            return Err(EnvError::InvalidConfig("retrieve_k must be >= 1".into()));
        }
        if self.chunk_overlap_tokens >= self.chunk_size_tokens {
            return Err(EnvError::InvalidConfig(
                "chunk_overlap_tokens must be smaller than chunk_size_tokens".into(),
            ));
        }
        Ok(())
    }
}

/// One window of the document stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub text: String,
    /// Unit indices covered.
    pub units: Range<usize>,
    /// Byte range in the stream. Consecutive ranges touch or overlap.
    pub bytes: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkedStream {
    pub stream: String,
    pub chunks: Vec<Chunk>,
}

impl ChunkedStream {
    /// Rebuilds the stream by concatenating chunks and dropping overlap.
    pub fn reconstruct(&self) -> String {
        reconstruct(&self.chunks)
    }
}

pub fn reconstruct(chunks: &[Chunk]) -> String {
    let mut out = String::new();
    let mut end = None;
    for chunk in chunks {
        let skip = match end {
            Some(prev_end) if prev_end > chunk.bytes.start => prev_end - chunk.bytes.start,
            _ => 0,
        };
        out.push_str(&chunk.text[skip.min(chunk.text.len())..]);
        end = Some(end.map_or(chunk.bytes.end, |e: usize| e.max(chunk.bytes.end)));
    }
    out
}

pub fn document_marker(ordinal: usize) -> String {
    format!("Document {ordinal}:")
}

/// Joins documents into one stream, each preceded by a `Document i:` line.
pub fn build_stream(documents: &[&str]) -> (String, Vec<Range<usize>>) {
    let mut stream = String::new();
    let mut markers = Vec::with_capacity(documents.len());
    for (i, doc) in documents.iter().enumerate() {
        if i > 0 {
            stream.push_str("\n\n");
        }
        let start = stream.len();
        stream.push_str(&document_marker(i + 1));
        markers.push(start..stream.len());
        stream.push('\n');
        stream.push_str(doc.trim());
    }
    (stream, markers)
}

/// Window schedule over `n` units. A window starts every `width - overlap`
/// units; `breakable[i]` says whether a window may begin or end at unit `i`
/// and ends are pulled back (or, failing that, pushed forward) to the
/// nearest breakable position.
pub fn plan_windows(
    n: usize,
    width: usize,
    overlap: usize,
    breakable: &[bool],
) -> Vec<Range<usize>> {
    assert!(width > overlap, "window width must exceed overlap");
    assert_eq!(breakable.len(), n + 1);
    let mut windows = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = (start + width).min(n);
        if !breakable[end] {
            let mut back = end;
            while back > start + 1 && !breakable[back] {
                back -= 1;
            }
            if breakable[back] && back > start {
                end = back;
            } else {
                while end < n && !breakable[end] {
                    end += 1;
                }
            }
        }
        windows.push(start..end);
        let mut next = end.saturating_sub(overlap).max(start + 1);
        while next < end && !breakable[next] {
            next -= 1;
            if next <= start {
                next = end;
            }
        }
        start = next;
    }
    windows
}

/// Splits the concatenated documents into windows of at most
/// `chunk_size_tokens` tokens with the configured overlap. Boundaries never
/// split a `Document i:` marker.
pub fn chunk_stream(
    documents: &[&str],
    config: &EpisodeConfig,
    tokenizer: &dyn TokenCounter,
) -> Result<ChunkedStream, EnvError> {
    config.validate()?;
    if documents.iter().all(|d| d.trim().is_empty()) {
        return Err(EnvError::EmptyCorpus);
    }
    let width = tokenizer.units_for(config.chunk_size_tokens);
    let overlap = tokenizer.units_for(config.chunk_overlap_tokens);
    if width < 2 || overlap >= width {
        return Err(EnvError::InvalidConfig(format!(
            "chunk of {} tokens holds {width} units; need at least 2 and more than the overlap",
            config.chunk_size_tokens
        )));
    }

    let (stream, markers) = build_stream(documents);
    let units = tokenizer.units(&stream);
    let n = units.len();
    let mut breakable = vec![true; n + 1];
    let mut m = 0;
    for (i, unit) in units.iter().enumerate() {
        while m < markers.len() && markers[m].end <= unit.start {
            m += 1;
        }
        if let Some(marker) = markers.get(m) {
            if unit.start > marker.start && unit.start < marker.end {
                breakable[i] = false;
            }
        }
    }

    let chunks = plan_windows(n, width, overlap, &breakable)
        .into_iter()
        .map(|w| {
            let start = if w.start == 0 {
                0
            } else {
                units[w.start].start
            };
            let end = if w.end == n {
                stream.len()
            } else {
                units[w.end].start
            };
            Chunk {
                text: stream[start..end].to_string(),
                units: w,
                bytes: start..end,
            }
        })
        .collect();
    Ok(ChunkedStream { stream, chunks })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedMemory {
    pub id: EntryId,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub step: u64,
    /// Absent during the answer phase.
    pub env_chunk: Option<String>,
    pub scratchpad: String,
    /// Query shown in the prompt: the standing query under the prompt
    /// schema, otherwise the previous step's Read queries.
    pub query: Option<String>,
    pub retrieved: Vec<RetrievedMemory>,
    /// Set only during the answer phase.
    pub pending_question: Option<String>,
    pub question_index: Option<usize>,
    /// Problems with the previous step's output.
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Streaming,
    Answering,
    Done,
}

/// One transcript line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptStep {
    pub step: u64,
    pub observation: Observation,
    pub policy_text: String,
    pub actions: Vec<MemoryAction>,
    pub diagnostics: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepResult {
    Continue(Observation),
    Terminal,
}

pub struct Episode {
    task: Arc<TaskInstance>,
    config: EpisodeConfig,
    embedder: Arc<dyn Embedder>,
    memory: MemoryState,
    chunks: Vec<Chunk>,
    cursor: usize,
    question_cursor: usize,
    pending_read_queries: Vec<String>,
    standing_query: Option<String>,
    phase: Phase,
    step: u64,
    current: Observation,
    answers: Vec<String>,
    sequences: Vec<ActionSequence>,
    transcript: Vec<TranscriptStep>,
}

impl Episode {
    pub fn reset(
        task: Arc<TaskInstance>,
        config: EpisodeConfig,
        embedder: Arc<dyn Embedder>,
        tokenizer: &dyn TokenCounter,
    ) -> Result<(Self, Observation), EnvError> {
        let chunks = chunk_stream(&task.document_texts(), &config, tokenizer)?.chunks;
        let first = Observation {
            step: 0,
            env_chunk: Some(chunks[0].text.clone()),
            scratchpad: String::new(),
            query: None,
            retrieved: Vec::new(),
            pending_question: None,
            question_index: None,
            diagnostics: Vec::new(),
        };
        let episode = Self {
            task,
            config,
            embedder,
            memory: MemoryState::new(),
            chunks,
            cursor: 0,
            question_cursor: 0,
            pending_read_queries: Vec::new(),
            standing_query: None,
            phase: Phase::Streaming,
            step: 0,
            current: first.clone(),
            answers: Vec::new(),
            sequences: Vec::new(),
            transcript: Vec::new(),
        };
        Ok((episode, first))
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn memory(&self) -> &MemoryState {
        &self.memory
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn task(&self) -> &TaskInstance {
        &self.task
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    pub fn observation(&self) -> &Observation {
        &self.current
    }

    pub fn transcript(&self) -> &[TranscriptStep] {
        &self.transcript
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn pending_read_queries(&self) -> &[String] {
        &self.pending_read_queries
    }

    /// Total steps an episode takes: one per chunk plus one per question.
    pub fn planned_steps(&self) -> usize {
        self.chunks.len() + self.task.questions.len()
    }

    pub fn step(&mut self, policy_text: &str) -> Result<StepResult, EnvError> {
        if self.phase == Phase::Done {
            return Err(EnvError::EpisodeDone);
        }
        let schema = self.config.schema;
        self.memory.set_step(self.step);
        let seq = protocol::parse(policy_text, schema);
        let report = self.memory.apply_sequence(&seq);

        let mut diagnostics: Vec<String> = seq.diagnostics.iter().map(|d| d.to_string()).collect();
        diagnostics.extend(report.failures().map(|e| e.to_string()));

        let answer = match self.phase {
            Phase::Streaming => {
                self.cursor += 1;
                None
            }
            Phase::Answering => {
                let a = seq
                    .final_answer
                    .clone()
                    .unwrap_or_else(|| protocol::untagged_text(policy_text, schema));
                self.answers.push(a.clone());
                self.question_cursor += 1;
                Some(a)
            }
            Phase::Done => unreachable!(),
        };

        self.pending_read_queries = report.pending_reads;
        if schema == SchemaVariant::Prompt {
            if let Some(last) = self.pending_read_queries.last() {
                self.standing_query = Some(last.clone());
            }
        }

        self.transcript.push(TranscriptStep {
            step: self.step,
            observation: self.current.clone(),
            policy_text: policy_text.to_string(),
            actions: seq.actions.clone(),
            diagnostics: diagnostics.clone(),
            answer,
        });
        self.sequences.push(seq);

        if self.phase == Phase::Streaming && self.cursor >= self.chunks.len() {
            self.phase = Phase::Answering;
        }
        if self.phase == Phase::Answering && self.question_cursor >= self.task.questions.len() {
            self.phase = Phase::Done;
            return Ok(StepResult::Terminal);
        }

        let retrieved = self.retrieve_pending()?;
        self.step += 1;
        diagnostics.truncate(self.config.max_parse_diagnostics_shown);
        let query = match schema {
            SchemaVariant::Prompt => self.standing_query.clone(),
            SchemaVariant::Table if self.pending_read_queries.is_empty() => None,
            SchemaVariant::Table => Some(self.pending_read_queries.join("; ")),
        };
        let (env_chunk, pending_question, question_index) = match self.phase {
            Phase::Streaming => (Some(self.chunks[self.cursor].text.clone()), None, None),
            _ => (
                None,
                Some(self.task.questions[self.question_cursor].clone()),
                Some(self.question_cursor),
            ),
        };
        self.current = Observation {
            step: self.step,
            env_chunk,
            scratchpad: self.memory.scratchpad().to_string(),
            query,
            retrieved,
            pending_question,
            question_index,
            diagnostics,
        };
        Ok(StepResult::Continue(self.current.clone()))
    }

    fn retrieve_pending(&self) -> Result<Vec<RetrievedMemory>, EnvError> {
        Ok(merge_retrievals(
            &self.memory,
            self.embedder.as_ref(),
            &self.pending_read_queries,
            self.config.retrieve_k,
        )?)
    }

    /// Consumes the finished episode into its record and transcript.
    pub fn finish(
        self,
        task_id: impl Into<String>,
        tokenizer: &dyn TokenCounter,
    ) -> EpisodeOutcome {
        let token_spans = self
            .transcript
            .iter()
            .map(|t| TokenSpan {
                step: t.step,
                len: tokenizer.count(&t.policy_text),
            })
            .collect();
        let record = TrajectoryRecord {
            task_id: task_id.into(),
            answers: self.answers,
            gold: self.task.gold.clone(),
            per_step_actions: self.sequences,
            token_spans: Some(token_spans),
            reward: None,
            training_step: None,
        };
        EpisodeOutcome {
            record,
            transcript: self.transcript,
        }
    }
}

/// Runs each query in order, concatenates the hits, drops repeated ids,
/// and keeps the first `k`.
pub fn merge_retrievals(
    memory: &MemoryState,
    embedder: &dyn Embedder,
    queries: &[String],
    k: usize,
) -> Result<Vec<RetrievedMemory>, RetrievalError> {
    let mut out: Vec<RetrievedMemory> = Vec::new();
    for q in queries {
        for hit in retrieval::top_k(memory, embedder, q, k)? {
            if out.len() < k && !out.iter().any(|r| r.id == hit.id) {
                let entry = memory.get(hit.id).expect("hit refers to a live entry");
                out.push(RetrievedMemory {
                    id: hit.id,
                    content: entry.content.clone(),
                });
            }
        }
        if out.len() >= k {
            break;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub record: TrajectoryRecord,
    pub transcript: Vec<TranscriptStep>,
}

impl EpisodeOutcome {
    pub fn transcript_jsonl(&self) -> String {
        transcript_to_jsonl(&self.transcript)
    }
}

pub fn transcript_to_jsonl(steps: &[TranscriptStep]) -> String {
    let mut out = String::new();
    for step in steps {
        out.push_str(&serde_json::to_string(step).expect("transcript serializes"));
        out.push('\n');
    }
    out
}

pub fn transcript_from_jsonl(text: &str) -> Result<Vec<TranscriptStep>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Drives `policy` through a full episode.
pub fn run_episode(
    task: Arc<TaskInstance>,
    task_id: &str,
    config: EpisodeConfig,
    embedder: Arc<dyn Embedder>,
    tokenizer: &dyn TokenCounter,
    policy: &mut dyn Policy,
) -> Result<EpisodeOutcome, EnvError> {
    let (mut episode, mut obs) = Episode::reset(task.clone(), config, embedder, tokenizer)?;
    loop {
        let prompt = policy::render_prompt(&task, &obs, &config);
        let text = policy.respond(&PolicyInput {
            task: &task,
            observation: &obs,
            prompt: &prompt,
            config: &config,
        })?;
        match episode.step(&text)? {
            StepResult::Continue(next) => obs = next,
            StepResult::Terminal => break,
        }
    }
    Ok(episode.finish(task_id, tokenizer))
}
