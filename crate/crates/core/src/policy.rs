//! Policies turn a rendered observation into raw action text.
//!
//! A policy only ever sees the observation and the task; the memory store is
//! changed solely by parsing the text it returns.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::environment::{EpisodeConfig, Observation};
use crate::protocol::{self, ActionKind, ActionSequence, MemoryAction, SchemaVariant};
use crate::task::TaskInstance;

pub const EMPTY_PLACEHOLDER: &str = "(empty)";
pub const DEFAULT_API_KEY_ENV: &str = "CRUDMEM_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("replay script exhausted at turn {turn} (script has {len} responses)")]
    ScriptExhausted { turn: usize, len: usize },
    #[error("transport error: {message}")]
    Transport { message: String },
    #[error("request timed out after {secs}s")]
    Timeout { secs: u64 },
    #[error("invalid policy config: {0}")]
    Config(String),
}

/// Everything a policy may look at for one turn.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    pub task: &'a TaskInstance,
    pub observation: &'a Observation,
    pub prompt: &'a str,
    pub config: &'a EpisodeConfig,
}

pub trait Policy: Send {
    fn respond(&mut self, input: &PolicyInput<'_>) -> Result<String, PolicyError>;
}

/// A rendered prompt and the policy's reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyTurn {
    pub rendered_prompt: String,
    pub response: String,
}

pub fn system_prompt(schema: SchemaVariant) -> String {
    let tag = |k| schema.tag_name(k);
    let (update_example, delete_example) = match schema {
        SchemaVariant::Table => ("3: revised text", "3"),
        SchemaVariant::Prompt => ("Memory 3: revised text", "Memory 3"),
    };
    format!(
        "You manage a memory database while reading a long article piece by piece. \
Memories persist between turns; the article text does not. \
Emit any number of the following operations, each wrapped in its tag.\n\
<{c}>text</{c}> stores a new memory.\n\
<{r}>query</{r}> retrieves related memories, shown to you on the next turn.\n\
<{u}>{update_example}</{u}> replaces the content of memory 3.\n\
<{d}>{delete_example}</{d}> removes memory 3.\n\
<{s}>text</{s}> overwrites your scratchpad.\n\
When a question is asked and no article is shown, reply with <{a}>your answer</{a}>.",
        c = tag(ActionKind::Create),
        r = tag(ActionKind::Read),
        u = tag(ActionKind::Update),
        d = tag(ActionKind::Delete),
        s = tag(ActionKind::Scratchpad),
        a = protocol::ANSWER_TAG,
    )
}

const TIPS_STREAMING: &str = "Keep only facts that may help answer the question. \
Remove duplicate or outdated memories. Issue a read when you need older facts.";
const TIPS_ANSWERING: &str = "Answer from your memories and scratchpad only. \
Give the shortest answer that is complete.";

fn block(out: &mut String, header: &str, body: &str) {
    let body = if body.trim().is_empty() {
        EMPTY_PLACEHOLDER
    } else {
        body
    };
    let _ = write!(out, "{header}\n{body}\n\n");
}

/// Fills the prompt template. Streaming turns show every task question and
/// the article chunk; answer turns show only the pending question.
pub fn render_prompt(task: &TaskInstance, obs: &Observation, config: &EpisodeConfig) -> String {
    let mut out = system_prompt(config.schema);
    out.push_str("\n\n");

    let question = match &obs.pending_question {
        Some(q) => q.clone(),
        None => task.questions.join("\n"),
    };
    block(
        &mut out,
        "This is the question you need to solve:",
        &question,
    );
    block(
        &mut out,
        "This is your scratchpad from the previous turn.",
        &obs.scratchpad,
    );
    block(
        &mut out,
        "This is the current query to retrieve memory from the database:",
        obs.query.as_deref().unwrap_or(""),
    );
    let memories: Vec<String> = obs
        .retrieved
        .iter()
        .map(|m| format!("Memory {}: {}", m.id, m.content))
        .collect();
    block(
        &mut out,
        "This is the current memory related to the query:",
        &memories.join("\n"),
    );
    block(
        &mut out,
        "These problems were found in your previous reply:",
        &obs.diagnostics.join("\n"),
    );
    let tips = if obs.env_chunk.is_some() {
        TIPS_STREAMING
    } else {
        TIPS_ANSWERING
    };
    block(&mut out, "Tips:", tips);
    if let Some(chunk) = &obs.env_chunk {
        block(&mut out, "This is the article:", chunk);
    }
    let _ = write!(out, "Step {}.", obs.step);
    out
}

/// Replays fixed responses in order.
#[derive(Debug, Clone)]
pub struct ReplayPolicy {
    script: Vec<String>,
    turn: usize,
}

impl ReplayPolicy {
    pub fn new(script: Vec<String>) -> Self {
        Self { script, turn: 0 }
    }
}

impl Policy for ReplayPolicy {
    fn respond(&mut self, _input: &PolicyInput<'_>) -> Result<String, PolicyError> {
        let out = self
            .script
            .get(self.turn)
            .cloned()
            .ok_or(PolicyError::ScriptExhausted {
                turn: self.turn,
                len: self.script.len(),
            })?;
        self.turn += 1;
        Ok(out)
    }
}

const STOPWORDS: &[&str] = &[
    "a", "about", "an", "and", "are", "as", "at", "be", "by", "did", "do", "does", "for", "from",
    "has", "have", "how", "in", "is", "it", "its", "many", "much", "of", "on", "or", "that", "the",
    "their", "this", "to", "was", "were", "what", "when", "where", "which", "who", "whom", "whose",
    "why", "with",
];

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

fn keywords(question: &str) -> BTreeSet<String> {
    words(question)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Sentences end at `.`, `!` or `?` followed by whitespace, or at a newline.
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for (i, c) in text.char_indices() {
        let terminal = match c {
            '\n' => true,
            '.' | '!' | '?' => bytes.get(i + 1).is_none_or(|b| b.is_ascii_whitespace()),
            _ => false,
        };
        if terminal {
            let s = text[start..=i].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = i + c.len_utf8();
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Rule-based baseline: store every sentence that mentions a question
/// keyword, keep reading the question, and answer with the words of the top
/// retrieved memory that the question does not already contain.
#[derive(Debug, Clone, Default)]
pub struct HeuristicPolicy;

impl HeuristicPolicy {
    pub fn new() -> Self {
        Self
    }

    fn answer_from(question: &str, memory: &str) -> String {
        let asked: BTreeSet<String> = words(question).collect();
        let span: Vec<&str> = memory
            .split_whitespace()
            .filter(|tok| {
                let w: String = tok
                    .chars()
                    .filter(|c| c.is_alphanumeric())
                    .collect::<String>()
                    .to_lowercase();
                !w.is_empty() && !asked.contains(&w) && !STOPWORDS.contains(&w.as_str())
            })
            .collect();
        span.join(" ")
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_string()
    }
}

fn sanitize(text: &str) -> String {
    text.replace(['<', '>'], " ")
}

impl Policy for HeuristicPolicy {
    fn respond(&mut self, input: &PolicyInput<'_>) -> Result<String, PolicyError> {
        let obs = input.observation;
        let task = input.task;
        let mut actions = Vec::new();
        let mut answer = None;
        if let Some(chunk) = &obs.env_chunk {
            let keys: BTreeSet<String> = task.questions.iter().flat_map(|q| keywords(q)).collect();
            for sentence in sentences(chunk) {
                if words(sentence).any(|w| keys.contains(&w)) {
                    actions.push(MemoryAction::Create {
                        content: sanitize(sentence),
                    });
                }
            }
            if let Some(q) = task.questions.first() {
                actions.push(MemoryAction::Read { query: sanitize(q) });
            }
        } else if let (Some(q), Some(i)) = (&obs.pending_question, obs.question_index) {
            answer = Some(
                obs.retrieved
                    .first()
                    .map(|m| Self::answer_from(q, &m.content))
                    .unwrap_or_default(),
            );
            if let Some(next) = task.questions.get(i + 1) {
                actions.push(MemoryAction::Read {
                    query: sanitize(next),
                });
            }
        }
        let mut seq = ActionSequence::from_actions(actions);
        seq.final_answer = answer.map(|a| sanitize(&a));
        protocol::render(&seq, input.config.schema).map_err(|e| PolicyError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemotePolicyConfig {
    /// Full URL of a chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: Option<u32>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub api_key: Option<String>,
    /// Environment variable that, when set, overrides `api_key`.
    pub api_key_env: String,
}

impl Default for RemotePolicyConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            temperature: 0.7,
            top_p: 1.0,
            max_tokens: None,
            max_in_flight: 8,
            timeout_secs: 120,
            max_retries: 3,
            backoff_base_ms: 500,
            api_key: None,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
        }
    }
}

/// Counting semaphore for bounding in-flight requests.
#[derive(Debug)]
struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Shared HTTP client. Clone it into one [`RemotePolicy`] per episode; all
/// clones share the in-flight limit.
#[derive(Debug, Clone)]
pub struct RemoteClient {
    inner: Arc<RemoteInner>,
}

#[derive(Debug)]
struct RemoteInner {
    config: RemotePolicyConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    permits: Semaphore,
}

fn excerpt(body: &str) -> String {
    const MAX: usize = 200;
    match body.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}...", &body[..i]),
        None => body.to_string(),
    }
}

enum Attempt {
    Retry(PolicyError),
    Fatal(PolicyError),
}

impl RemoteClient {
    pub fn new(config: RemotePolicyConfig) -> Result<Self, PolicyError> {
        if config.max_in_flight == 0 {
            return Err(PolicyError::Config("max_in_flight must be >= 1".into()));
        }
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .or_else(|| config.api_key.clone());
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| PolicyError::Config(e.to_string()))?;
        Ok(Self {
            inner: Arc::new(RemoteInner {
                permits: Semaphore::new(config.max_in_flight),
                config,
                api_key,
                http,
            }),
        })
    }

    pub fn config(&self) -> &RemotePolicyConfig {
        &self.inner.config
    }

    pub fn policy(&self) -> RemotePolicy {
        RemotePolicy {
            client: self.clone(),
        }
    }

    /// Sends one single-message chat request, retrying transient failures
    /// with exponential backoff.
    pub fn complete(&self, prompt: &str) -> Result<String, PolicyError> {
        let cfg = &self.inner.config;
        let mut body = json!({
            "model": cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
            "top_p": cfg.top_p,
        });
        if let Some(n) = cfg.max_tokens {
            body["max_tokens"] = json!(n);
        }
        let _permit = self.inner.permits.acquire();
        let mut attempt = 0;
        loop {
            match self.send(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) if attempt >= cfg.max_retries => return Err(e),
                Err(Attempt::Retry(e)) => {
                    let wait = cfg.backoff_base_ms.saturating_mul(1 << attempt.min(16));
                    tracing::warn!(attempt, wait_ms = wait, error = %e, "retrying chat request");
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
            }
        }
    }

    fn send(&self, body: &serde_json::Value) -> Result<String, Attempt> {
        let cfg = &self.inner.config;
        let mut req = self.inner.http.post(&cfg.endpoint).json(body);
        if let Some(key) = &self.inner.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            Attempt::Retry(if e.is_timeout() {
                PolicyError::Timeout {
                    secs: cfg.timeout_secs,
                }
            } else {
                PolicyError::Transport {
                    message: e.to_string(),
                }
            })
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            Attempt::Retry(if e.is_timeout() {
                PolicyError::Timeout {
                    secs: cfg.timeout_secs,
                }
            } else {
                PolicyError::Transport {
                    message: e.to_string(),
                }
            })
        })?;
        if !status.is_success() {
            let err = PolicyError::Transport {
                message: format!("HTTP {status}: {}", excerpt(&text)),
            };
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                Attempt::Retry(err)
            } else {
                Attempt::Fatal(err)
            });
        }
        let malformed = || {
            Attempt::Fatal(PolicyError::Transport {
                message: format!("malformed response body: {}", excerpt(&text)),
            })
        };
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|_| malformed())?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(malformed)
    }
}

/// Chat-model policy. Each turn is a fresh single-message request.
#[derive(Debug, Clone)]
pub struct RemotePolicy {
    client: RemoteClient,
}

impl Policy for RemotePolicy {
    fn respond(&mut self, input: &PolicyInput<'_>) -> Result<String, PolicyError> {
        self.client.complete(input.prompt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::RetrievedMemory;
    use crate::task::TaskDocument;

    fn task() -> TaskInstance {
        TaskInstance {
            questions: vec!["What is the code of the blue falcon?".into()],
            gold: vec![vec!["zorvamite".into()]],
            documents: vec![TaskDocument {
                text: "x".into(),
                relevant: true,
                question: Some(0),
            }],
            seed: 0,
            distractors_resampled: false,
        }
    }

    fn streaming(chunk: &str) -> Observation {
        Observation {
            step: 0,
            env_chunk: Some(chunk.into()),
            scratchpad: String::new(),
            query: None,
            retrieved: vec![],
            pending_question: None,
            question_index: None,
            diagnostics: vec![],
        }
    }

    fn respond(
        p: &mut dyn Policy,
        t: &TaskInstance,
        o: &Observation,
    ) -> Result<String, PolicyError> {
        let cfg = EpisodeConfig::default();
        let prompt = render_prompt(t, o, &cfg);
        p.respond(&PolicyInput {
            task: t,
            observation: o,
            prompt: &prompt,
            config: &cfg,
        })
    }

    #[test]
    fn prompt_sections() {
        let t = task();
        let cfg = EpisodeConfig::default();
        let p = render_prompt(&t, &streaming("Some article."), &cfg);
        assert!(p.contains("This is the article:\nSome article."));
        assert!(p.contains("This is the current memory related to the query:\n(empty)"));
        assert_eq!(p, render_prompt(&t, &streaming("Some article."), &cfg));
        let order = [
            "This is the question you need to solve:",
            "This is your scratchpad from the previous turn.",
            "This is the current query to retrieve memory from the database:",
            "This is the current memory related to the query:",
            "Tips:",
            "This is the article:",
        ];
        let pos: Vec<_> = order.iter().map(|h| p.find(h).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        for h in order {
            assert_eq!(p.matches(h).count(), 1);
        }
    }

    #[test]
    fn answer_prompt_omits_article() {
        let t = task();
        let mut o = streaming("");
        o.env_chunk = None;
        o.pending_question = Some("Who?".into());
        o.question_index = Some(0);
        o.retrieved = vec![RetrievedMemory {
            id: 4,
            content: "fact".into(),
        }];
        let p = render_prompt(&t, &o, &EpisodeConfig::default());
        assert!(!p.contains("This is the article:"));
        assert!(p.contains("This is the question you need to solve:\nWho?"));
        assert!(p.contains("Memory 4: fact"));
    }

    #[test]
    fn replay_in_order_then_exhausted() {
        let t = task();
        let o = streaming("a");
        let mut p = ReplayPolicy::new(vec!["one".into(), "two".into()]);
        assert_eq!(respond(&mut p, &t, &o).unwrap(), "one");
        assert_eq!(respond(&mut p, &t, &o).unwrap(), "two");
        assert_eq!(
            respond(&mut p, &t, &o),
            Err(PolicyError::ScriptExhausted { turn: 2, len: 2 })
        );
    }

    #[test]
    fn heuristic_creates_on_keyword() {
        let t = task();
        let text = respond(
            &mut HeuristicPolicy,
            &t,
            &streaming("Birds fly. The blue falcon code is zorvamite. Rain."),
        )
        .unwrap();
        let seq = protocol::parse(&text, SchemaVariant::Table);
        assert_eq!(seq.count(ActionKind::Create), 1);
        assert_eq!(seq.count(ActionKind::Read), 1);
        assert!(seq.diagnostics.is_empty());
    }

    #[test]
    fn heuristic_no_overlap_reads_only() {
        let t = task();
        let text = respond(
            &mut HeuristicPolicy,
            &t,
            &streaming("Nothing relevant here."),
        )
        .unwrap();
        let seq = protocol::parse(&text, SchemaVariant::Table);
        assert_eq!(seq.count(ActionKind::Create), 0);
        assert_eq!(seq.count(ActionKind::Read), 1);
    }

    #[test]
    fn heuristic_answer_span() {
        let t = task();
        let mut o = streaming("");
        o.env_chunk = None;
        o.pending_question = Some(t.questions[0].clone());
        o.question_index = Some(0);
        o.retrieved = vec![RetrievedMemory {
            id: 0,
            content: "The code of the blue falcon is zorvamite.".into(),
        }];
        let text = respond(&mut HeuristicPolicy, &t, &o).unwrap();
        assert_eq!(
            protocol::parse(&text, SchemaVariant::Table)
                .final_answer
                .as_deref(),
            Some("zorvamite")
        );
    }

    #[test]
    fn sentence_split() {
        assert_eq!(
            sentences("Dr. No? 3.5 units.\nNext line"),
            vec!["Dr.", "No?", "3.5 units.", "Next line"]
        );
    }

    #[test]
    fn semaphore_bounds() {
        let s = Arc::new(Semaphore::new(2));
        let live = Arc::new(Mutex::new((0usize, 0usize)));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let s = s.clone();
                let live = live.clone();
                std::thread::spawn(move || {
                    let _p = s.acquire();
                    {
                        let mut l = live.lock().unwrap();
                        l.0 += 1;
                        l.1 = l.1.max(l.0);
                    }
                    std::thread::sleep(Duration::from_millis(5));
                    live.lock().unwrap().0 -= 1;
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(live.lock().unwrap().1 <= 2);
    }
}
