//! Multi-hop QA ingestion and episode construction.
//!
//! Two constructions are provided. A needle-in-a-haystack instance carries
//! one question with its relevant documents hidden among distractors. A
//! multi-question instance carries several questions whose relevant documents
//! are pooled together before padding. In both cases the final document
//! order is a seeded shuffle.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::retrieval::fnv1a64;

pub const MAX_QUESTIONS: usize = 10;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("cannot read {path}: {source}")]
    UnreadableFile {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no row of {path} matched a known QA schema ({skipped} rows skipped)")]
    SchemaMismatch { path: String, skipped: usize },
    #[error(
        "total_docs = {total_docs} cannot hold {relevant} relevant documents plus distractors"
    )]
    TooFewDocs { total_docs: usize, relevant: usize },
    #[error("need {needed} source questions, have {available}")]
    TooFewSamples { needed: usize, available: usize },
    #[error("question count {0} is outside 1..={MAX_QUESTIONS}")]
    InvalidQuestionCount(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceQA {
    pub question: String,
    pub gold_answers: Vec<String>,
    pub relevant_docs: Vec<String>,
    pub source_id: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub samples: Vec<SourceQA>,
    /// Non-gold paragraphs from every accepted row, deduplicated.
    pub distractors: Vec<String>,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDocument {
    pub text: String,
    pub relevant: bool,
    /// Index of the question owning this document, for relevant documents.
    #[serde(rename = "q")]
    pub question: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub questions: Vec<String>,
    pub gold: Vec<Vec<String>>,
    pub documents: Vec<TaskDocument>,
    pub seed: u64,
    /// Set when the distractor pool was too small and had to be resampled.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub distractors_resampled: bool,
}

impl TaskInstance {
    pub fn total_docs(&self) -> usize {
        self.documents.len()
    }

    pub fn document_texts(&self) -> Vec<&str> {
        self.documents.iter().map(|d| d.text.as_str()).collect()
    }
}

pub fn ingest(path: impl AsRef<Path>) -> Result<IngestReport, TaskError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| TaskError::UnreadableFile {
        path: display.clone(),
        source,
    })?;
    let report =
        ingest_reader(BufReader::new(file)).map_err(|source| TaskError::UnreadableFile {
            path: display.clone(),
            source,
        })?;
    if report.samples.is_empty() {
        return Err(TaskError::SchemaMismatch {
            path: display,
            skipped: report.skipped,
        });
    }
    Ok(report)
}

/// Reads QA rows from JSONL. Blank lines are ignored; unparseable or
/// incomplete rows are counted in `skipped`.
///
/// Accepted row layouts:
///
/// * generic: `question`, `answers` (list or string), `contexts`: list of
///   `{title?, text, relevant}` objects;
/// * HotpotQA / 2WikiMultiHopQA: `question`, `answer`, `context`: list of
///   `[title, [sentences]]`, `supporting_facts`: list of `[title, index]`;
/// * MuSiQue: `question`, `answer`, `answer_aliases`, `paragraphs`: list of
///   `{title, paragraph_text, is_supporting}`.
pub fn ingest_reader(reader: impl BufRead) -> std::io::Result<IngestReport> {
    let mut report = IngestReport::default();
    let mut distractors = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Value>(&line)
            .ok()
            .and_then(|row| parse_row(&row, line_no));
        match parsed {
            Some((sample, others)) => {
                report.samples.push(sample);
                distractors.extend(others);
            }
            None => report.skipped += 1,
        }
    }
    let relevant: HashSet<&str> = report
        .samples
        .iter()
        .flat_map(|s| s.relevant_docs.iter().map(String::as_str))
        .collect();
    let mut seen = HashSet::new();
    report.distractors = distractors
        .into_iter()
        .filter(|d| !relevant.contains(d.as_str()) && seen.insert(d.clone()))
        .collect();
    Ok(report)
}

fn parse_row(row: &Value, line_no: usize) -> Option<(SourceQA, Vec<String>)> {
    let question = row.get("question")?.as_str()?.trim().to_string();
    let source_id = ["id", "_id", "source_id"]
        .iter()
        .find_map(|k| row.get(*k).and_then(value_to_id))
        .unwrap_or_else(|| format!("row-{line_no}"));

    let mut gold = Vec::new();
    for key in ["answers", "answer", "answer_aliases"] {
        match row.get(key) {
            Some(Value::String(s)) => gold.push(s.clone()),
            Some(Value::Array(xs)) => {
                gold.extend(xs.iter().filter_map(|x| x.as_str()).map(String::from))
            }
            _ => {}
        }
    }
    let mut seen = HashSet::new();
    gold.retain(|g| !g.trim().is_empty() && seen.insert(g.clone()));

    let (relevant, others) = if let Some(contexts) = row.get("contexts") {
        split_objects(contexts, "text", &["relevant", "is_supporting"])?
    } else if let Some(paragraphs) = row.get("paragraphs") {
        split_objects(paragraphs, "paragraph_text", &["is_supporting"])?
    } else {
        split_hotpot(row.get("context")?, row.get("supporting_facts")?)?
    };

    if question.is_empty() || gold.is_empty() || relevant.is_empty() {
        return None;
    }
    Some((
        SourceQA {
            question,
            gold_answers: gold,
            relevant_docs: relevant,
            source_id,
        },
        others,
    ))
}

fn value_to_id(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn titled(title: Option<&str>, body: &str) -> String {
    match title.map(str::trim).filter(|t| !t.is_empty()) {
        Some(t) => format!("{t}\n{}", body.trim()),
        None => body.trim().to_string(),
    }
}

fn split_objects(
    list: &Value,
    text_key: &str,
    flag_keys: &[&str],
) -> Option<(Vec<String>, Vec<String>)> {
    let mut relevant = Vec::new();
    let mut others = Vec::new();
    for item in list.as_array()? {
        let text = item.get(text_key)?.as_str()?;
        if text.trim().is_empty() {
            continue;
        }
        let doc = titled(item.get("title").and_then(Value::as_str), text);
        let flag = flag_keys
            .iter()
            .find_map(|k| item.get(*k).and_then(Value::as_bool))
            .unwrap_or(false);
        if flag {
            relevant.push(doc);
        } else {
            others.push(doc);
        }
    }
    Some((relevant, others))
}

fn split_hotpot(context: &Value, supporting: &Value) -> Option<(Vec<String>, Vec<String>)> {
    let gold_titles: HashSet<&str> = supporting
        .as_array()?
        .iter()
        .filter_map(|f| f.get(0)?.as_str())
        .collect();
    let mut relevant = Vec::new();
    let mut others = Vec::new();
    for para in context.as_array()? {
        let title = para.get(0)?.as_str()?;
        let body = match para.get(1)? {
            Value::Array(sents) => sents
                .iter()
                .filter_map(Value::as_str)
                .map(str::trim)
                .collect::<Vec<_>>()
                .join(" "),
            Value::String(s) => s.clone(),
            _ => return None,
        };
        let doc = titled(Some(title), &body);
        if gold_titles.contains(title) {
            relevant.push(doc);
        } else {
            others.push(doc);
        }
    }
    Some((relevant, others))
}

/// Derives an independent seed for a named purpose from a master seed.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    // SplitMix64 finalizer over the mixed inputs.
    let mut z = master
        ^ fnv1a64(label.as_bytes()).rotate_left(17)
        ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn build_niah(
    sample: &SourceQA,
    distractor_pool: &[String],
    total_docs: usize,
    seed: u64,
) -> Result<TaskInstance, TaskError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    assemble(&[sample], distractor_pool, total_docs, seed, &mut rng)
}

pub fn build_multiq(
    samples: &[SourceQA],
    num_questions: usize,
    distractor_pool: &[String],
    total_docs: usize,
    seed: u64,
) -> Result<TaskInstance, TaskError> {
    if !(1..=MAX_QUESTIONS).contains(&num_questions) {
        return Err(TaskError::InvalidQuestionCount(num_questions));
    }
    if samples.len() < num_questions {
        return Err(TaskError::TooFewSamples {
            needed: num_questions,
            available: samples.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<&SourceQA> = index::sample(&mut rng, samples.len(), num_questions)
        .into_iter()
        .map(|i| &samples[i])
        .collect();
    assemble(&chosen, distractor_pool, total_docs, seed, &mut rng)
}

/// Draws a question count uniformly from `1..=MAX_QUESTIONS`.
pub fn sample_question_count(seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).random_range(1..=MAX_QUESTIONS)
}

fn assemble(
    chosen: &[&SourceQA],
    pool: &[String],
    total_docs: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<TaskInstance, TaskError> {
    let mut documents: Vec<TaskDocument> = chosen
        .iter()
        .enumerate()
        .flat_map(|(q, s)| {
            s.relevant_docs.iter().map(move |d| TaskDocument {
                text: d.clone(),
                relevant: true,
                question: Some(q),
            })
        })
        .collect();
    let relevant = documents.len();
    if total_docs < relevant {
        return Err(TaskError::TooFewDocs {
            total_docs,
            relevant,
        });
    }

    let needles: HashSet<&str> = documents.iter().map(|d| d.text.as_str()).collect();
    let candidates: Vec<&String> = pool
        .iter()
        .filter(|d| !needles.contains(d.as_str()))
        .collect();
    let need = total_docs - relevant;
    let mut resampled = false;
    if need > 0 {
        if candidates.is_empty() {
            return Err(TaskError::TooFewDocs {
                total_docs,
                relevant,
            });
        }
        let picks: Vec<usize> = if candidates.len() >= need {
            index::sample(rng, candidates.len(), need).into_vec()
        } else {
            resampled = true;
            (0..need)
                .map(|_| rng.random_range(0..candidates.len()))
                .collect()
        };
        documents.extend(picks.into_iter().map(|i| TaskDocument {
            text: candidates[i].clone(),
            relevant: false,
            question: None,
        }));
    }
    documents.shuffle(rng);

    Ok(TaskInstance {
        questions: chosen.iter().map(|s| s.question.clone()).collect(),
        gold: chosen.iter().map(|s| s.gold_answers.clone()).collect(),
        documents,
        seed,
        distractors_resampled: resampled,
    })
}

/// Splits samples into disjoint train/eval sets by hashing `source_id`.
pub fn split_by_source(samples: &[SourceQA], eval_fraction: f64) -> (Vec<SourceQA>, Vec<SourceQA>) {
    let threshold = (eval_fraction.clamp(0.0, 1.0) * u64::MAX as f64) as u64;
    samples
        .iter()
        .cloned()
        .partition(|s| derive_seed(0, &s.source_id, 0) >= threshold)
}
