//! Build, run, score, and advantage workflows behind the `crudmem` binary.
//!
//! Run directories are laid out as
//! `<out>/<run-id>/{manifest.json, transcripts/*.jsonl, records.jsonl,
//! scores.json, action_stats.csv}`. The run id is a hash of the manifest
//! (minus the output location), so a rerun with the same inputs lands in the
//! same directory and writes the same bytes.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crudmem::environment::{
    self, chunk_stream, EnvError, EpisodeConfig, TranscriptStep, WordCounter,
};
use crudmem::par::{self, Exec};
use crudmem::policy::{
    HeuristicPolicy, Policy, PolicyError, RemoteClient, RemotePolicyConfig, ReplayPolicy,
};
use crudmem::protocol::{ActionSequence, SchemaVariant};
use crudmem::retrieval::{EmbeddingProvider, RetrievalError};
use crudmem::reward::{
    self, action_stats_from_counts, batch_advantages, ActionCounts, ActionStats, GroupAdvantage,
    RewardError, TrajectoryRecord,
};
use crudmem::task::{self, derive_seed, TaskError, TaskInstance};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("no transcripts found in {dir}")]
    MissingTranscripts { dir: String },
    #[error("all {failed} instances failed")]
    AllFailed { failed: usize },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

impl CliError {
    /// 1 when every instance of a run failed, 2 for bad input of any kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::AllFailed { .. } | CliError::Io { .. } => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| CliError::Json {
                path: path.display().to_string(),
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

/// Writes through a temporary sibling so a crash never leaves a torn file.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(contents).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn task_id(index: usize) -> String {
    format!("task-{index:05}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BuildMode {
    Niah,
    Multiq,
}

#[derive(Debug, Clone)]
pub struct BuildArgs {
    pub source: PathBuf,
    pub mode: BuildMode,
    pub total_docs: usize,
    pub n_instances: usize,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildSummary {
    pub instances: usize,
    pub mean_docs: f64,
    pub mean_questions: f64,
    pub mean_tokens: f64,
    pub resampled: usize,
    pub skipped_rows: usize,
}

/// Approximate token count of the stream an episode would read.
pub fn stream_tokens(task: &TaskInstance) -> usize {
    use crudmem::environment::TokenCounter;
    let (stream, _) = environment::build_stream(&task.document_texts());
    WordCounter::default().count(&stream)
}

pub fn cmd_build(args: &BuildArgs) -> Result<BuildSummary, CliError> {
    if args.n_instances == 0 {
        return Err(CliError::Invalid("n_instances must be >= 1".into()));
    }
    let report = task::ingest(&args.source)?;
    // Every paragraph seen in the source can pad an instance; the builder
    // drops the ones that are needles for the instance at hand.
    let mut pool = report.distractors.clone();
    pool.extend(
        report
            .samples
            .iter()
            .flat_map(|s| s.relevant_docs.iter().cloned()),
    );
    pool.sort();
    pool.dedup();

    let samples = &report.samples;
    let instances: Vec<TaskInstance> = (0..args.n_instances)
        .map(|i| {
            let idx = i as u64;
            let shuffle_seed = derive_seed(args.seed, "shuffle", idx);
            match args.mode {
                BuildMode::Niah => {
                    let pick = derive_seed(args.seed, "sample", idx) % samples.len() as u64;
                    task::build_niah(
                        &samples[pick as usize],
                        &pool,
                        args.total_docs,
                        shuffle_seed,
                    )
                }
                BuildMode::Multiq => {
                    let k = task::sample_question_count(derive_seed(args.seed, "questions", idx))
                        .min(samples.len());
                    task::build_multiq(samples, k, &pool, args.total_docs, shuffle_seed)
                }
            }
        })
        .collect::<Result<_, _>>()?;

    write_atomic(&args.out, jsonl(&instances).as_bytes())?;
    let n = instances.len() as f64;
    let summary = BuildSummary {
        instances: instances.len(),
        mean_docs: instances.iter().map(|t| t.total_docs() as f64).sum::<f64>() / n,
        mean_questions: instances
            .iter()
            .map(|t| t.questions.len() as f64)
            .sum::<f64>()
            / n,
        mean_tokens: instances
            .iter()
            .map(|t| stream_tokens(t) as f64)
            .sum::<f64>()
            / n,
        resampled: instances.iter().filter(|t| t.distractors_resampled).count(),
        skipped_rows: report.skipped,
    };
    tracing::info!(?summary, out = %args.out.display(), "built tasks");
    Ok(summary)
}

pub fn load_tasks(path: &Path) -> Result<Vec<TaskInstance>, CliError> {
    let tasks: Vec<TaskInstance> = read_jsonl(path)?;
    if tasks.is_empty() {
        return Err(CliError::Invalid(format!(
            "{} holds no tasks",
            path.display()
        )));
    }
    for (i, t) in tasks.iter().enumerate() {
        if t.questions.is_empty() || t.questions.len() != t.gold.len() {
            return Err(CliError::Invalid(format!(
                "{} line {}: questions and gold must be non-empty and aligned",
                path.display(),
                i + 1
            )));
        }
    }
    Ok(tasks)
}

/// One replay script per task, in task order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayScript {
    pub task_id: String,
    pub responses: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ScriptKind {
    /// Silent streaming, then the first gold answer for every question.
    Gold,
    /// Silent streaming, then an answer that matches no gold string.
    Wrong,
    /// Empty text on every step.
    Empty,
}

pub fn cmd_script(
    tasks_path: &Path,
    kind: ScriptKind,
    config: &EpisodeConfig,
    out: &Path,
) -> Result<Vec<ReplayScript>, CliError> {
    let tasks = load_tasks(tasks_path)?;
    let scripts = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let chunks = chunk_stream(&t.document_texts(), config, &WordCounter::default())?
                .chunks
                .len();
            let mut responses = vec![String::new(); chunks];
            responses.extend(t.gold.iter().enumerate().map(|(q, gold)| match kind {
                ScriptKind::Gold => {
                    format!(
                        "<answer>{}</answer>",
                        gold.first().map_or("", String::as_str)
                    )
                }
                ScriptKind::Wrong => format!("<answer>not {} {q}</answer>", gold.join(" ")),
                ScriptKind::Empty => String::new(),
            }));
            Ok(ReplayScript {
                task_id: task_id(i),
                responses,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    write_atomic(out, jsonl(&scripts).as_bytes())?;
    Ok(scripts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PolicySpec {
    Replay { script: PathBuf },
    Heuristic,
    Remote(RemotePolicyConfig),
}

impl PolicySpec {
    pub fn name(&self) -> &'static str {
        match self {
            PolicySpec::Replay { .. } => "replay",
            PolicySpec::Heuristic => "heuristic",
            PolicySpec::Remote(_) => "remote",
        }
    }
}

/// Optional settings file (TOML). Command-line flags win over it.
///
/// ```toml
/// chunk_size = 4096
/// retrieve_k = 6
/// schema = "table"
///
/// [remote]
/// endpoint = "http://127.0.0.1:8000/v1/chat/completions"
/// model = "my-model"
/// temperature = 0.7
/// max_in_flight = 4
///
/// [embedder]
/// kind = "deterministic-hash"
/// dimension = 256
/// ngram = 3
/// ```
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub chunk_size: Option<usize>,
    pub chunk_overlap: Option<usize>,
    pub retrieve_k: Option<usize>,
    pub schema: Option<SchemaVariant>,
    pub max_parse_diagnostics: Option<usize>,
    pub remote: Option<RemotePolicyConfig>,
    pub embedder: Option<EmbeddingProvider>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn episode(&self) -> EpisodeConfig {
        let d = EpisodeConfig::default();
        EpisodeConfig {
            chunk_size_tokens: self.chunk_size.unwrap_or(d.chunk_size_tokens),
            chunk_overlap_tokens: self.chunk_overlap.unwrap_or(d.chunk_overlap_tokens),
            retrieve_k: self.retrieve_k.unwrap_or(d.retrieve_k),
            schema: self.schema.unwrap_or(d.schema),
            max_parse_diagnostics_shown: self
                .max_parse_diagnostics
                .unwrap_or(d.max_parse_diagnostics_shown),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub tasks: PathBuf,
    pub policy: PolicySpec,
    pub episode: EpisodeConfig,
    pub embedder: EmbeddingProvider,
    pub seed: u64,
    /// Episodes run concurrently; 1 runs them one after another.
    pub parallel: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tasks_path: String,
    pub tasks_sha256: String,
    pub policy: PolicySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_sha256: Option<String>,
    pub config: EpisodeConfig,
    pub embedder: EmbeddingProvider,
    pub tokens_per_word: f64,
    pub seed: u64,
    pub instances: usize,
}

impl RunManifest {
    /// Hashes everything but the id itself and the input file locations;
    /// inputs are identified by content.
    fn compute_id(&mut self) {
        let mut canonical = self.clone();
        canonical.run_id.clear();
        canonical.tasks_path.clear();
        if let PolicySpec::Replay { script } = &mut canonical.policy {
            *script = PathBuf::new();
        }
        let body = serde_json::to_string(&canonical).expect("manifest serializes");
        self.run_id = sha256_hex(body.as_bytes())[..12].to_string();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub task_id: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub completed: usize,
    pub failures: Vec<InstanceFailure>,
}

enum PolicySource {
    Replay(Vec<ReplayScript>),
    Heuristic,
    Remote(RemoteClient),
}

impl PolicySource {
    fn make(&self, index: usize) -> Result<Box<dyn Policy>, PolicyError> {
        Ok(match self {
            PolicySource::Replay(scripts) => {
                let script = scripts
                    .get(index)
                    .map(|s| s.responses.clone())
                    .unwrap_or_default();
                Box::new(ReplayPolicy::new(script))
            }
            PolicySource::Heuristic => Box::new(HeuristicPolicy::new()),
            PolicySource::Remote(client) => Box::new(client.policy()),
        })
    }
}

pub fn cmd_run(args: &RunArgs) -> Result<RunOutcome, CliError> {
    args.episode.validate()?;
    if args.parallel == 0 {
        return Err(CliError::Invalid("--parallel must be >= 1".into()));
    }
    let task_bytes = fs::read(&args.tasks).map_err(io_err(&args.tasks))?;
    let tasks: Vec<Arc<TaskInstance>> =
        load_tasks(&args.tasks)?.into_iter().map(Arc::new).collect();

    let (source, script_sha256) = match &args.policy {
        PolicySpec::Replay { script } => {
            let bytes = fs::read(script).map_err(io_err(script))?;
            let scripts: Vec<ReplayScript> = read_jsonl(script)?;
            if scripts.len() != tasks.len() {
                return Err(CliError::Invalid(format!(
                    "{} has {} scripts for {} tasks",
                    script.display(),
                    scripts.len(),
                    tasks.len()
                )));
            }
            (PolicySource::Replay(scripts), Some(sha256_hex(&bytes)))
        }
        PolicySpec::Heuristic => (PolicySource::Heuristic, None),
        PolicySpec::Remote(cfg) => (PolicySource::Remote(RemoteClient::new(cfg.clone())?), None),
    };
    let embedder = args.embedder.build()?;
    let tokenizer = WordCounter::default();

    let mut manifest = RunManifest {
        run_id: String::new(),
        tasks_path: args.tasks.display().to_string(),
        tasks_sha256: sha256_hex(&task_bytes),
        policy: args.policy.clone(),
        script_sha256,
        config: args.episode,
        embedder: args.embedder.clone(),
        tokens_per_word: tokenizer.tokens_per_word,
        seed: args.seed,
        instances: tasks.len(),
    };
    manifest.compute_id();
    let run_dir = args.out.join(&manifest.run_id);
    let transcripts_dir = run_dir.join("transcripts");
    fs::create_dir_all(&transcripts_dir).map_err(io_err(&transcripts_dir))?;
    write_atomic(
        &run_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)
            .expect("manifest")
            .as_bytes(),
    )?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.parallel)
        .build()
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    let exec = if args.parallel > 1 {
        Exec::Parallel
    } else {
        Exec::Sequential
    };
    let results: Vec<Result<TrajectoryRecord, String>> = pool.install(|| {
        par::map_range(exec, tasks.len(), |i| {
            let id = task_id(i);
            let run = || -> Result<TrajectoryRecord, CliError> {
                let mut policy = source.make(i)?;
                let outcome = environment::run_episode(
                    tasks[i].clone(),
                    &id,
                    args.episode,
                    embedder.clone(),
                    &tokenizer,
                    policy.as_mut(),
                )?;
                write_atomic(
                    &transcripts_dir.join(format!("{id}.jsonl")),
                    outcome.transcript_jsonl().as_bytes(),
                )?;
                Ok(outcome.record)
            };
            run().map_err(|e| {
                tracing::warn!(task = %id, error = %e, "instance failed");
                e.to_string()
            })
        })
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => records.push(rec),
            Err(error) => failures.push(InstanceFailure {
                task_id: task_id(i),
                error,
            }),
        }
    }
    write_atomic(&run_dir.join("records.jsonl"), jsonl(&records).as_bytes())?;
    let failures_path = run_dir.join("failures.jsonl");
    if failures.is_empty() {
        let _ = fs::remove_file(&failures_path);
    } else {
        write_atomic(&failures_path, jsonl(&failures).as_bytes())?;
    }
    if records.is_empty() {
        return Err(CliError::AllFailed {
            failed: failures.len(),
        });
    }
    tracing::info!(run = %manifest.run_id, completed = records.len(), failed = failures.len(), "run finished");
    Ok(RunOutcome {
        run_dir,
        manifest,
        completed: records.len(),
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub task_id: String,
    pub em: f64,
    pub per_question: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub run_id: String,
    pub instances: Vec<InstanceScore>,
    pub mean_em: f64,
    pub action_stats: ActionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub runs: Vec<(String, RunScore)>,
    /// Mean of the per-run means.
    pub mean_em: f64,
}

/// A run's transcripts, keyed by task id.
pub fn load_transcripts(run_dir: &Path) -> Result<BTreeMap<String, Vec<TranscriptStep>>, CliError> {
    let dir = run_dir.join("transcripts");
    let missing = || CliError::MissingTranscripts {
        dir: run_dir.display().to_string(),
    };
    let entries = fs::read_dir(&dir).map_err(|_| missing())?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(io_err(&dir))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        out.insert(id, read_jsonl(&path)?);
    }
    if out.is_empty() {
        return Err(missing());
    }
    Ok(out)
}

/// Action frequencies recomputed from serialized transcripts. Training
/// steps come from `records` when a record with the same task id has one.
pub fn transcript_action_stats(
    transcripts: &BTreeMap<String, Vec<TranscriptStep>>,
    records: &[TrajectoryRecord],
) -> ActionStats {
    let steps: BTreeMap<&str, Option<u64>> = records
        .iter()
        .map(|r| (r.task_id.as_str(), r.training_step))
        .collect();
    let counts: Vec<(Option<u64>, ActionCounts)> = transcripts
        .iter()
        .map(|(id, steps_)| {
            let seqs: Vec<ActionSequence> = steps_
                .iter()
                .map(|s| ActionSequence::from_actions(s.actions.clone()))
                .collect();
            (
                steps.get(id.as_str()).copied().flatten(),
                ActionCounts::from_sequences(&seqs),
            )
        })
        .collect();
    action_stats_from_counts(&counts)
}

fn score_one(run_dir: &Path) -> Result<RunScore, CliError> {
    let transcripts = load_transcripts(run_dir)?;
    let manifest_path = run_dir.join("manifest.json");
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?)
            .map_err(|source| CliError::Json {
                path: manifest_path.display().to_string(),
                line: 1,
                source,
            })?;
    let records: Vec<TrajectoryRecord> = read_jsonl(&run_dir.join("records.jsonl"))?;
    let gold: BTreeMap<&str, &Vec<Vec<String>>> = records
        .iter()
        .map(|r| (r.task_id.as_str(), &r.gold))
        .collect();

    let mut instances = Vec::new();
    for (id, steps) in &transcripts {
        let answers: Vec<String> = steps.iter().filter_map(|s| s.answer.clone()).collect();
        let gold = gold
            .get(id.as_str())
            .ok_or_else(|| CliError::Invalid(format!("transcript {id} has no matching record")))?;
        let per_question = reward::per_question_em(&answers, gold)?;
        instances.push(InstanceScore {
            task_id: id.clone(),
            em: reward::task_reward(&answers, gold)?,
            per_question,
        });
    }
    let mean_em = instances.iter().map(|s| s.em).sum::<f64>() / instances.len() as f64;
    let stats = transcript_action_stats(&transcripts, &records);
    let score = RunScore {
        run_id: manifest.run_id,
        instances,
        mean_em,
        action_stats: stats,
    };
    write_atomic(
        &run_dir.join("scores.json"),
        serde_json::to_string_pretty(&score)
            .expect("scores")
            .as_bytes(),
    )?;
    write_atomic(
        &run_dir.join("action_stats.csv"),
        score.action_stats.to_csv().as_bytes(),
    )?;
    Ok(score)
}

/// Scores each run directory (writing its `scores.json` and
/// `action_stats.csv`) and averages across runs.
pub fn cmd_score(run_dirs: &[PathBuf]) -> Result<ScoreReport, CliError> {
    if run_dirs.is_empty() {
        return Err(CliError::Invalid("no run directory given".into()));
    }
    let runs = run_dirs
        .iter()
        .map(|d| Ok((d.display().to_string(), score_one(d)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let mean_em = runs.iter().map(|(_, r)| r.mean_em).sum::<f64>() / runs.len() as f64;
    Ok(ScoreReport { runs, mean_em })
}

/// Reads rewards as whitespace- or comma-separated numbers, or a JSON array.
pub fn parse_rewards(text: &str) -> Result<Vec<f64>, CliError> {
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed)
            .map_err(|e| CliError::Invalid(format!("rewards: {e}")));
    }
    trimmed
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Invalid(format!("bad reward value {t:?}")))
        })
        .collect()
}

pub fn cmd_advantage(
    rewards_path: &Path,
    group_size: usize,
    out: &Path,
    exec: Exec,
) -> Result<Vec<GroupAdvantage>, CliError> {
    let text = fs::read_to_string(rewards_path).map_err(io_err(rewards_path))?;
    let rewards = parse_rewards(&text)?;
    let groups = batch_advantages(&rewards, group_size, exec)?;
    for g in &groups {
        let scale = g.rewards.iter().fold(1.0f64, |m, r| m.max(r.abs()));
        if g.sum().abs() > 1e-9 * scale * g.rewards.len() as f64 {
            return Err(CliError::Invalid(format!(
                "group {} advantages sum to {}",
                g.group_id,
                g.sum()
            )));
        }
    }
    write_atomic(out, jsonl(&groups).as_bytes())?;
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rewards_formats() {
        assert_eq!(
            parse_rewards("1 0\n0.5,1").unwrap(),
            vec![1.0, 0.0, 0.5, 1.0]
        );
        assert_eq!(parse_rewards("[1, 0]").unwrap(), vec![1.0, 0.0]);
        assert!(parse_rewards("1 x").is_err());
        assert!(parse_rewards("nan").is_err());
    }

    #[test]
    fn file_config_parses() {
        let cfg: FileConfig = toml::from_str(
            "chunk_size = 512\nschema = \"prompt\"\n[remote]\nmodel = \"m\"\ntemperature = 0.2\n\
             [embedder]\nkind = \"deterministic-hash\"\ndimension = 64\nngram = 2\n",
        )
        .unwrap();
        let ep = cfg.episode();
        assert_eq!(ep.chunk_size_tokens, 512);
        assert_eq!(ep.schema, SchemaVariant::Prompt);
        assert_eq!(ep.retrieve_k, 6);
        let remote = cfg.remote.unwrap();
        assert_eq!(remote.temperature, 0.2);
        assert_eq!(remote.top_p, 1.0);
        assert!(toml::from_str::<FileConfig>("bogus = 1").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::AllFailed { failed: 3 }.exit_code(), 1);
        assert_eq!(CliError::Invalid("x".into()).exit_code(), 2);
        assert_eq!(
            CliError::MissingTranscripts { dir: "d".into() }.exit_code(),
            2
        );
    }

    #[test]
    fn run_id_tracks_content_not_paths() {
        let mut a = RunManifest {
            run_id: "stale".into(),
            tasks_path: "t.jsonl".into(),
            tasks_sha256: "00".into(),
            policy: PolicySpec::Heuristic,
            script_sha256: None,
            config: EpisodeConfig::default(),
            embedder: EmbeddingProvider::default(),
            tokens_per_word: 1.3,
            seed: 1,
            instances: 2,
        };
        let mut b = a.clone();
        b.run_id = "other".into();
        b.tasks_path = "elsewhere/t.jsonl".into();
        a.compute_id();
        b.compute_id();
        assert_eq!(a.run_id, b.run_id);
        b.seed = 2;
        b.compute_id();
        assert_ne!(a.run_id, b.run_id);
    }
}
