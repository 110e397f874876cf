use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crudmem::environment::EpisodeConfig;
use crudmem::par::Exec;
use crudmem::protocol::SchemaVariant;
use crudmem::reward::DEFAULT_GROUP_SIZE;
use crudmem_cli::{
    cmd_advantage, cmd_build, cmd_run, cmd_score, cmd_script, BuildArgs, BuildMode, CliError,
    FileConfig, PolicySpec, RunArgs, ScriptKind,
};

#[derive(Parser)]
#[command(
    name = "crudmem",
    version,
    about = "Build memory-agent tasks, run episodes, and score runs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build task instances from a QA source file.
    Build {
        #[arg(long)]
        source: PathBuf,
        #[arg(long, value_enum, default_value = "niah")]
        mode: BuildMode,
        #[arg(long, default_value_t = 200)]
        total_docs: usize,
        #[arg(long, default_value_t = 1)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one episode per task and write transcripts.
    Run {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, value_parser = ["replay", "heuristic", "remote"], default_value = "heuristic")]
        policy: String,
        /// Replay script (JSONL), required for --policy replay.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        temperature: Option<f64>,
        #[command(flatten)]
        episode: EpisodeFlags,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score run directories and write scores.json and action_stats.csv.
    Score {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Group-relative advantages for a flat list of rewards.
    Advantage {
        #[arg(long)]
        rewards: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
        group_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a replay script that answers every task in a fixed way.
    Script {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, value_enum)]
        kind: ScriptKind,
        #[command(flatten)]
        episode: EpisodeFlags,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EpisodeFlags {
    /// TOML settings file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tokens per streamed chunk [default: 4096].
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    chunk_overlap: Option<usize>,
    /// Memories retrieved per step [default: 6].
    #[arg(long)]
    retrieve_k: Option<usize>,
    /// Tag vocabulary [default: table].
    #[arg(long)]
    schema: Option<SchemaVariant>,
}

impl EpisodeFlags {
    fn resolve(&self) -> Result<(FileConfig, EpisodeConfig), CliError> {
        let file = match &self.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let mut ep = file.episode();
        if let Some(v) = self.chunk_size {
            ep.chunk_size_tokens = v;
        }
        if let Some(v) = self.chunk_overlap {
            ep.chunk_overlap_tokens = v;
        }
        if let Some(v) = self.retrieve_k {
            ep.retrieve_k = v;
        }
        if let Some(v) = self.schema {
            ep.schema = v;
        }
        ep.validate()?;
        Ok((file, ep))
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Build {
            source,
            mode,
            total_docs,
            instances,
            seed,
            out,
        } => {
            let summary = cmd_build(&BuildArgs {
                source,
                mode,
                total_docs,
                n_instances: instances,
                seed,
                out,
            })?;
            print_json(&summary);
        }
        Command::Run {
            tasks,
            policy,
            script,
            endpoint,
            model,
            temperature,
            episode,
            seed,
            parallel,
            out,
        } => {
            let (file, episode) = episode.resolve()?;
            let policy = match policy.as_str() {
                "replay" => PolicySpec::Replay {
                    script: script.ok_or_else(|| {
                        CliError::Invalid("--policy replay needs --script".into())
                    })?,
                },
                "heuristic" => PolicySpec::Heuristic,
                _ => {
                    let mut cfg = file.remote.clone().unwrap_or_default();
                    if let Some(e) = endpoint {
                        cfg.endpoint = e;
                    }
                    if let Some(m) = model {
                        cfg.model = m;
                    }
                    if let Some(t) = temperature {
                        cfg.temperature = t;
                    }
                    PolicySpec::Remote(cfg)
                }
            };
            let outcome = cmd_run(&RunArgs {
                tasks,
                policy,
                episode,
                embedder: file.embedder.clone().unwrap_or_default(),
                seed,
                parallel,
                out,
            })?;
            for f in &outcome.failures {
                eprintln!("failed {}: {}", f.task_id, f.error);
            }
            println!("{}", outcome.run_dir.display());
        }
        Command::Score { runs } => print_json(&cmd_score(&runs)?),
        Command::Advantage {
            rewards,
            group_size,
            out,
        } => {
            let groups = cmd_advantage(&rewards, group_size, &out, Exec::default())?;
            println!("{} groups written to {}", groups.len(), out.display());
        }
        Command::Script {
            tasks,
            kind,
            episode,
            out,
        } => {
            let (_, episode) = episode.resolve()?;
            let scripts = cmd_script(&tasks, kind, &episode, &out)?;
            println!("{} scripts written to {}", scripts.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
