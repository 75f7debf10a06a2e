use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tidyloop::commands::{self, PlanArgs, ServeArgs};
use tidyloop::config::{BackendKind, EngineConfig};
use tidyloop::error::CliError;
use tidyloop::formats::{to_document, write_text};

/// Preference-aware rearrangement planner.
#[derive(Parser)]
#[command(name = "tidyloop", version)]
struct Cli {
    /// Engine config file (TOML).
    #[arg(long, global = true, env = "TIDYLOOP_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config backend.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full plan and repair loop; writes plan, poses, report and transcript.
    Plan {
        scene: PathBuf,
        instruction: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Pose synthesis only; prints the pose solution.
    Synthesize {
        scene: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benchmark batch; prints raw and normalized tables.
    Bench {
        spec: PathBuf,
        /// Also write the full JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-runs a transcript and checks the result is identical.
    Replay { transcript: PathBuf },
    /// HTTP session service.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<EngineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = cli.backend {
        cfg.backend = b;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String, CliError> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Plan { scene, instruction, out } => {
            commands::plan(&cfg, &PlanArgs { scene: &scene, instruction: &instruction, out_dir: &out })
        }
        Command::Synthesize { scene, out } => {
            let doc = commands::synthesize(&cfg, &scene)?;
            match out {
                Some(p) => write_text(&p, &doc).map(|_| String::new()),
                None => Ok(doc),
            }
        }
        Command::Bench { spec, out } => {
            let res = commands::bench(&cfg, &spec)?;
            if let Some(p) = out {
                write_text(&p, &to_document(&res.document))?;
            }
            Ok(res.tables)
        }
        Command::Replay { transcript } => commands::replay(&cfg, &transcript),
        Command::Serve { host, port, data_dir } => {
            let args = ServeArgs {
                host: host.unwrap_or_else(|| cfg.server.host.clone()),
                port: port.unwrap_or(cfg.server.port),
                data_dir: data_dir.unwrap_or_else(|| PathBuf::from(&cfg.server.data_dir)),
            };
            commands::serve(&cfg, &args).map(|_| String::new())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(text) => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
