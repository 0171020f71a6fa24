use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use collabarm_core::config::{RunConfig, ENV_PREFIX};
use collabarm_core::expert::{Expert, ExpertKind};
use collabarm_core::pipeline::{self, PipelineError, Stage, StageOutcome, CHECKPOINT};
use collabarm_server::{Hub, Server, ServerConfig, ServerError};

/// Collaborative policy learning on a 2D arm benchmark.
#[derive(Debug, Parser)]
#[command(name = "collabarm", version)]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, short, global = true, env = "COLLABARM_CONFIG")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set arbiter.n=8` (repeatable, applied last).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Roll out the scripted expert and write the demonstration dataset.
    DemoCollect,
    /// Fit the policy on the demonstrations.
    Train,
    /// Run the benchmark sweep for the trained policy.
    Eval {
        /// Use the first few seeds of the suite only.
        #[arg(long)]
        fast: bool,
    },
    /// Run collaborated learning rounds starting from the trained policy.
    Collab,
    /// Compare collaboration with the simulated slow BCI expert against the expert alone.
    BciSim,
    /// Rebuild the result table and summaries from the trajectory logs.
    Report,
    /// Host the human-expert session endpoint.
    Serve,
    /// Re-run a stage from its manifest and check outputs are byte-identical.
    Rerun {
        manifest: PathBuf,
        /// Directory for the re-run (defaults to a fresh temporary directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration and its hash.
    Config,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn class(&self) -> &'static str {
        match self {
            CliError::Pipeline(e) => e.class(),
            CliError::Server(_) => "server",
            CliError::Io(_) => "io",
        }
    }
}

fn env_overrides() -> Vec<(String, String)> {
    // Only SECTION__KEY variables are config keys; COLLABARM_CONFIG is the path.
    std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.contains("__")).collect()
}

fn load(cli: &Cli) -> Result<RunConfig, PipelineError> {
    Ok(RunConfig::load(cli.config.as_deref(), &env_overrides(), &cli.sets)?)
}

fn print_outcome(cfg: &RunConfig, stage: Stage, out: &StageOutcome) {
    println!("{}", out.summary.trim_end());
    println!("manifest: {}", cfg.run.out_dir.join(stage.manifest_name()).display());
}

fn hub_for(cfg: &RunConfig, with_agent: bool) -> Result<Hub, CliError> {
    let agent = if with_agent {
        let path = cfg.server.checkpoint.clone().unwrap_or_else(|| cfg.run.out_dir.join(CHECKPOINT));
        if path.exists() {
            Some(pipeline::load_agent(cfg, &path)?)
        } else {
            log::warn!("no checkpoint at {}; only expert-only episodes can run", path.display());
            None
        }
    } else {
        None
    };
    Ok(Hub::new(ServerConfig::from_run(cfg), cfg.env().map_err(PipelineError::from)?, agent))
}

/// Runs a stage; human-remote experts are served over a fresh session.
fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<(), CliError> {
    let human = cfg.expert_kind() == Some(ExpertKind::HumanRemote) && matches!(stage, Stage::Eval { .. } | Stage::Collab);
    let out = if human {
        let hub = Arc::new(hub_for(cfg, false)?);
        let server = Server::bind(hub.clone())?.spawn()?;
        let session = hub.create_session();
        println!("expert session {} at {} (join with hello session=\"{}\")", session.id, server.url(), session.id);
        let expert = hub.human_expert(&session);
        pipeline::run_stage(cfg, stage, Some(&expert as &dyn Expert))?
    } else {
        pipeline::run_stage(cfg, stage, None)?
    };
    print_outcome(cfg, stage, &out);
    Ok(())
}

fn serve(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.run.out_dir)?;
    let log = cfg.run.out_dir.join("session_log.jsonl");
    let hub = Arc::new(hub_for(cfg, true)?.with_log(log.clone()));
    let server = Server::bind(hub)?;
    let addr = server.local_addr()?;
    println!("listening on ws://{addr}{}", collabarm_server::ENDPOINT);
    log::info!("episodes are logged to {}", log.display());
    server.run();
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Cmd::Rerun { manifest, out } => {
            let dir = out
                .clone()
                .unwrap_or_else(|| std::env::temp_dir().join(format!("collabarm-rerun-{}", std::process::id())));
            let r = pipeline::rerun(manifest, &dir)?;
            println!("{}: {} outputs byte-identical in {}", r.stage.name(), r.compared.len(), dir.display());
            if out.is_none() {
                let _ = std::fs::remove_dir_all(&dir);
            }
            Ok(())
        }
        cmd => {
            let cfg = load(cli)?;
            match cmd {
                Cmd::DemoCollect => run_stage(&cfg, Stage::DemoCollect),
                Cmd::Train => run_stage(&cfg, Stage::Train),
                Cmd::Eval { fast } => run_stage(&cfg, Stage::Eval { fast: *fast }),
                Cmd::Collab => run_stage(&cfg, Stage::Collab),
                Cmd::BciSim => run_stage(&cfg, Stage::BciSim),
                Cmd::Report => run_stage(&cfg, Stage::Report),
                Cmd::Serve => serve(&cfg),
                Cmd::Config => {
                    print!("{}", cfg.to_toml());
                    println!("# hash {}", cfg.hash());
                    Ok(())
                }
                Cmd::Rerun { .. } => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::from(if e.class() == "config" { 2 } else { 1 })
        }
    }
}
