use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use vdp_sync::runner::{self, BUNDLED};
use vdp_sync::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "vdp-sync", version, about = "Shortcuts to synchronization of Van der Pol oscillators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file (or a bundled scenario name).
    Run {
        scenario: String,
        /// Output directory; must be absent or empty. Defaults to runs/<name>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for parallel cells.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Parse a scenario and print it with every default filled in.
    Validate { scenario: String },
    /// List the bundled scenarios.
    List,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Io => 1,
        ErrorKind::Config => 2,
        ErrorKind::Numerical => 3,
        ErrorKind::NonConvergence => 4,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Io => "io",
        ErrorKind::Config => "config",
        ErrorKind::Numerical => "numerical",
        ErrorKind::NonConvergence => "non-convergence",
    }
}

fn default_out(source: &str) -> PathBuf {
    let stem = Path::new(source)
        .file_stem()
        .map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned());
    PathBuf::from("runs").join(stem)
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::List => {
            for (name, text) in BUNDLED {
                let scenario = runner::Scenario::from_json(text)?;
                println!("{name}\t{}\t{}", scenario.kind(), scenario.description());
            }
        }
        Command::Validate { scenario } => {
            let (parsed, _) = runner::load(&scenario)?;
            println!("{}", serde_json::to_string_pretty(&parsed).expect("scenario serializes"));
        }
        Command::Run { scenario, out, workers } => {
            let (parsed, _) = runner::load(&scenario)?;
            let out = out.unwrap_or_else(|| default_out(&scenario));
            let mut pool = rayon::ThreadPoolBuilder::new();
            if let Some(k) = workers {
                if k == 0 {
                    return Err(Error::Config("--workers must be >= 1".into()));
                }
                pool = pool.num_threads(k);
            }
            let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            let manifest = pool.install(|| runner::run_to_dir(&parsed, &scenario, &out))?;
            println!(
                "{}",
                json!({
                    "status": "ok",
                    "kind": manifest.kind,
                    "out": out.display().to_string(),
                    "outputs": manifest.outputs.len(),
                    "wall_time_s": manifest.wall_time_s,
                })
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let code = exit_code(kind);
            eprintln!(
                "{}",
                json!({ "status": "error", "kind": kind_name(kind), "exit_code": code, "message": e.to_string() })
            );
            ExitCode::from(code)
        }
    }
}
