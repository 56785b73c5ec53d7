use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sympcocycle::cli::{self, Command, SCHEMA_HELP};
use sympcocycle::Error;

#[derive(Parser, Debug)]
#[command(name = "sympcocycle", version, about = "Hamiltonian cocycles over suspension flows", after_help = SCHEMA_HELP)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Flat dotted-key TOML document.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; the manifest goes next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn execute(args: &Args) -> Result<i32, Error> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::Io(format!("{}: {e}", args.config.display())))?;
    let mut cfg = cli::parse_config_for(&text, Some(args.command))?;
    cfg.command = args.command;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output = Some(out.clone());
    }
    let out = cfg.output.clone().unwrap_or_else(|| PathBuf::from(format!("{}.csv", cfg.command.name())));
    let (outcome, manifest) = cli::run_to_files(&cfg, &out)?;
    eprintln!(
        "[{}] {} rows -> {} ({:.2}s, {} workers)",
        cfg.command.name(),
        outcome.table.rows.len(),
        out.display(),
        manifest.wall_time_s,
        manifest.workers
    );
    for v in &outcome.violations {
        eprintln!("[{}] violation: {v}", cfg.command.name());
    }
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", cli::error_record(&Error::Config(e.to_string().trim().to_string())));
            return ExitCode::from(1);
        }
    };
    match execute(&args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("{}", cli::error_record(&e));
            ExitCode::from(1)
        }
    }
}
