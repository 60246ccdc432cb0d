use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use scope_cli::{resolve_config, run_stage, write_manifest, CliError, Stage, VERSION};

/// Train, run and evaluate a block editor over a black-box generator.
///
/// Settings resolve as defaults < --config file < --override (in order) < --seed.
#[derive(Debug, Parser)]
#[command(name = "scope", version = VERSION)]
struct Cli {
    #[arg(value_enum)]
    command: Stage,
    /// JSON pipeline configuration. Missing keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted `key=value` setting, e.g. `edit.block_size=8`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Global seed; replaces the configured one.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    log::info!("{} (seed {}, root {})", cli.command.name(), cfg.seed, cfg.root.display());
    let (summary, text) = run_stage(cli.command, &cfg)?;
    let manifest = write_manifest(cli.command, &cfg, &summary)?;
    if let Some(t) = text {
        print!("{t}");
    }
    log::info!("{} done: {} (manifest {})", cli.command.name(), summary.metrics, manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json(cli.command.name()));
            ExitCode::FAILURE
        }
    }
}
