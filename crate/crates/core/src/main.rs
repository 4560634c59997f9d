use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wkb_lab::scenario::{self, emit_report, parse_config, run_sweep, summarize, ScenarioConfig};
use wkb_lab::WkbError;

/// Semiclassical NLS laboratory: reference solves, WKB approximants and rate checks.
#[derive(Parser)]
#[command(name = "wkblab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (a JSON file or a preset name) and write its report.
    Run {
        config: String,
        /// Output directory.
        #[arg(long, default_value = "wkblab-out")]
        out: PathBuf,
        /// Comma-separated ε list replacing the configured one.
        #[arg(long, value_delimiter = ',')]
        epsilon_override: Option<Vec<f64>>,
        /// Suppress the summary on stdout.
        #[arg(long)]
        quiet: bool,
    },
    /// List presets, or print one as JSON.
    Presets { name: Option<String> },
    /// Validate a scenario without running it.
    Check { config: String },
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_SOLVER: u8 = 3;

fn load(arg: &str) -> Result<ScenarioConfig, WkbError> {
    let path = Path::new(arg);
    if !path.exists() && scenario::PRESETS.iter().any(|p| p.0 == arg) {
        return scenario::preset(arg);
    }
    let text = std::fs::read_to_string(path).map_err(|source| WkbError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

fn fail(err: WkbError, code: u8) -> ExitCode {
    eprintln!("wkblab: {err}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Presets { name: None } => {
            for (name, about) in scenario::PRESETS {
                println!("{name:<20} {about}");
            }
            ExitCode::SUCCESS
        }
        Command::Presets { name: Some(name) } => match scenario::preset(&name) {
            Ok(c) => {
                println!("{}", serde_json::to_string_pretty(&c).expect("configs serialize"));
                ExitCode::SUCCESS
            }
            Err(e) => fail(e, EXIT_VALIDATION),
        },
        Command::Check { config } => match load(&config) {
            Ok(c) => {
                println!("{}: ok ({:?} regime, {} epsilon values)", c.name, c.regime, c.epsilons.len());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e, EXIT_VALIDATION),
        },
        Command::Run {
            config,
            out,
            epsilon_override,
            quiet,
        } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e, EXIT_VALIDATION),
            };
            if let Some(list) = epsilon_override {
                if let Err(e) = cfg.override_epsilons(list) {
                    return fail(e, EXIT_VALIDATION);
                }
            }
            let report = match run_sweep(&cfg) {
                Ok(r) => r,
                Err(e) if e.is_validation() => return fail(e, EXIT_VALIDATION),
                Err(e) => return fail(e, EXIT_SOLVER),
            };
            let grid = cfg.grid().ok();
            if let Err(e) = emit_report(&report, &out, grid.as_ref()) {
                return fail(e, EXIT_SOLVER);
            }
            if !quiet {
                summarize(&report, io::stdout().lock()).ok();
                println!("report written to {}", out.display());
            }
            ExitCode::SUCCESS
        }
    }
}
