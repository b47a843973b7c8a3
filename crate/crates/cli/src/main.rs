use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use berezin_cli::config::{Command, ConfigError, ExperimentConfig, Overrides};
use berezin_cli::render;
use berezin_cli::report::Report;
use berezin_cli::run::{run, RunError};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "berezin", version, about = "Berezin quantization experiments over SL(2,Z)")]
struct Cli {
    #[command(subcommand)]
    action: Action,
}

#[derive(Subcommand)]
enum Action {
    /// Run an experiment: kernel-check, trace, toeplitz-identities,
    /// cusp-action, poincare, density, or full-suite.
    Run(RunArgs),
    /// Print a saved report as a table and optionally write its plots.
    Render {
        report: PathBuf,
        /// Directory for ladder SVG/CSV files.
        #[arg(long)]
        svg_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// `[COMMAND] [CONFIG]`; the command may come from the config file.
    #[arg(num_args = 0..=2)]
    positional: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    level: Option<usize>,
    #[arg(long)]
    truncation: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    ladder: Option<Vec<usize>>,
    #[arg(long)]
    emit_svg: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cache: Option<PathBuf>,
}

fn resolve(args: RunArgs) -> Result<(Command, ExperimentConfig), ConfigError> {
    let mut pos = args.positional.into_iter();
    let first = pos.next();
    let (command, file) = match first.as_deref().map(Command::parse) {
        Some(Ok(c)) => (Some(c), pos.next().map(PathBuf::from)),
        Some(Err(e)) if pos.len() > 0 => return Err(e),
        Some(Err(_)) => (None, first.map(PathBuf::from)),
        None => (None, None),
    };
    let file = args.config.or(file);
    let mut cfg = match &file {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env();
    cfg.apply(&Overrides {
        out: args.out,
        level: args.level,
        truncation: args.truncation,
        ladder: args.ladder,
        emit_svg: args.emit_svg,
        seed: args.seed,
        cache: args.cache,
    });
    let command = command.or(cfg.command).ok_or_else(|| ConfigError::Invalid {
        field: "command",
        message: "no command given on the command line or in the config".into(),
    })?;
    cfg.validate()?;
    Ok((command, cfg))
}

fn execute(args: RunArgs) -> Result<bool, RunError> {
    let (command, cfg) = resolve(args)?;
    let report = run(command, &cfg)?;
    print!("{}", render::table(&report));
    println!("report: {}", cfg.output.dir.join(berezin_cli::run::REPORT_FILE).display());
    Ok(report.passed)
}

fn render_saved(path: &PathBuf, svg_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let report = Report::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    print!("{}", render::table(&report));
    if let Some(dir) = svg_dir {
        std::fs::create_dir_all(&dir)?;
        for l in &report.ladders {
            let stem = l.name.replace('.', "_");
            std::fs::write(dir.join(format!("{stem}.svg")), render::ladder_svg(l, &report.config_hash))?;
            std::fs::write(dir.join(format!("{stem}.csv")), render::ladder_csv(l, &report.config_hash))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match Cli::parse().action {
        Action::Run(args) => match execute(args) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(1),
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Action::Render { report, svg_dir } => match render_saved(&report, svg_dir) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
