use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

mod commands;
mod config;
mod error;
mod report;

use commands::{render, Command, Context};
use config::{parse_config, Format};
use error::CliError;
use report::{write_report, Manifest};

/// Sticky reflected Brownian motion: simulation and analysis runs.
#[derive(Debug, Parser)]
#[command(name = "stickybm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides sim.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides sim.replicas.
    #[arg(long, global = true)]
    replicas: Option<usize>,

    /// Output directory (default: config output_dir, else ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Table format.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,

    /// Evaluate BAR with the product-form MGFs instead of simulation.
    #[arg(long, global = true)]
    closed_form: bool,
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let started = Instant::now();
    let path = cli.config.ok_or_else(|| CliError::Config {
        path: "--config".into(),
        message: "a configuration file is required".into(),
    })?;
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut cfg = parse_config(&text)?.with_overrides(cli.seed, cli.replicas)?;
    if cli.closed_form {
        let d = cfg.model.d;
        let bar = cfg.analyses.bar.get_or_insert_with(|| config::BarSection {
            theta_grid: vec![vec![-1.0; d]],
            closed_form: true,
            tolerance: 0.05,
        });
        bar.closed_form = true;
    }
    let format = cli.format.or(cfg.format).unwrap_or_default();
    let out = cli
        .out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let config_echo = serde_json::to_value(&cfg).expect("config serializes");
    let (seed, replicas) = cfg
        .sim
        .as_ref()
        .map_or((None, None), |s| (Some(s.seed), Some(s.replicas)));

    let mut ctx = Context::new(cfg, path.display().to_string(), format)?;
    let fragments = ctx.run(cli.command)?;
    let checks: Vec<_> = fragments
        .iter()
        .flat_map(|f| f.checks.iter().cloned())
        .collect();
    let pass = checks.iter().all(|c| c.pass);
    let mut summary = serde_json::Map::new();
    for f in &fragments {
        summary.insert(
            f.command.clone(),
            serde_json::Value::Object(f.summary.clone()),
        );
    }
    let mut manifest = Manifest {
        tool: "stickybm",
        version: env!("CARGO_PKG_VERSION"),
        command: cli.command.name().to_string(),
        config_path: path.display().to_string(),
        config: config_echo,
        seed,
        replicas,
        files: fragments
            .iter()
            .flat_map(|f| f.artifacts.iter().map(|a| a.name.clone()))
            .chain(std::iter::once("manifest.json".to_string()))
            .collect(),
        summary,
        checks,
        pass,
        wall_clock_seconds: 0.0,
    };
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    write_report(&out, &manifest, &fragments)?;
    for line in render(&fragments) {
        println!("{line}");
    }
    println!(
        "result: {} ({})",
        if pass { "PASS" } else { "FAIL" },
        out.display()
    );
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
