mod commands;
mod output;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pat_lab::config::{parse_config, ScenarioConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

use commands::Verdict;
use output::OutputDir;

const DEFAULT_CONFIG: &str = include_str!("../configs/default.json");

#[derive(Parser)]
#[command(name = "patlab", version, about = "Photoacoustic time-reversal laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Scenario JSON; `selftest` falls back to the bundled default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Also write gnuplot scripts next to the data.
    #[arg(long, global = true)]
    emit_gnuplot: bool,

    /// Write a PGM snapshot of u every k steps (overrides the config).
    #[arg(long, global = true, value_name = "K")]
    snapshot_stride: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Forward solve: boundary trace, energy log, final state.
    Forward,
    /// Measure and reconstruct with the configured speed.
    Reconstruct,
    /// Reconstruction error against speed perturbations of size eps.
    Stability,
    /// Carleman and observability constants with a pointwise check.
    Carleman,
    /// Exit times, trapping and tangency of rays from the support.
    Geodesics,
    /// Geodesic curvature of the boundary, cross-checked by ray probes.
    Convexity,
    /// Closed-form sanity checks on the configured domain.
    Selftest,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Forward => "forward",
            Command::Reconstruct => "reconstruct",
            Command::Stability => "stability",
            Command::Carleman => "carleman",
            Command::Geodesics => "geodesics",
            Command::Convexity => "convexity",
            Command::Selftest => "selftest",
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    config_path: Option<String>,
    config_sha256: Option<String>,
    status: &'static str,
    message: Option<String>,
    threads: usize,
    wall_time_s: f64,
    outputs: &'a [String],
}

fn load_config(cli: &Cli) -> Result<ScenarioConfig> {
    let bytes = match (&cli.config, cli.command) {
        (Some(p), _) => std::fs::read(p).with_context(|| format!("reading config {}", p.display()))?,
        (None, Command::Selftest) => DEFAULT_CONFIG.as_bytes().to_vec(),
        (None, _) => anyhow::bail!("--config is required for `{}`", cli.command.name()),
    };
    let mut cfg = parse_config(&bytes)?;
    if let Some(k) = cli.snapshot_stride {
        anyhow::ensure!(k > 0, "--snapshot-stride must be positive");
        cfg.solver.snapshot_stride = Some(k);
    }
    Ok(cfg)
}

/// Hash of the parsed config in canonical form: field order is fixed by the
/// schema, so formatting and key order in the input file do not matter.
fn config_hash(cfg: &ScenarioConfig) -> Result<String> {
    let canon = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&canon)))
}

fn dispatch(cmd: Command, cfg: &ScenarioConfig, out: &mut OutputDir) -> Result<Verdict> {
    match cmd {
        Command::Forward => commands::forward(cfg, out),
        Command::Reconstruct => commands::reconstruct_cmd(cfg, out),
        Command::Stability => commands::stability(cfg, out),
        Command::Carleman => commands::carleman(cfg, out),
        Command::Geodesics => commands::geodesics(cfg, out),
        Command::Convexity => commands::convexity(cfg, out),
        Command::Selftest => {
            let checks = selftest::run(cfg)?;
            out.table("selftest.csv", &checks)?;
            let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
            for c in &checks {
                println!("{} {}", if c.passed { "ok  " } else { "FAIL" }, c.name);
            }
            anyhow::ensure!(failed.is_empty(), "self-test failures: {}", failed.join(", "));
            Ok(Verdict::Ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    let cmd = cli.command;

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let mut out = match OutputDir::create(&cli.out, cli.emit_gnuplot) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };

    let mut hash = None;
    let result = load_config(&cli).and_then(|cfg| {
        hash = Some(config_hash(&cfg)?);
        dispatch(cmd, &cfg, &mut out)
    });
    let (status, message, code) = match result {
        Ok(Verdict::Ok) => ("ok", None, 0),
        Ok(Verdict::Violation(msg)) => {
            eprintln!("hypothesis violated: {msg}");
            ("hypothesis_violation", Some(msg), 2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            out.discard();
            ("error", Some(format!("{e:#}")), 1)
        }
    };

    let outputs = out.written();
    let manifest = Manifest {
        tool: "patlab",
        version: env!("CARGO_PKG_VERSION"),
        subcommand: cmd.name(),
        config_path: cli.config.as_ref().map(|p| p.display().to_string()),
        config_sha256: hash,
        status,
        message,
        threads: rayon::current_num_threads(),
        wall_time_s: start.elapsed().as_secs_f64(),
        outputs: &outputs,
    };
    let path = out.root().join("manifest.json");
    let written = serde_json::to_string_pretty(&manifest)
        .map_err(anyhow::Error::from)
        .and_then(|s| std::fs::write(&path, s + "\n").map_err(Into::into));
    if let Err(e) = written {
        eprintln!("error: writing {}: {e:#}", path.display());
        return ExitCode::from(1);
    }
    ExitCode::from(code)
}
