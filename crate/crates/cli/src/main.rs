use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qdalign::pipeline::{FailureKind, Stage, StageError};
use qdalign::presets::Preset;
use qdalign::workflow::{self, RunConfig};
use qdalign::Error;
use serde_json::json;
use tracing_subscriber::EnvFilter;

/// Quantum-dot localization, device misalignment and Stark-shift analysis.
#[derive(Debug, Parser)]
#[command(name = "qdalign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus with ground truth.
    Simulate(Common),
    /// Locate crosses and emitters in every grid square of a corpus.
    Locate(Common),
    /// Measure the dot-to-guide offset of every device.
    Misalign(Common),
    /// Fit Stark maps and measure before/after line shifts.
    Stark(Common),
    /// Render an HTML summary of a run directory.
    Report(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Input directory (a corpus, or a run directory for `report`).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// fig2b (intrinsic), fig2c (doped), fig3 (line shifts) or fig5 (Stark maps).
    #[arg(long)]
    preset: Option<Preset>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Device count, spectrum pairs per group, or dot count, by preset.
    #[arg(long)]
    n: Option<usize>,
    /// Grid squares to simulate.
    #[arg(long)]
    squares: Option<usize>,
    /// Pre-fabrication qd_global.csv for device matching.
    #[arg(long)]
    prefab: Option<PathBuf>,
}

const DEFAULT_OUT: &str = "qdalign_out";

fn config(c: &Common) -> Result<RunConfig, StageError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! flag {
        ($($f:ident),*) => {$(
            if let Some(v) = &c.$f {
                cfg.$f = Some(v.clone());
            }
        )*};
    }
    flag!(out, input, preset, n, squares, prefab);
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn input_dir(cfg: &RunConfig) -> Result<&Path, StageError> {
    let p = cfg.input.as_deref().ok_or_else(|| {
        StageError::config(Stage::Config, Error::InvalidInput("no input directory; pass --input".into()))
    })?;
    if p.is_dir() {
        Ok(p)
    } else {
        Err(StageError::config(
            Stage::Input,
            Error::InvalidInput(format!("{} is not a directory", p.display())),
        ))
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn run(cmd: &Command) -> Result<serde_json::Value, StageError> {
    let (Command::Simulate(c)
    | Command::Locate(c)
    | Command::Misalign(c)
    | Command::Stark(c)
    | Command::Report(c)) = cmd;
    let cfg = config(c)?;
    if let Some(jobs) = c.jobs {
        if jobs == 0 {
            return Err(StageError::config(Stage::Config, Error::InvalidInput("--jobs must be positive".into())));
        }
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let summary = match cmd {
        Command::Simulate(_) => {
            let s = workflow::simulate(&cfg, &out)?;
            json!({ "preset": s.preset, "seed": s.seed, "files": s.files.len() })
        }
        Command::Locate(_) => to_json(&workflow::locate(&cfg, input_dir(&cfg)?, &out)?),
        Command::Misalign(_) => {
            let s = workflow::misalign_devices(&cfg, input_dir(&cfg)?, &out)?;
            for u in &s.unmatched {
                tracing::warn!("device {} unmatched at {}: {}", u.device_id, u.stage, u.reason);
            }
            to_json(&s)
        }
        Command::Stark(_) => {
            let s = workflow::stark_run(&cfg, input_dir(&cfg)?, &out)?;
            json!({
                "maps": s.maps.len(),
                "shift_groups": s.shift_stats.len(),
                "failures": to_json(&s.failures),
            })
        }
        Command::Report(_) => {
            let dir = input_dir(&cfg)?;
            qdalign::report::write_report(dir, &out).map_err(|e| StageError::config(Stage::Report, e))?;
            json!({ "report": out.join("report.html") })
        }
    };
    Ok(json!({ "status": "ok", "out": out, "summary": summary }))
}

fn fail(stage: Stage, kind: FailureKind, message: String) -> ExitCode {
    let code = match kind {
        FailureKind::Config => 2,
        FailureKind::Runtime => 1,
    };
    let err = json!({
        "status": "error",
        "stage": stage.as_str(),
        "kind": match kind { FailureKind::Config => "config", FailureKind::Runtime => "runtime" },
        "exit_code": code,
        "message": message,
    });
    eprintln!("{err}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("QDALIGN_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(Stage::Config, FailureKind::Config, e.to_string().trim().to_string()),
    };
    match run(&cli.command) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.stage, e.kind, e.source.to_string()),
    }
}
