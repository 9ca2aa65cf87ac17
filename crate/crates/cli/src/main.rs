use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use ctxfer_core::bench::{emit_outputs, pretrain_sources, run_trial, ExperimentConfig, PretrainConfig};
use ctxfer_core::envs::EnvId;
use ctxfer_core::sources::SourceLibrary;
use ctxfer_core::transfer::needs_sources;
use ctxfer_core::verify::run_suite;

#[derive(Parser)]
#[command(name = "ctxfer", version, about = "Contextual policy transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train source policies and dynamics models and write a source bundle.
    Pretrain {
        #[arg(long)]
        env: EnvId,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maze layout file replacing the bundled grid.
        #[arg(long)]
        layout: Option<PathBuf>,
    },
    /// Run transfer trials and write curve.csv, gate_snapshots.csv and meta.json.
    Run {
        #[arg(long)]
        env: Option<EnvId>,
        /// mars, mapse, ucb, phi<i> or none.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        sources: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON file with ExperimentConfig fields; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the oracle suite; exits non-zero if any check fails.
    Verify,
}

fn pretrain(env: EnvId, out: PathBuf, seed: u64, layout: Option<PathBuf>) -> Result<()> {
    let layout = match layout {
        Some(p) => Some(std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let cfg = PretrainConfig {
        seed,
        ..PretrainConfig::defaults(env)
    };
    let (library, reports) = pretrain_sources(env, &cfg, layout.as_deref())?;
    library.save(&out)?;
    for r in &reports {
        eprintln!(
            "source {}: {} steps, greedy length {}, unvisited pairs {}, held-out mse {}",
            r.index,
            r.steps,
            r.greedy_length,
            r.unvisited_pairs,
            r.heldout_mse.map_or("-".to_string(), |m| m.to_string())
        );
    }
    std::fs::write(out.join("pretrain_report.json"), serde_json::to_string_pretty(&reports)?)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run(
    env: Option<EnvId>,
    strategy: Option<String>,
    trials: Option<usize>,
    steps: Option<u64>,
    sources: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    config: Option<PathBuf>,
) -> Result<()> {
    let file: Option<Value> = match &config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    let overrides = json!({
        "env": env,
        "strategy": strategy,
        "trials": trials,
        "steps": steps,
        "seed": seed,
    });
    let cfg = ExperimentConfig::resolve(file.as_ref(), &overrides)?;
    let library = match (&sources, needs_sources(&cfg.strategy)) {
        (Some(dir), true) => Some(SourceLibrary::load(dir)?),
        _ => None,
    };
    let mut records = Vec::with_capacity(cfg.trials);
    for k in 0..cfg.trials as u64 {
        let r = run_trial(&cfg, library.as_ref(), k)?;
        let last = r.curve.last().map_or(f64::NAN, |row| row.mean());
        eprintln!(
            "trial {k}: {} episodes, final greedy length {last}, {:.1}s",
            r.episodes, r.wall_clock_secs
        );
        records.push(r);
    }
    emit_outputs(&cfg, &records, &out)?;
    Ok(())
}

fn verify() -> bool {
    let mut ok = true;
    for c in run_suite() {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    ok
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { env, out, seed, layout } => pretrain(env, out, seed, layout),
        Command::Run {
            env,
            strategy,
            trials,
            steps,
            sources,
            out,
            seed,
            config,
        } => run(env, strategy, trials, steps, sources, out, seed, config),
        Command::Verify => {
            return if verify() { ExitCode::SUCCESS } else { ExitCode::FAILURE };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
