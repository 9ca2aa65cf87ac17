//! Experiment orchestration: configuration, the train/evaluate loop, source
//! pretraining and CSV/JSON output.

mod config;
mod output;
mod pretrain;
mod run;

pub use config::{Exploration, ExperimentConfig};
pub use output::{curve_csv, emit_outputs, gate_csv, OUTPUT_FORMAT_VERSION};
pub use pretrain::{
    fit_dynamics, greedy_steps_to_goal, pretrain_cartpole_source, pretrain_maze_source, pretrain_sources,
    PretrainConfig, SourceReport,
};
pub use run::{
    build_strategy, make_mixture, run_trial, run_trial_with_hook, EvalRow, GateSnapshot, Learner, RunRecord,
    StepHook,
};

use crate::error::Result;
use crate::sources::SourceLibrary;

/// Runs every trial of `cfg` in order.
pub fn run_experiment(cfg: &ExperimentConfig, library: Option<&SourceLibrary>) -> Result<Vec<RunRecord>> {
    (0..cfg.trials as u64).map(|k| run_trial(cfg, library, k)).collect()
}
