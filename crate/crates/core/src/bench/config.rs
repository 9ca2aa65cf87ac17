use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::transfer::StrategyRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Exploration {
    Constant { epsilon: f64 },
    /// `max(floor, decay^episode)`.
    Decay { decay: f64, floor: f64 },
}

impl Exploration {
    pub fn epsilon(&self, episode: u64) -> f64 {
        match *self {
            Exploration::Constant { epsilon } => epsilon,
            Exploration::Decay { decay, floor } => crate::agents::decayed_epsilon(decay, floor, episode),
        }
    }
}

/// Full description of one experiment. Every field has a per-environment
/// default; see [`ExperimentConfig::defaults`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvId,
    pub strategy: String,
    pub trials: usize,
    pub seed: u64,
    /// Environment steps per trial.
    pub steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub gamma: f64,
    pub exploration: Exploration,
    /// Learning rate of the target learner (Q-table step size or DQN Adam rate).
    pub agent_lr: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub dqn_hidden: Vec<usize>,
    pub target_sync: u64,
    pub dqn_l2: f64,
    pub mixture_hidden: Vec<usize>,
    pub mixture_lr: f64,
    pub mixture_epochs: usize,
    pub mixture_batch: usize,
    pub mixture_l2: f64,
    pub shaping_scale: f64,
    pub mapse_p: f64,
    pub ucb_p: f64,
    /// Sample counts at which gate values are exported.
    pub snapshots: Vec<u64>,
    /// Optional maze layout file replacing the bundled grid.
    pub layout: Option<String>,
}

/// Strategies that shape rewards get the smaller learner step size.
fn shapes_rewards(strategy: &str) -> bool {
    strategy == "mars" || strategy.starts_with("phi")
}

impl ExperimentConfig {
    pub fn defaults(env: EnvId, strategy: &str) -> Self {
        let shaped = shapes_rewards(strategy);
        match env {
            EnvId::Maze | EnvId::TwoRoom => ExperimentConfig {
                env,
                strategy: strategy.into(),
                trials: 1,
                seed: 0,
                steps: if env == EnvId::Maze { 200_000 } else { 30_000 },
                eval_every: 1000,
                eval_episodes: 5,
                gamma: 0.95,
                exploration: Exploration::Constant { epsilon: 0.12 },
                agent_lr: if shaped { 0.08 } else { 0.8 },
                buffer_capacity: 100_000,
                batch_size: 32,
                dqn_hidden: Vec::new(),
                target_sync: 0,
                dqn_l2: 0.0,
                mixture_hidden: vec![30, 30],
                mixture_lr: 0.001,
                mixture_epochs: 4,
                mixture_batch: 32,
                mixture_l2: 0.0,
                shaping_scale: 1.0,
                mapse_p: 0.99,
                ucb_p: 0.85,
                snapshots: vec![0, 5_000, 10_000, 20_000, 50_000, 100_000],
                layout: None,
            },
            EnvId::Cartpole => ExperimentConfig {
                env,
                strategy: strategy.into(),
                trials: 1,
                seed: 0,
                steps: 100_000,
                eval_every: 1000,
                eval_episodes: 5,
                gamma: 0.98,
                exploration: Exploration::Decay {
                    decay: 0.99,
                    floor: 0.01,
                },
                agent_lr: if shaped { 0.0002 } else { 0.0005 },
                buffer_capacity: 5000,
                batch_size: 32,
                dqn_hidden: vec![40, 40],
                target_sync: 500,
                dqn_l2: 1e-6,
                mixture_hidden: vec![30, 30],
                mixture_lr: 0.001,
                mixture_epochs: 3,
                mixture_batch: 32,
                mixture_l2: 0.0,
                shaping_scale: 2.0,
                mapse_p: 0.85,
                ucb_p: 0.85,
                snapshots: vec![0, 100, 500, 1_000, 2_500, 5_000],
                layout: None,
            },
        }
    }

    /// Defaults for `env`/`strategy`, overlaid with the fields present in `file`
    /// (a JSON object) and then with `overrides`.
    pub fn resolve(file: Option<&Value>, overrides: &Value) -> Result<Self> {
        let pick = |key: &str| -> Option<Value> {
            overrides
                .get(key)
                .filter(|v| !v.is_null())
                .or_else(|| file.and_then(|f| f.get(key)))
                .cloned()
        };
        let env: EnvId = match pick("env") {
            Some(v) => serde_json::from_value(v)?,
            None => return Err(Error::BadConfig("no environment given".into())),
        };
        let strategy: String = match pick("strategy") {
            Some(v) => serde_json::from_value(v)?,
            None => "none".into(),
        };
        let mut merged = serde_json::to_value(ExperimentConfig::defaults(env, &strategy))?;
        for layer in [file, Some(overrides)].into_iter().flatten() {
            let Value::Object(map) = layer else {
                return Err(Error::BadConfig("configuration must be a JSON object".into()));
            };
            for (k, v) in map {
                if !v.is_null() {
                    merged[k] = v.clone();
                }
            }
        }
        let cfg: ExperimentConfig = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::BadConfig(msg.into()));
        if !StrategyRegistry::with_defaults().contains(&self.strategy) {
            return Err(Error::UnknownStrategy(self.strategy.clone()));
        }
        if self.trials == 0 || self.steps == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("trials, steps, eval_every and eval_episodes must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        match self.exploration {
            Exploration::Constant { epsilon } if !(0.0..=1.0).contains(&epsilon) => {
                return bad("epsilon must lie in [0, 1]")
            }
            Exploration::Decay { decay, floor }
                if !(0.0..=1.0).contains(&decay) || !(0.0..=1.0).contains(&floor) =>
            {
                return bad("epsilon decay and floor must lie in [0, 1]")
            }
            _ => {}
        }
        if !(self.agent_lr >= 0.0 && self.mixture_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 || self.mixture_batch == 0 || self.mixture_epochs == 0 {
            return bad("batch sizes and mixture epochs must be positive");
        }
        if self.batch_size > self.buffer_capacity || self.mixture_batch > self.buffer_capacity {
            return bad("batch larger than the replay buffer");
        }
        if !(0.0..=1.0).contains(&self.mapse_p) || !(0.0..=1.0).contains(&self.ucb_p) {
            return bad("reuse probabilities must lie in [0, 1]");
        }
        if self.shaping_scale < 0.0 {
            return bad("shaping scale must be non-negative");
        }
        if self.dqn_l2 < 0.0 || self.mixture_l2 < 0.0 {
            return bad("L2 coefficients must be non-negative");
        }
        if self.env == EnvId::Cartpole {
            if self.dqn_hidden.is_empty() || self.target_sync == 0 {
                return bad("cartpole needs DQN hidden layers and a target sync period");
            }
            if self.layout.is_some() {
                return bad("a maze layout was given for cartpole");
            }
        }
        if self.mixture_hidden.contains(&0) || self.dqn_hidden.contains(&0) {
            return bad("hidden layers must be non-empty");
        }
        Ok(())
    }
}
