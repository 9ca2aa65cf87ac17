use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{decayed_epsilon, epsilon_greedy, DqnAgent, DqnConfig, QTable};
use crate::envs::maze::MAZE_MAX_STEPS;
use crate::envs::{CartPoleEnv, CartPoleSpec, EnvFamily, EnvId, Environment, MazeEnv, MazeSpec};
use crate::error::{Error, Result};
use crate::mdp::{argmax, stream_rng, trial_seed, Experience, ReplayBuffer, SimRng, State, Stream, Transition};
use crate::nn::{Head, Mlp};
use crate::sources::{Dynamics, MlpDyn, Policy, SourceLibrary, SourceTask, TabularDyn, DEFAULT_KERNEL_PRECISION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    pub kernel_precision: f64,
    /// Q-learning steps per maze source (episodes start on random free cells).
    pub maze_steps: u64,
    pub maze_lr: f64,
    pub maze_gamma: f64,
    pub maze_epsilon: f64,
    /// Step budget per cart-pole source before giving up.
    pub cartpole_max_steps: u64,
    /// Greedy test episodes that must all last the full roll-out.
    pub cartpole_test_episodes: usize,
    /// Training episodes between greedy tests.
    pub cartpole_test_every: u64,
    pub dqn_lr: f64,
    pub dqn_hidden: Vec<usize>,
    pub dqn_l2: f64,
    pub gamma: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub target_sync: u64,
    pub dynamics_hidden: Vec<usize>,
    pub dynamics_lr: f64,
    pub dynamics_l2: f64,
    pub dynamics_steps: u64,
    pub dynamics_batch: usize,
    /// Most recent transitions kept for dynamics regression.
    pub dynamics_samples: usize,
}

impl PretrainConfig {
    pub fn defaults(env: EnvId) -> Self {
        PretrainConfig {
            seed: 0,
            kernel_precision: DEFAULT_KERNEL_PRECISION,
            maze_steps: if env == EnvId::TwoRoom { 40_000 } else { 400_000 },
            maze_lr: 0.8,
            maze_gamma: 0.95,
            maze_epsilon: 0.12,
            cartpole_max_steps: 300_000,
            cartpole_test_episodes: 10,
            cartpole_test_every: 10,
            dqn_lr: 0.0005,
            dqn_hidden: vec![40, 40],
            dqn_l2: 1e-6,
            gamma: 0.98,
            buffer_capacity: 5000,
            batch_size: 32,
            target_sync: 500,
            dynamics_hidden: vec![50, 50],
            dynamics_lr: 0.001,
            dynamics_l2: 1e-6,
            dynamics_steps: 40_000,
            dynamics_batch: 32,
            dynamics_samples: 50_000,
        }
    }
}

/// Per-source diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub index: usize,
    pub steps: u64,
    pub converged: bool,
    /// Maze: greedy steps from the start. Cart-pole: mean greedy test length.
    pub greedy_length: f64,
    /// Tabular sources: state-action pairs never observed.
    pub unvisited_pairs: usize,
    /// Continuous sources: held-out mean squared error of the dynamics model.
    pub heldout_mse: Option<f64>,
}

pub fn pretrain_sources(env: EnvId, cfg: &PretrainConfig, layout: Option<&str>) -> Result<(SourceLibrary, Vec<SourceReport>)> {
    let family = EnvFamily::new(env, layout)?;
    let mut tasks = Vec::new();
    let mut reports = Vec::new();
    match &family {
        EnvFamily::Maze(spec) => {
            for room in 0..spec.num_rooms() {
                let src = Arc::new(spec.room_source(room));
                let (task, report) = pretrain_maze_source(src, room, cfg)?;
                tasks.push(task);
                reports.push(report);
            }
        }
        EnvFamily::CartPole(_) => {
            for (i, spec) in CartPoleSpec::sources().into_iter().enumerate() {
                let (task, report) = pretrain_cartpole_source(spec, i, cfg)?;
                tasks.push(task);
                reports.push(report);
            }
        }
    }
    Ok((
        SourceLibrary {
            env,
            num_actions: 4,
            tasks,
        },
        reports,
    ))
}

/// Steps the greedy policy needs to reach the goal from the start, if it does.
pub fn greedy_steps_to_goal(spec: &MazeSpec, actions: &[usize]) -> Option<usize> {
    let mut cell = spec.start;
    for k in 1..=MAZE_MAX_STEPS {
        let (next, _, terminal) = crate::envs::maze_step(spec, cell, actions[cell]).ok()?;
        if terminal {
            return Some(k);
        }
        cell = next;
    }
    None
}

pub fn pretrain_maze_source(spec: Arc<MazeSpec>, index: usize, cfg: &PretrainConfig) -> Result<(SourceTask, SourceReport)> {
    let seed = trial_seed(cfg.seed, index as u64);
    let mut env_rng = stream_rng(seed, Stream::Env);
    let mut agent_rng = stream_rng(seed, Stream::Agent);
    let starts: Vec<usize> = spec.free_cells().filter(|&c| c != spec.goal).collect();
    let mut env = MazeEnv::new(spec.clone());
    let mut q = QTable::new(spec.num_cells(), 4, cfg.maze_lr, cfg.maze_gamma);
    let mut dynamics = TabularDyn::new(spec.num_cells(), 4);
    let mut total = 0u64;
    while total < cfg.maze_steps {
        let mut s = env.reset_to(*starts.choose(&mut env_rng).expect("maze has free cells"));
        loop {
            let cell = s.cell().expect("maze state");
            let a = epsilon_greedy(q.values(cell), None, cfg.maze_epsilon, &mut agent_rng);
            let out = env.step(a)?;
            let next = out.s_next.cell().expect("maze state");
            dynamics.record(cell, a, next);
            q.q_update(&Transition {
                s,
                a,
                r: out.r,
                s_next: out.s_next,
                terminal: out.terminal,
            });
            total += 1;
            if out.terminal || out.truncated || total >= cfg.maze_steps {
                break;
            }
            s = State::Discrete(next);
        }
    }
    let actions = q.greedy_actions();
    let steps = greedy_steps_to_goal(&spec, &actions);
    let free_pairs = spec.free_cells().count() * 4;
    let report = SourceReport {
        index,
        steps: total,
        converged: steps.is_some(),
        greedy_length: steps.map_or(MAZE_MAX_STEPS as f64, |k| k as f64),
        unvisited_pairs: free_pairs.saturating_sub(dynamics.visited_pairs()),
        heldout_mse: None,
    };
    if steps.is_none() {
        return Err(Error::PretrainFailed(format!(
            "maze source {index}: greedy policy misses the goal after {total} steps"
        )));
    }
    let task = SourceTask {
        policy: Policy::Tabular {
            actions,
            num_actions: 4,
        },
        dynamics: Dynamics::Tabular(dynamics),
        precision: cfg.kernel_precision,
    };
    Ok((task, report))
}

fn greedy_lengths(agent: &DqnAgent, env: &mut CartPoleEnv, episodes: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = env.reset(rng);
        let mut len = 0;
        loop {
            let step = env.step(argmax(&agent.q_values(&s)))?;
            len += 1;
            if step.done() {
                break;
            }
            s = step.s_next;
        }
        out.push(len);
    }
    Ok(out)
}

pub fn pretrain_cartpole_source(spec: CartPoleSpec, index: usize, cfg: &PretrainConfig) -> Result<(SourceTask, SourceReport)> {
    let seed = trial_seed(cfg.seed, index as u64);
    let mut env_rng = stream_rng(seed, Stream::Env);
    let mut agent_rng = stream_rng(seed, Stream::Agent);
    let mut init_rng = stream_rng(seed, Stream::Init);
    let mut eval_rng = stream_rng(seed, Stream::Eval);
    let mut env = CartPoleEnv::new(spec);
    let mut eval_env = CartPoleEnv::new(spec);
    let dqn_cfg = DqnConfig {
        hidden: cfg.dqn_hidden.clone(),
        lr: cfg.dqn_lr,
        l2: cfg.dqn_l2,
        gamma: cfg.gamma,
        batch_size: cfg.batch_size,
        sync_period: cfg.target_sync,
    };
    let mut agent = DqnAgent::new(&dqn_cfg, env.encoder(), 4, &mut init_rng);
    let mut buffer: ReplayBuffer<Experience> =
        ReplayBuffer::with_rng(cfg.buffer_capacity, stream_rng(seed, Stream::Buffer));
    let mut collected: ReplayBuffer<Transition> =
        ReplayBuffer::with_rng(cfg.dynamics_samples, stream_rng(seed, Stream::Mixture));
    let no_shaping = |_: &Experience| None;

    let mut total = 0u64;
    let mut episode = 0u64;
    let mut best = 0.0f64;
    let mut converged = false;
    while total < cfg.cartpole_max_steps {
        let mut s = env.reset(&mut env_rng);
        let eps = decayed_epsilon(0.99, 0.01, episode);
        loop {
            let a = epsilon_greedy(&agent.q_values(&s), None, eps, &mut agent_rng);
            let out = env.step(a)?;
            let t = Transition {
                s,
                a,
                r: out.r,
                s_next: out.s_next.clone(),
                terminal: out.terminal,
            };
            collected.push(t.clone());
            buffer.push(Experience::from(t));
            if buffer.len() >= agent.batch_size {
                agent.dqn_train_step(&mut buffer, &no_shaping)?;
            }
            total += 1;
            if out.done() || total >= cfg.cartpole_max_steps {
                break;
            }
            s = out.s_next;
        }
        episode += 1;
        if episode.is_multiple_of(cfg.cartpole_test_every) {
            let lengths = greedy_lengths(&agent, &mut eval_env, cfg.cartpole_test_episodes, &mut eval_rng)?;
            let mean = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
            best = best.max(mean);
            if lengths.iter().all(|&l| l >= spec.max_steps) {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::PretrainFailed(format!(
            "cart-pole source {index}: no {}-episode greedy test reached {} steps within {total} steps \
             (best mean length {best})",
            cfg.cartpole_test_episodes, spec.max_steps
        )));
    }

    let (dynamics, mse) = fit_dynamics(&collected, cfg, seed)?;
    let policy = Policy::Network {
        net: agent.online().clone(),
        encoder: agent.encoder(),
    };
    let report = SourceReport {
        index,
        steps: total,
        converged,
        greedy_length: spec.max_steps as f64,
        unvisited_pairs: 0,
        heldout_mse: Some(mse),
    };
    Ok((
        SourceTask {
            policy,
            dynamics: Dynamics::Mlp(dynamics),
            precision: cfg.kernel_precision,
        },
        report,
    ))
}

/// Trains a dynamics regressor on 90% of `data` and returns it with its mean
/// squared error on the remaining 10%.
pub fn fit_dynamics(data: &ReplayBuffer<Transition>, cfg: &PretrainConfig, seed: u64) -> Result<(MlpDyn, f64)> {
    let mut rng = stream_rng(seed, Stream::Strategy);
    let mut all: Vec<&Transition> = data.iter().collect();
    if all.len() < 10 {
        return Err(Error::InsufficientSamples {
            available: all.len(),
            requested: 10,
        });
    }
    all.shuffle(&mut rng);
    let cut = all.len() - all.len() / 10;
    let (train, test) = all.split_at(cut);
    let dim = match &train[0].s {
        State::Continuous(v) => v.len(),
        State::Discrete(_) => return Err(Error::BadConfig("dynamics regression needs continuous states".into())),
    };
    let mut sizes = vec![dim + 4];
    sizes.extend(&cfg.dynamics_hidden);
    sizes.push(dim);
    let net = Mlp::new(&sizes, Head::Linear, cfg.dynamics_l2, &mut rng);
    let mut model = MlpDyn::new(net, crate::mdp::Encoder::Identity { dim }, 4, cfg.dynamics_lr);
    let mut batch = Vec::with_capacity(cfg.dynamics_batch);
    for _ in 0..cfg.dynamics_steps {
        batch.clear();
        for _ in 0..cfg.dynamics_batch {
            batch.push(train[rng.gen_range(0..train.len())]);
        }
        model.train(&batch);
    }
    let mse = model.mse(test);
    Ok((model, mse))
}
