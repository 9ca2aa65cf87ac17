use std::time::Instant;

use crate::agents::{biased_argmax, epsilon_greedy, DqnAgent, DqnConfig, QTable};
use crate::envs::{EnvFamily, Environment};
use crate::error::{Error, Result};
use crate::mdp::{stream_rng, trial_seed, Experience, ReplayBuffer, SimRng, State, Stream, Transition};
use crate::mixture::MixtureNet;
use crate::nn::{Head, Mlp};
use crate::sources::SourceLibrary;
use crate::transfer::{needs_sources, StrategyContext, StrategyRegistry, TransferStrategy};

use super::config::ExperimentConfig;

/// One evaluation: greedy episode lengths at a given sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub steps: u64,
    pub episode_lengths: Vec<f64>,
}

impl EvalRow {
    pub fn mean(&self) -> f64 {
        self.episode_lengths.iter().sum::<f64>() / self.episode_lengths.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateSnapshot {
    pub checkpoint: u64,
    pub rows: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub trial_index: u64,
    pub seed: u64,
    /// Sorted by `steps`.
    pub curve: Vec<EvalRow>,
    pub snapshots: Vec<GateSnapshot>,
    pub zero_evidence: u64,
    pub episodes: u64,
    pub wall_clock_secs: f64,
}

/// Target learner: a Q-table for mazes, DQN for continuous states.
pub enum Learner {
    Tabular(QTable),
    Dqn(Box<DqnAgent>),
}

impl Learner {
    pub fn q_values(&self, s: &State) -> Vec<f64> {
        match self {
            Learner::Tabular(q) => q.values(s.cell().expect("tabular learner needs cells")).to_vec(),
            Learner::Dqn(d) => d.q_values(s),
        }
    }
}

/// Builds the gating network for `cfg`; its weights are drawn from `rng`.
pub fn make_mixture(cfg: &ExperimentConfig, env: &dyn Environment, n_sources: usize, rng: &mut SimRng) -> MixtureNet {
    let encoder = env.encoder();
    let mut sizes = vec![encoder.dim()];
    sizes.extend(&cfg.mixture_hidden);
    sizes.push(n_sources);
    let net = Mlp::new(&sizes, Head::Softmax, cfg.mixture_l2, rng);
    MixtureNet::new(net, encoder, cfg.mixture_lr, cfg.mixture_epochs, cfg.mixture_batch)
}

pub fn build_strategy(
    cfg: &ExperimentConfig,
    env: &dyn Environment,
    n_sources: usize,
    mixture_rng: &mut SimRng,
) -> Result<Box<dyn TransferStrategy>> {
    let mixture = std::cell::RefCell::new(mixture_rng);
    let make = || make_mixture(cfg, env, n_sources, &mut mixture.borrow_mut());
    let ctx = StrategyContext {
        num_sources: n_sources,
        num_actions: env.num_actions(),
        shaping_scale: cfg.shaping_scale,
        mapse_p: cfg.mapse_p,
        ucb_p: cfg.ucb_p,
        make_mixture: &make,
    };
    StrategyRegistry::with_defaults().build(&cfg.strategy, &ctx)
}

fn check_library(cfg: &ExperimentConfig, library: Option<&SourceLibrary>, env: &dyn Environment) -> Result<()> {
    if !needs_sources(&cfg.strategy) {
        return Ok(());
    }
    let lib = library.ok_or_else(|| {
        Error::SourcesNotFound(format!("strategy `{}` needs a source bundle", cfg.strategy))
    })?;
    if lib.env != cfg.env {
        return Err(Error::BadConfig(format!(
            "source bundle is for `{}`, experiment is `{}`",
            lib.env, cfg.env
        )));
    }
    if lib.num_actions != env.num_actions() || lib.is_empty() {
        return Err(Error::BadConfig("source bundle does not match the environment".into()));
    }
    Ok(())
}

/// Greedy episode lengths of the learner (biased by the strategy's potential
/// when it shapes rewards).
fn evaluate(
    learner: &Learner,
    strategy: &dyn TransferStrategy,
    library: Option<&SourceLibrary>,
    env: &mut dyn Environment,
    episodes: usize,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    let scale = strategy.shaping_scale();
    let mut lengths = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = env.reset(rng);
        let mut len = 0usize;
        loop {
            let q = learner.q_values(&s);
            let pots = match library {
                Some(lib) => strategy.potentials(&s, &lib.advice(&s)),
                None => None,
            };
            let a = biased_argmax(&q, pots.as_deref().map(|p| (scale, p)));
            let out = env.step(a)?;
            len += 1;
            if out.done() {
                break;
            }
            s = out.s_next;
        }
        lengths.push(len as f64);
    }
    Ok(lengths)
}

/// Per-step observer, called after every environment step with the sample
/// count and the strategy (for invariant checks in tests).
pub type StepHook<'a> = &'a mut dyn FnMut(u64, &dyn TransferStrategy);

pub fn run_trial(
    cfg: &ExperimentConfig,
    library: Option<&SourceLibrary>,
    trial_index: u64,
) -> Result<RunRecord> {
    run_trial_with_hook(cfg, library, trial_index, &mut |_, _| {})
}

pub fn run_trial_with_hook(
    cfg: &ExperimentConfig,
    library: Option<&SourceLibrary>,
    trial_index: u64,
    hook: StepHook,
) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let layout = match &cfg.layout {
        Some(path) => Some(std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?),
        None => None,
    };
    let family = EnvFamily::new(cfg.env, layout.as_deref())?;
    let mut env = family.target();
    let mut eval_env = family.target();
    check_library(cfg, library, env.as_ref())?;
    let library = if needs_sources(&cfg.strategy) { library } else { None };
    let n_sources = library.map_or(family.sources().len(), |l| l.len());

    let seed = trial_seed(cfg.seed, trial_index);
    let mut env_rng = stream_rng(seed, Stream::Env);
    let mut agent_rng = stream_rng(seed, Stream::Agent);
    let mut mix_rng = stream_rng(seed, Stream::Mixture);
    let mut strat_rng = stream_rng(seed, Stream::Strategy);
    let mut init_rng = stream_rng(seed, Stream::Init);
    let mut eval_rng = stream_rng(seed, Stream::Eval);
    let mut buffer: ReplayBuffer<Experience> =
        ReplayBuffer::with_rng(cfg.buffer_capacity, stream_rng(seed, Stream::Buffer));

    let mut learner = match &family {
        EnvFamily::Maze(spec) => Learner::Tabular(QTable::new(spec.num_cells(), 4, cfg.agent_lr, cfg.gamma)),
        EnvFamily::CartPole(_) => {
            let dqn = DqnConfig {
                hidden: cfg.dqn_hidden.clone(),
                lr: cfg.agent_lr,
                l2: cfg.dqn_l2,
                gamma: cfg.gamma,
                batch_size: cfg.batch_size,
                sync_period: cfg.target_sync,
            };
            Learner::Dqn(Box::new(DqnAgent::new(&dqn, env.encoder(), env.num_actions(), &mut init_rng)))
        }
    };
    let mut strategy = build_strategy(cfg, env.as_ref(), n_sources, &mut mix_rng)?;
    let snapshot_states = env.snapshot_states();

    let mut curve = Vec::new();
    let mut snapshots = Vec::new();
    let take_snapshot = |strategy: &dyn TransferStrategy, steps: u64, out: &mut Vec<GateSnapshot>| {
        if cfg.snapshots.contains(&steps) {
            let rows: Option<Vec<_>> = snapshot_states
                .iter()
                .map(|(label, s)| strategy.gate(s).map(|g| (label.clone(), g)))
                .collect();
            if let Some(rows) = rows {
                out.push(GateSnapshot { checkpoint: steps, rows });
            }
        }
    };
    curve.push(EvalRow {
        steps: 0,
        episode_lengths: evaluate(&learner, strategy.as_ref(), library, eval_env.as_mut(), cfg.eval_episodes, &mut eval_rng)?,
    });
    take_snapshot(strategy.as_ref(), 0, &mut snapshots);

    let mut total = 0u64;
    let mut episode = 0u64;
    while total < cfg.steps {
        let mut s = env.reset(&mut env_rng);
        strategy.begin_episode(episode);
        let eps = cfg.exploration.epsilon(episode);
        let mut episode_return = 0.0;
        loop {
            let advice = library.map(|l| l.advice(&s));
            let q = learner.q_values(&s);
            let pots = advice.as_ref().and_then(|adv| strategy.potentials(&s, adv));
            let bias = pots.as_deref().map(|p| (strategy.shaping_scale(), p));
            let behavior = epsilon_greedy(&q, bias, eps, &mut agent_rng);
            let a = match &advice {
                Some(adv) => strategy.act(&s, adv, behavior, &mut strat_rng),
                None => behavior,
            };
            let out = env.step(a)?;
            episode_return += out.r;
            let t = Transition {
                s,
                a,
                r: out.r,
                s_next: out.s_next.clone(),
                terminal: out.terminal,
            };
            let e = match library {
                Some(lib) => lib.annotate(t, advice),
                None => Experience::from(t),
            };

            match &mut learner {
                Learner::Tabular(table) => {
                    let sh = strategy.shaping(&e);
                    table.shaped_update(&e.transition, sh.as_ref());
                    if strategy.mixture().is_some() {
                        buffer.push(e);
                    }
                }
                Learner::Dqn(agent) => {
                    buffer.push(e);
                    if buffer.len() >= agent.batch_size {
                        let strat = strategy.as_ref();
                        agent.dqn_train_step(&mut buffer, &|e| strat.shaping(e))?;
                    }
                }
            }
            if let Some(mix) = strategy.mixture_mut() {
                if buffer.len() >= mix.batch_size {
                    let batch = buffer.sample_batch_with(&mut mix_rng, mix.batch_size)?;
                    mix.grad_step(&batch);
                }
            }

            total += 1;
            hook(total, strategy.as_ref());
            if total.is_multiple_of(cfg.eval_every) {
                curve.push(EvalRow {
                    steps: total,
                    episode_lengths: evaluate(&learner, strategy.as_ref(), library, eval_env.as_mut(), cfg.eval_episodes, &mut eval_rng)?,
                });
            }
            take_snapshot(strategy.as_ref(), total, &mut snapshots);
            if out.done() || total >= cfg.steps {
                break;
            }
            s = out.s_next;
        }
        strategy.end_episode(episode_return);
        episode += 1;
    }

    Ok(RunRecord {
        trial_index,
        seed,
        curve,
        snapshots,
        zero_evidence: strategy.mixture().map_or(0, |m| m.zero_evidence),
        episodes: episode,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
