//! Transfer strategies behind a common trait, selected by name at run time.
//!
//! | name     | behavior                                                    |
//! |----------|-------------------------------------------------------------|
//! | `none`   | plain target learner                                        |
//! | `mapse`  | follow a gate-sampled source policy with probability `p^t`  |
//! | `mars`   | shape rewards with the gate-weighted recommendation potential |
//! | `ucb`    | context-free UCB1 choice of one source per episode          |
//! | `phi<i>` | shape rewards with source `i` alone                         |

use std::collections::BTreeMap;

use rand::Rng;

use crate::agents::Shaping;
use crate::error::{Error, Result};
use crate::mdp::{Experience, SimRng, State};
use crate::mixture::MixtureNet;

/// `Phi(s, a) = sum_i P(a = pi_i(s)) gate_i(s)`. `advice` is row-major
/// `n_sources x n_actions`.
pub fn potential(gate: &[f64], advice: &[f64], a: usize) -> f64 {
    let k = advice.len() / gate.len();
    gate.iter().enumerate().map(|(i, g)| g * advice[i * k + a]).sum()
}

/// `Phi(s, .)` for every action.
pub fn potential_row(gate: &[f64], advice: &[f64]) -> Vec<f64> {
    let k = advice.len() / gate.len();
    (0..k).map(|a| potential(gate, advice, a)).collect()
}

/// `r + c (gamma Phi_next - Phi_now)`, with `Phi_next = 0` on terminal transitions.
pub fn shaped_reward(r: f64, scale: f64, gamma: f64, phi_now: f64, phi_next: f64, terminal: bool) -> f64 {
    let phi_next = if terminal { 0.0 } else { phi_next };
    r + scale * (gamma * phi_next - phi_now)
}

/// Draws an index from a discrete distribution.
pub fn sample_index(probs: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

pub trait TransferStrategy: Send {
    fn name(&self) -> String;

    /// Called before every episode; `episode` counts from 0.
    fn begin_episode(&mut self, _episode: u64) {}

    fn end_episode(&mut self, _episode_return: f64) {}

    /// Final action given the agent's own exploratory choice `behavior`.
    fn act(&mut self, _s: &State, _advice: &[f64], behavior: usize, _rng: &mut SimRng) -> usize {
        behavior
    }

    /// Scale `c` of the shaping reward; zero when the strategy does not shape.
    fn shaping_scale(&self) -> f64 {
        0.0
    }

    /// `Phi(s, .)` when the strategy shapes rewards.
    fn potentials(&self, _s: &State, _advice: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Potential terms for a stored transition, using the current gate for both
    /// ends.
    fn shaping(&self, e: &Experience) -> Option<Shaping> {
        let t = &e.transition;
        let phi_now = self.potentials(&t.s, &e.advice)?[t.a];
        let phi_next = if t.terminal {
            vec![0.0; e.advice.len() / self.num_sources().max(1)]
        } else {
            self.potentials(&t.s_next, &e.advice_next)?
        };
        Some(Shaping {
            scale: self.shaping_scale(),
            phi_now,
            phi_next,
        })
    }

    fn num_sources(&self) -> usize;

    fn mixture(&self) -> Option<&MixtureNet> {
        None
    }

    fn mixture_mut(&mut self) -> Option<&mut MixtureNet> {
        None
    }

    /// Weights over sources at `s`, when the strategy has them.
    fn gate(&self, s: &State) -> Option<Vec<f64>> {
        self.mixture().map(|m| m.gate(s))
    }
}

/// Everything a strategy factory may need.
pub struct StrategyContext<'a> {
    pub num_sources: usize,
    pub num_actions: usize,
    pub shaping_scale: f64,
    pub mapse_p: f64,
    pub ucb_p: f64,
    pub make_mixture: &'a dyn Fn() -> MixtureNet,
}

pub type StrategyFactory = Box<dyn Fn(&StrategyContext) -> Result<Box<dyn TransferStrategy>> + Send + Sync>;

pub struct StrategyRegistry {
    factories: BTreeMap<String, StrategyFactory>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        StrategyRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut reg = StrategyRegistry::empty();
        reg.register("none", |ctx| Ok(Box::new(NoTransfer::new(ctx.num_sources))));
        reg.register("mapse", |ctx| {
            Ok(Box::new(Mapse::new((ctx.make_mixture)(), ctx.mapse_p)))
        });
        reg.register("mars", |ctx| {
            Ok(Box::new(Mars::new((ctx.make_mixture)(), ctx.shaping_scale)))
        });
        reg.register("ucb", |ctx| Ok(Box::new(Ucb::new(ctx.num_sources, ctx.ucb_p))));
        reg
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&StrategyContext) -> Result<Box<dyn TransferStrategy>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.factories.keys().cloned().collect();
        names.push("phi<i>".into());
        names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name) || parse_phi(name).is_some()
    }

    pub fn build(&self, name: &str, ctx: &StrategyContext) -> Result<Box<dyn TransferStrategy>> {
        if let Some(f) = self.factories.get(name) {
            return f(ctx);
        }
        match parse_phi(name) {
            Some(i) if i < ctx.num_sources => {
                Ok(Box::new(SinglePbrs::new(i, ctx.num_sources, ctx.shaping_scale)))
            }
            Some(i) => Err(Error::UnknownStrategy(format!(
                "{name}: source index {i} out of range for {} sources",
                ctx.num_sources
            ))),
            None => Err(Error::UnknownStrategy(format!(
                "{name} (known: {})",
                self.names().join(", ")
            ))),
        }
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        StrategyRegistry::with_defaults()
    }
}

fn parse_phi(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("phi")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Whether the named strategy consults the source library.
pub fn needs_sources(name: &str) -> bool {
    name != "none"
}

pub struct NoTransfer {
    n: usize,
}

impl NoTransfer {
    pub fn new(num_sources: usize) -> Self {
        NoTransfer { n: num_sources }
    }
}

impl TransferStrategy for NoTransfer {
    fn name(&self) -> String {
        "none".into()
    }

    fn num_sources(&self) -> usize {
        self.n
    }
}

/// Policy reuse through the learned gate: with probability `p^(episode + 1)`, sample a
/// source from `a(s)` and take its recommended action.
pub struct Mapse {
    mixture: MixtureNet,
    p: f64,
    p_t: f64,
}

impl Mapse {
    pub fn new(mixture: MixtureNet, p: f64) -> Self {
        Mapse { mixture, p, p_t: p }
    }

    pub fn reuse_probability(&self) -> f64 {
        self.p_t
    }
}

/// Action drawn from source `i`'s row of `advice`.
fn source_action(advice: &[f64], num_sources: usize, i: usize, rng: &mut SimRng) -> usize {
    let k = advice.len() / num_sources;
    let row = &advice[i * k..(i + 1) * k];
    match row.iter().position(|&p| p == 1.0) {
        Some(a) => a,
        None => sample_index(row, rng),
    }
}

impl TransferStrategy for Mapse {
    fn name(&self) -> String {
        "mapse".into()
    }

    fn begin_episode(&mut self, episode: u64) {
        self.p_t = self.p.powf(episode as f64 + 1.0);
    }

    fn act(&mut self, s: &State, advice: &[f64], behavior: usize, rng: &mut SimRng) -> usize {
        let xi: f64 = rng.gen();
        if xi >= self.p_t {
            return behavior;
        }
        let gate = self.mixture.gate(s);
        let i = sample_index(&gate, rng);
        source_action(advice, gate.len(), i, rng)
    }

    fn num_sources(&self) -> usize {
        self.mixture.num_sources()
    }

    fn mixture(&self) -> Option<&MixtureNet> {
        Some(&self.mixture)
    }

    fn mixture_mut(&mut self) -> Option<&mut MixtureNet> {
        Some(&mut self.mixture)
    }
}

/// Reward shaping with the gate-weighted recommendation potential.
pub struct Mars {
    mixture: MixtureNet,
    scale: f64,
}

impl Mars {
    pub fn new(mixture: MixtureNet, scale: f64) -> Self {
        Mars { mixture, scale }
    }
}

impl TransferStrategy for Mars {
    fn name(&self) -> String {
        "mars".into()
    }

    fn shaping_scale(&self) -> f64 {
        self.scale
    }

    fn potentials(&self, s: &State, advice: &[f64]) -> Option<Vec<f64>> {
        Some(potential_row(&self.mixture.gate(s), advice))
    }

    fn num_sources(&self) -> usize {
        self.mixture.num_sources()
    }

    fn mixture(&self) -> Option<&MixtureNet> {
        Some(&self.mixture)
    }

    fn mixture_mut(&mut self) -> Option<&mut MixtureNet> {
        Some(&mut self.mixture)
    }
}

/// Reward shaping with a single fixed source.
pub struct SinglePbrs {
    index: usize,
    gate: Vec<f64>,
    scale: f64,
}

impl SinglePbrs {
    pub fn new(index: usize, num_sources: usize, scale: f64) -> Self {
        let mut gate = vec![0.0; num_sources];
        gate[index] = 1.0;
        SinglePbrs { index, gate, scale }
    }
}

impl TransferStrategy for SinglePbrs {
    fn name(&self) -> String {
        format!("phi{}", self.index)
    }

    fn shaping_scale(&self) -> f64 {
        self.scale
    }

    fn potentials(&self, _s: &State, advice: &[f64]) -> Option<Vec<f64>> {
        Some(potential_row(&self.gate, advice))
    }

    fn num_sources(&self) -> usize {
        self.gate.len()
    }

    fn gate(&self, _s: &State) -> Option<Vec<f64>> {
        Some(self.gate.clone())
    }
}

/// UCB1 statistics over sources, with episode returns as arm rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct UcbStats {
    pub counts: Vec<u64>,
    pub sums: Vec<f64>,
}

impl UcbStats {
    pub fn new(n: usize) -> Self {
        UcbStats {
            counts: vec![0; n],
            sums: vec![0.0; n],
        }
    }

    pub fn record(&mut self, arm: usize, reward: f64) {
        self.counts[arm] += 1;
        self.sums[arm] += reward;
    }

    /// `argmax_i mean_i + sqrt(2 ln N / n_i)`; an unpulled arm is chosen first and
    /// ties go to the lowest index.
    pub fn select(&self) -> usize {
        if let Some(i) = self.counts.iter().position(|&c| c == 0) {
            return i;
        }
        let total: u64 = self.counts.iter().sum();
        let ln_n = (total as f64).ln();
        let scores: Vec<f64> = self
            .counts
            .iter()
            .zip(&self.sums)
            .map(|(&c, &s)| s / c as f64 + (2.0 * ln_n / c as f64).sqrt())
            .collect();
        crate::mdp::argmax(&scores)
    }
}

pub struct Ucb {
    stats: UcbStats,
    p: f64,
    p_t: f64,
    arm: usize,
}

impl Ucb {
    pub fn new(num_sources: usize, p: f64) -> Self {
        Ucb {
            stats: UcbStats::new(num_sources),
            p,
            p_t: p,
            arm: 0,
        }
    }

    pub fn stats(&self) -> &UcbStats {
        &self.stats
    }

    pub fn current_arm(&self) -> usize {
        self.arm
    }
}

impl TransferStrategy for Ucb {
    fn name(&self) -> String {
        "ucb".into()
    }

    fn begin_episode(&mut self, episode: u64) {
        self.p_t = self.p.powf(episode as f64 + 1.0);
        self.arm = self.stats.select();
    }

    fn end_episode(&mut self, episode_return: f64) {
        self.stats.record(self.arm, episode_return);
    }

    fn act(&mut self, _s: &State, advice: &[f64], behavior: usize, rng: &mut SimRng) -> usize {
        let xi: f64 = rng.gen();
        if xi >= self.p_t {
            return behavior;
        }
        source_action(advice, self.stats.counts.len(), self.arm, rng)
    }

    fn num_sources(&self) -> usize {
        self.stats.counts.len()
    }

    fn gate(&self, _s: &State) -> Option<Vec<f64>> {
        let mut g = vec![0.0; self.stats.counts.len()];
        g[self.arm] = 1.0;
        Some(g)
    }
}
