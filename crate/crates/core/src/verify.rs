//! Independent oracles: the value-error bound on random finite MDPs, brute-force
//! Bayesian gates, finite-difference gradients, and the suite run by
//! `ctxfer verify`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::agents::{biased_argmax, td_target, Shaping};
use crate::error::{Error, Result};
use crate::mdp::{stream_rng, Encoder, Experience, SimRng, State, Stream, Transition};
use crate::mixture::{bayes_posterior, MixtureNet};
use crate::nn::{Head, Mlp};

/// Finite MDP with state rewards. `p[(s * n_actions + a) * n_states + s2]` is
/// `P(s2 | s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub p: Vec<f64>,
    pub r: Vec<f64>,
    pub gamma: f64,
}

/// Stochastic policy, `pi[s * n_actions + a] = pi(a | s)`.
pub type PolicyMatrix = Vec<f64>;

fn random_simplex(rng: &mut SimRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|x| x / z).collect()
}

impl FiniteMdp {
    pub fn random(rng: &mut SimRng, n_states: usize, n_actions: usize, gamma: f64) -> Self {
        let mut p = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            p.extend(random_simplex(rng, n_states));
        }
        let r = (0..n_states).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FiniteMdp {
            n_states,
            n_actions,
            p,
            r,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::BadConfig("discount must lie in [0, 1)".into()));
        }
        check_row_stochastic(&self.p, self.n_states)?;
        if self.r.len() != self.n_states || !self.r.iter().all(|x| x.is_finite()) {
            return Err(Error::BadConfig("reward vector must be finite, one per state".into()));
        }
        Ok(())
    }

    /// Convex combination `(1 - eps) P + eps Q` with a random row-stochastic `Q`.
    pub fn perturbed_dynamics(&self, rng: &mut SimRng, eps: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.p.len());
        for row in self.p.chunks(self.n_states) {
            let noise = random_simplex(rng, self.n_states);
            out.extend(row.iter().zip(&noise).map(|(p, q)| (1.0 - eps) * p + eps * q));
        }
        out
    }

    pub fn random_policy(&self, rng: &mut SimRng) -> PolicyMatrix {
        (0..self.n_states)
            .flat_map(|_| random_simplex(rng, self.n_actions))
            .collect()
    }

    /// `P^pi` for dynamics `p`.
    pub fn policy_matrix(&self, p: &[f64], pi: &[f64]) -> DMatrix<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        DMatrix::from_fn(ns, ns, |s, s2| {
            (0..na).map(|a| pi[s * na + a] * p[(s * na + a) * ns + s2]).sum()
        })
    }
}

fn check_row_stochastic(p: &[f64], n: usize) -> Result<()> {
    for row in p.chunks(n) {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || row.iter().any(|&x| x < 0.0) {
            return Err(Error::BadConfig(format!("transition row sums to {sum}")));
        }
    }
    Ok(())
}

/// Solves `(I - gamma P^pi) V = R`.
pub fn policy_value(mdp: &FiniteMdp, pi: &[f64]) -> Result<Vec<f64>> {
    value_with(mdp, &mdp.p, pi)
}

fn value_with(mdp: &FiniteMdp, p: &[f64], pi: &[f64]) -> Result<Vec<f64>> {
    let n = mdp.n_states;
    let a = DMatrix::<f64>::identity(n, n) - mdp.policy_matrix(p, pi) * mdp.gamma;
    let b = DVector::from_column_slice(&mdp.r);
    let v = a.lu().solve(&b).ok_or(Error::Singular)?;
    Ok(v.iter().copied().collect())
}

/// Largest absolute row sum.
pub fn matrix_inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Compares `||V_hat - V||_inf` against
/// `gamma / (1 - gamma)^2 * ||R||_inf * ||P_hat^pi - P^pi||_inf`.
pub fn check_value_bound(mdp: &FiniteMdp, p_hat: &[f64], pi: &[f64]) -> Result<BoundCheck> {
    check_row_stochastic(p_hat, mdp.n_states)?;
    let v = value_with(mdp, &mdp.p, pi)?;
    let v_hat = value_with(mdp, p_hat, pi)?;
    let lhs = v
        .iter()
        .zip(&v_hat)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let r_inf = mdp.r.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let diff = mdp.policy_matrix(p_hat, pi) - mdp.policy_matrix(&mdp.p, pi);
    let g = mdp.gamma;
    let rhs = g / ((1.0 - g) * (1.0 - g)) * r_inf * matrix_inf_norm(&diff);
    Ok(BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
    })
}

/// Monte Carlo estimate of `V(s0)` as `(mean, standard error)`. Rewards are
/// collected on entering each state, starting with `R(s0)`.
pub fn monte_carlo_value(
    mdp: &FiniteMdp,
    pi: &[f64],
    s0: usize,
    episodes: usize,
    rng: &mut SimRng,
) -> (f64, f64) {
    let horizon = if mdp.gamma == 0.0 {
        1
    } else {
        (1e-12f64.ln() / mdp.gamma.ln()).ceil() as usize + 1
    };
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let (mut s, mut disc, mut g) = (s0, 1.0, 0.0);
        for _ in 0..horizon {
            g += disc * mdp.r[s];
            disc *= mdp.gamma;
            let a = crate::transfer::sample_index(&pi[s * na..(s + 1) * na], rng);
            s = crate::transfer::sample_index(&mdp.p[(s * na + a) * ns..(s * na + a + 1) * ns], rng);
        }
        returns.push(g);
    }
    mean_stderr(&returns)
}

pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Exact Bayes update of a weight vector by per-source likelihoods. `None` when
/// every weighted likelihood is zero.
pub fn bayes_update(prior: &[f64], likelihoods: &[f64]) -> Option<Vec<f64>> {
    let joint: Vec<f64> = prior.iter().zip(likelihoods).map(|(p, l)| p * l).collect();
    let z: f64 = joint.iter().sum();
    (z > 0.0).then(|| joint.iter().map(|x| x / z).collect())
}

/// Applies one Bayes update per likelihood vector, starting from `prior`.
/// Zero-evidence observations leave the weights unchanged.
pub fn sequential_bayes(prior: &[f64], observations: &[Vec<f64>]) -> Vec<f64> {
    let mut w = prior.to_vec();
    for l in observations {
        if let Some(next) = bayes_update(&w, l) {
            w = next;
        }
    }
    w
}

/// Per-state gate obtained by sequential Bayes updates from the uniform prior.
/// `samples[s]` lists the likelihood vectors observed in state `s`.
pub fn brute_force_gate(n_sources: usize, samples: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let uniform = vec![1.0 / n_sources as f64; n_sources];
    samples.iter().map(|obs| sequential_bayes(&uniform, obs)).collect()
}

/// Central finite differences of `f` around `x`.
pub fn finite_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_k |a_k - b_k| / max(|a_k|, |b_k|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// A random gating network, kernel-likelihood batch, and the worst relative
/// error between its analytic gradient and central differences.
pub fn mixture_gradient_check(seed: u64) -> f64 {
    let mut rng = stream_rng(seed, Stream::Init);
    let dim = rng.gen_range(2..=5);
    let n_sources = rng.gen_range(2..=4);
    let hidden = rng.gen_range(3..=8);
    let l2 = if rng.gen_bool(0.5) { 1e-3 } else { 0.0 };
    let mut net = Mlp::new(&[dim, hidden, hidden, n_sources], Head::Softmax, l2, &mut rng);
    // nonzero biases: no unit sits exactly on a ReLU kink
    for p in net.params_mut() {
        if *p == 0.0 {
            *p = rng.gen_range(-0.2..0.2);
        }
    }
    let mix = MixtureNet::new(net, Encoder::Identity { dim }, 1e-3, 1, 8);
    let batch: Vec<Experience> = (0..rng.gen_range(4..=12))
        .map(|_| {
            let s: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
            // squared prediction errors of each source, mapped through the kernel
            let likelihoods = (0..n_sources)
                .map(|_| (-rng.gen_range(0.0..3.0f64)).exp().max(1e-12))
                .collect();
            Experience {
                transition: Transition {
                    s: State::Continuous(s.clone()),
                    a: 0,
                    r: 0.0,
                    s_next: State::Continuous(s),
                    terminal: false,
                },
                likelihoods,
                advice: Vec::new(),
                advice_next: Vec::new(),
            }
        })
        .collect();
    let refs: Vec<&Experience> = batch.iter().collect();
    let (analytic, _) = mix.gradient(&refs);
    let mut probe = mix.clone();
    let x = mix.net().params().to_vec();
    let numeric = finite_difference(
        &mut |p| {
            probe.net_mut().params_mut().copy_from_slice(p);
            probe.objective(&refs)
        },
        &x,
        1e-5,
    );
    max_relative_error(&analytic, &numeric, 1e-6)
}

/// Deterministic finite MDP with per-transition rewards, for exact planning.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `(next, reward, terminal)` for each `(s, a)`.
    pub next: Vec<(usize, f64, bool)>,
}

impl DeterministicMdp {
    /// Chain `0 - 1 - ... - (n-1)`: action 0 steps left, 1 steps right. Reaching
    /// the right end pays `goal` and terminates; every other step pays `step`.
    pub fn chain(n: usize, step: f64, goal: f64) -> Self {
        let mut next = Vec::with_capacity(2 * n);
        for s in 0..n {
            let left = s.saturating_sub(1);
            let right = (s + 1).min(n - 1);
            next.push((left, step, false));
            next.push(if right == n - 1 { (right, goal, true) } else { (right, step, false) });
        }
        DeterministicMdp {
            n_states: n,
            n_actions: 2,
            next,
        }
    }

    /// Greedy policy after value iteration to convergence, optionally with a
    /// scaled look-ahead potential `phi[s][a]`.
    pub fn greedy_policy(&self, gamma: f64, shaping: Option<(f64, &[Vec<f64>])>) -> Vec<usize> {
        let na = self.n_actions;
        let mut q = vec![0.0; self.n_states * na];
        for _ in 0..100_000 {
            let mut delta: f64 = 0.0;
            for s in 0..self.n_states {
                for a in 0..na {
                    let (s2, r, term) = self.next[s * na + a];
                    let sh = shaping.map(|(c, phi)| Shaping {
                        scale: c,
                        phi_now: phi[s][a],
                        phi_next: phi[s2].clone(),
                    });
                    let y = td_target(r, gamma, term, &q[s2 * na..(s2 + 1) * na], sh.as_ref());
                    delta = delta.max((y - q[s * na + a]).abs());
                    q[s * na + a] = y;
                }
            }
            if delta < 1e-13 {
                break;
            }
        }
        (0..self.n_states)
            .map(|s| {
                let row = &q[s * na..(s + 1) * na];
                biased_argmax(row, shaping.map(|(c, phi)| (c, &phi[s][..])))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        detail,
    }
}

/// Randomized value-bound check; returns `(violations, worst lhs/rhs ratio)`.
pub fn value_bound_suite(seed: u64, instances: usize) -> Result<(usize, f64)> {
    let mut rng = stream_rng(seed, Stream::Init);
    let gammas = [0.5, 0.9, 0.95];
    let (mut violations, mut worst) = (0, 0.0f64);
    for k in 0..instances {
        let ns = rng.gen_range(1..=6);
        let na = rng.gen_range(1..=3);
        let mdp = FiniteMdp::random(&mut rng, ns, na, gammas[k % 3]);
        let eps = rng.gen_range(0.0..0.5);
        let p_hat = mdp.perturbed_dynamics(&mut rng, eps);
        let pi = mdp.random_policy(&mut rng);
        let b = check_value_bound(&mdp, &p_hat, &pi)?;
        if !b.holds {
            violations += 1;
        }
        if b.rhs > 0.0 {
            worst = worst.max(b.lhs / b.rhs);
        }
    }
    Ok((violations, worst))
}

pub fn run_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();

    let worst = (0..20u64).map(mixture_gradient_check).fold(0.0, f64::max);
    out.push(check(
        "mixture gradient vs finite differences",
        worst < 1e-4,
        format!("max relative error {worst:.3e} over 20 instances"),
    ));

    let mut rng = stream_rng(1, Stream::Init);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=6);
        let prior = random_simplex(&mut rng, n);
        let lik: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let a = bayes_posterior(&prior, &lik).expect("positive evidence");
        let b = sequential_bayes(&prior, &[lik]);
        worst = worst.max(max_abs_diff(&a, &b));
    }
    out.push(check(
        "Bayes posterior vs oracle update",
        worst < 1e-12,
        format!("max abs difference {worst:.3e} over 1000 pairs"),
    ));

    match value_bound_suite(2, 1000) {
        Ok((violations, ratio)) => out.push(check(
            "value-error bound on random finite MDPs",
            violations == 0,
            format!("{violations} violations in 1000 instances, max lhs/rhs {ratio:.3}"),
        )),
        Err(e) => out.push(check("value-error bound on random finite MDPs", false, e.to_string())),
    }

    let mut rng = stream_rng(3, Stream::Init);
    let mut worst_z = 0.0f64;
    for _ in 0..5 {
        let mdp = FiniteMdp::random(&mut rng, 4, 2, 0.8);
        let pi = mdp.random_policy(&mut rng);
        let v = policy_value(&mdp, &pi).expect("nonsingular");
        let (mean, se) = monte_carlo_value(&mdp, &pi, 0, 10_000, &mut rng);
        worst_z = worst_z.max((mean - v[0]).abs() / se.max(1e-12));
    }
    out.push(check(
        "policy value vs Monte Carlo returns",
        worst_z < 3.0,
        format!("max deviation {worst_z:.2} standard errors"),
    ));

    let chain = DeterministicMdp::chain(5, -0.01, 1.0);
    let phi: Vec<Vec<f64>> = (0..5).map(|s| vec![0.9 * (s % 2) as f64, 0.3]).collect();
    let plain = chain.greedy_policy(0.95, None);
    let shaped = chain.greedy_policy(0.95, Some((1.0, &phi)));
    out.push(check(
        "shaping leaves the greedy policy unchanged",
        plain == shaped,
        format!("plain {plain:?}, shaped {shaped:?}"),
    ));
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
