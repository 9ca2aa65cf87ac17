//! Target-task learners: tabular Q-learning and DQN with replay and hard target
//! updates.
//!
//! Both learners accept optional look-ahead shaping terms. With a potential
//! `Phi(s, a)` scaled by `c`, the shaped learner estimates `Q(s,a) - c Phi(s,a)`,
//! so the bootstrap action and the greedy action are taken on `Q + c Phi`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::{argmax, Encoder, Experience, ReplayBuffer, SimRng, State, Transition};
use crate::nn::{AdamState, Head, Mlp};

/// Potential terms for one transition: `phi_now = Phi(s, a)` and
/// `phi_next[b] = Phi(s', b)` for every action `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Shaping {
    pub scale: f64,
    pub phi_now: f64,
    pub phi_next: Vec<f64>,
}

/// TD target for `(r, s')` given the bootstrap values `q_next = Q(s', .)`.
pub fn td_target(r: f64, gamma: f64, terminal: bool, q_next: &[f64], shaping: Option<&Shaping>) -> f64 {
    match shaping {
        None => {
            if terminal {
                r
            } else {
                r + gamma * q_next.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            }
        }
        Some(sh) => {
            if terminal {
                return r - sh.scale * sh.phi_now;
            }
            let a_star = biased_argmax(q_next, Some((sh.scale, &sh.phi_next)));
            let shaped = r + sh.scale * (gamma * sh.phi_next[a_star] - sh.phi_now);
            shaped + gamma * q_next[a_star]
        }
    }
}

/// `argmax_a q[a] + c * bias[a]`, ties to the lowest index.
pub fn biased_argmax(q: &[f64], bias: Option<(f64, &[f64])>) -> usize {
    match bias {
        None => argmax(q),
        Some((c, b)) => {
            let v: Vec<f64> = q.iter().zip(b).map(|(q, b)| q + c * b).collect();
            argmax(&v)
        }
    }
}

/// Uniform random action with probability `eps`, otherwise the (biased) greedy
/// action. Always consumes exactly one uniform draw, plus one more when exploring.
pub fn epsilon_greedy(q: &[f64], bias: Option<(f64, &[f64])>, eps: f64, rng: &mut SimRng) -> usize {
    debug_assert!((0.0..=1.0).contains(&eps));
    if rng.gen::<f64>() < eps {
        rng.gen_range(0..q.len())
    } else {
        biased_argmax(q, bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    q: Vec<f64>,
    num_actions: usize,
    pub lr: f64,
    pub gamma: f64,
}

impl QTable {
    pub fn new(num_states: usize, num_actions: usize, lr: f64, gamma: f64) -> Self {
        QTable {
            q: vec![0.0; num_states * num_actions],
            num_actions,
            lr,
            gamma,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn values(&self, s: usize) -> &[f64] {
        &self.q[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn values_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.q[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn greedy_actions(&self) -> Vec<usize> {
        self.q.chunks(self.num_actions).map(argmax).collect()
    }

    pub fn q_update(&mut self, t: &Transition) {
        self.shaped_update(t, None);
    }

    pub fn shaped_update(&mut self, t: &Transition, shaping: Option<&Shaping>) {
        let s = t.s.cell().expect("tabular agent needs cells");
        let s_next = t.s_next.cell().expect("tabular agent needs cells");
        let y = td_target(t.r, self.gamma, t.terminal, self.values(s_next), shaping);
        let lr = self.lr;
        let q = &mut self.values_mut(s)[t.a];
        *q += lr * (y - *q);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DqnConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub l2: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub sync_period: u64,
}

#[derive(Debug, Clone)]
pub struct DqnAgent {
    online: Mlp,
    target: Mlp,
    adam: AdamState,
    encoder: Encoder,
    pub gamma: f64,
    pub batch_size: usize,
    pub sync_period: u64,
    batches: u64,
}

impl DqnAgent {
    pub fn new(cfg: &DqnConfig, encoder: Encoder, num_actions: usize, rng: &mut SimRng) -> Self {
        let mut sizes = vec![encoder.dim()];
        sizes.extend(&cfg.hidden);
        sizes.push(num_actions);
        let online = Mlp::new(&sizes, Head::Linear, cfg.l2, rng);
        let target = online.clone();
        let adam = AdamState::for_net(&online, cfg.lr);
        DqnAgent {
            online,
            target,
            adam,
            encoder,
            gamma: cfg.gamma,
            batch_size: cfg.batch_size,
            sync_period: cfg.sync_period,
            batches: 0,
        }
    }

    pub fn online(&self) -> &Mlp {
        &self.online
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    pub fn encoder(&self) -> Encoder {
        self.encoder
    }

    pub fn batches_trained(&self) -> u64 {
        self.batches
    }

    pub fn q_values(&self, s: &State) -> Vec<f64> {
        self.online.forward(&self.encoder.encode(s)).expect("Q input width")
    }

    fn target_values(&self, s: &State) -> Vec<f64> {
        self.target.forward(&self.encoder.encode(s)).expect("Q input width")
    }

    /// Mean squared TD error of `batch` against the target network, without
    /// updating anything.
    pub fn td_loss(&self, batch: &[&Experience], shaping: &dyn Fn(&Experience) -> Option<Shaping>) -> f64 {
        batch
            .iter()
            .map(|e| {
                let t = &e.transition;
                let sh = shaping(e);
                let y = td_target(t.r, self.gamma, t.terminal, &self.target_values(&t.s_next), sh.as_ref());
                let q = self.q_values(&t.s)[t.a];
                (q - y) * (q - y)
            })
            .sum::<f64>()
            / batch.len() as f64
    }

    /// One Adam step on the mean squared TD error of `batch`. Returns the pre-step
    /// loss. Every `sync_period` batches the target network is overwritten with the
    /// online network.
    pub fn train_on(
        &mut self,
        batch: &[&Experience],
        shaping: &dyn Fn(&Experience) -> Option<Shaping>,
    ) -> f64 {
        let m = batch.len() as f64;
        let mut grads = vec![0.0; self.online.num_params()];
        let mut loss = 0.0;
        let mut upstream = vec![0.0; self.online.output_dim()];
        for e in batch {
            let t = &e.transition;
            let sh = shaping(e);
            let y = td_target(t.r, self.gamma, t.terminal, &self.target_values(&t.s_next), sh.as_ref());
            let cache = self
                .online
                .forward_cached(&self.encoder.encode(&t.s))
                .expect("Q input width");
            let err = cache.output()[t.a] - y;
            loss += err * err;
            upstream.iter_mut().for_each(|u| *u = 0.0);
            upstream[t.a] = 2.0 * err / m;
            self.online.accumulate_logit_grad(&cache, &upstream, &mut grads);
        }
        self.online.add_l2_grad(&mut grads);
        self.adam.step(&mut self.online, &grads);
        self.batches += 1;
        if self.sync_period > 0 && self.batches.is_multiple_of(self.sync_period) {
            self.target.copy_params_from(&self.online);
        }
        loss / m
    }

    /// Samples a batch from `buffer` and trains on it. Returns
    /// [`Error::InsufficientSamples`] without side effects when the buffer is
    /// underfull.
    pub fn dqn_train_step(
        &mut self,
        buffer: &mut ReplayBuffer<Experience>,
        shaping: &dyn Fn(&Experience) -> Option<Shaping>,
    ) -> Result<f64> {
        if buffer.len() < self.batch_size {
            return Err(Error::InsufficientSamples {
                available: buffer.len(),
                requested: self.batch_size,
            });
        }
        let batch: Vec<Experience> = buffer
            .sample_batch(self.batch_size)?
            .into_iter()
            .cloned()
            .collect();
        let refs: Vec<&Experience> = batch.iter().collect();
        Ok(self.train_on(&refs, shaping))
    }
}

/// Exploration rate `max(floor, decay^episode)`.
pub fn decayed_epsilon(decay: f64, floor: f64, episode: u64) -> f64 {
    decay.powi(episode.min(i32::MAX as u64) as i32).max(floor)
}
