//! Core MDP data: states, transitions, the replay buffer and seeded RNG streams.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SimRng = ChaCha8Rng;

/// An environment state: a grid cell index or a real feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum State {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl State {
    pub fn cell(&self) -> Option<usize> {
        match self {
            State::Discrete(c) => Some(*c),
            State::Continuous(_) => None,
        }
    }

    pub fn features(&self) -> Option<&[f64]> {
        match self {
            State::Discrete(_) => None,
            State::Continuous(v) => Some(v),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            State::Discrete(_) => true,
            State::Continuous(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

/// Maps a [`State`] to the real input vector consumed by networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Encoder {
    /// One-hot over `n` cells.
    OneHot { n: usize },
    /// Concatenated one-hots of the column (width entries) and row (height entries).
    Grid { width: usize, height: usize },
    /// Continuous features passed through unchanged.
    Identity { dim: usize },
}

impl Encoder {
    pub fn dim(&self) -> usize {
        match *self {
            Encoder::OneHot { n } => n,
            Encoder::Grid { width, height } => width + height,
            Encoder::Identity { dim } => dim,
        }
    }

    pub fn encode(&self, s: &State) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.encode_into(s, &mut out);
        out
    }

    /// Writes the encoding into `out[..self.dim()]`, which must be zeroed by the caller
    /// for the one-hot variants.
    pub fn encode_into(&self, s: &State, out: &mut [f64]) {
        match (*self, s) {
            (Encoder::OneHot { n }, State::Discrete(c)) => {
                assert!(*c < n, "cell {c} out of range {n}");
                out[*c] = 1.0;
            }
            (Encoder::Grid { width, height }, State::Discrete(c)) => {
                assert!(*c < width * height, "cell {c} out of grid range");
                out[c % width] = 1.0;
                out[width + c / width] = 1.0;
            }
            (Encoder::Identity { dim }, State::Continuous(v)) => {
                assert_eq!(v.len(), dim, "state dimension mismatch");
                out[..dim].copy_from_slice(v);
            }
            (enc, s) => panic!("encoder {enc:?} cannot encode {s:?}"),
        }
    }
}

pub fn one_hot(index: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: State,
    pub a: usize,
    pub r: f64,
    pub s_next: State,
    pub terminal: bool,
}

/// Result of one environment step. `terminal` marks a true end of the task (goal,
/// failure) and stops bootstrapping; `truncated` marks the roll-out length cap.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub s_next: State,
    pub r: f64,
    pub terminal: bool,
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

/// A stored transition plus per-source information that is fixed once the
/// sources are frozen: likelihood of the transition under each source model and
/// the source policies' action distributions in `s` and `s_next`
/// (row-major `n_sources x n_actions`). Empty when no sources are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub transition: Transition,
    pub likelihoods: Vec<f64>,
    pub advice: Vec<f64>,
    pub advice_next: Vec<f64>,
}

impl From<Transition> for Experience {
    fn from(transition: Transition) -> Self {
        Experience {
            transition,
            likelihoods: Vec::new(),
            advice: Vec::new(),
            advice_next: Vec::new(),
        }
    }
}

/// Bounded FIFO replay memory with its own sampling RNG.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T = Transition> {
    capacity: usize,
    storage: VecDeque<T>,
    rng: SimRng,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            storage: VecDeque::with_capacity(capacity.min(1 << 16)),
            rng: SimRng::seed_from_u64(seed),
        }
    }

    pub fn with_rng(capacity: usize, rng: SimRng) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            storage: VecDeque::with_capacity(capacity.min(1 << 16)),
            rng,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
        }
        self.storage.push_back(item);
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.storage.iter()
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.storage.get(i)
    }

    /// Uniform draw with replacement using the buffer's own RNG.
    pub fn sample_batch(&mut self, n: usize) -> Result<Vec<&T>> {
        let idx = draw_indices(&mut self.rng, self.storage.len(), n)?;
        Ok(idx.into_iter().map(|i| &self.storage[i]).collect())
    }

    /// Uniform draw with replacement using an external RNG stream.
    pub fn sample_batch_with<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<&T>> {
        let idx = draw_indices(rng, self.storage.len(), n)?;
        Ok(idx.into_iter().map(|i| &self.storage[i]).collect())
    }
}

fn draw_indices<R: Rng + ?Sized>(rng: &mut R, len: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || len < n {
        return Err(Error::InsufficientSamples {
            available: len,
            requested: n,
        });
    }
    Ok((0..n).map(|_| rng.gen_range(0..len)).collect())
}

/// Independent sub-streams of one counter-based generator, so that each consumer
/// (environment, agent, mixture, ...) sees the same draws regardless of what the
/// others do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Env = 1,
    Agent = 2,
    Mixture = 3,
    Buffer = 4,
    Strategy = 5,
    Init = 6,
    Eval = 7,
}

pub fn trial_seed(seed_base: u64, trial_index: u64) -> u64 {
    seed_base.wrapping_mul(10007).wrapping_add(trial_index)
}

pub fn stream_rng(seed: u64, stream: Stream) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
