//! Frozen source tasks: control policies, estimated dynamics, and the on-disk
//! source bundle.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::mdp::{argmax, Encoder, Experience, State, Transition};
use crate::nn::{AdamState, Head, Mlp};

/// Lower bound applied to kernel likelihoods so that log-densities stay finite
/// under very sharp kernels.
pub const LIKELIHOOD_FLOOR: f64 = 1e-12;

pub const DEFAULT_KERNEL_PRECISION: f64 = 5e5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// Greedy action per cell.
    Tabular {
        actions: Vec<usize>,
        num_actions: usize,
    },
    /// Greedy action of a Q-network.
    Network { net: Mlp, encoder: Encoder },
    Uniform { num_actions: usize },
}

impl Policy {
    pub fn num_actions(&self) -> usize {
        match self {
            Policy::Tabular { num_actions, .. } => *num_actions,
            Policy::Network { net, .. } => net.output_dim(),
            Policy::Uniform { num_actions } => *num_actions,
        }
    }

    /// The recommended action for deterministic policies.
    pub fn action(&self, s: &State) -> Option<usize> {
        match self {
            Policy::Tabular { actions, .. } => Some(actions[s.cell().expect("tabular policy needs a cell")]),
            Policy::Network { net, encoder } => {
                let q = net.forward(&encoder.encode(s)).expect("policy input dimension");
                Some(argmax(&q))
            }
            Policy::Uniform { .. } => None,
        }
    }

    /// Writes `P(a = pi(s))` for every action into `out`.
    pub fn distribution_into(&self, s: &State, out: &mut [f64]) {
        match self.action(s) {
            Some(a) => {
                out.iter_mut().for_each(|p| *p = 0.0);
                out[a] = 1.0;
            }
            None => {
                let p = 1.0 / out.len() as f64;
                out.iter_mut().for_each(|x| *x = p);
            }
        }
    }
}

/// Lookup-table dynamics `s' = f(s, a)`, learned from observed transitions.
/// Pairs never observed fall back to the identity transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularDyn {
    num_cells: usize,
    num_actions: usize,
    next: Vec<Option<usize>>,
}

impl TabularDyn {
    pub fn new(num_cells: usize, num_actions: usize) -> Self {
        TabularDyn {
            num_cells,
            num_actions,
            next: vec![None; num_cells * num_actions],
        }
    }

    pub fn record(&mut self, s: usize, a: usize, s_next: usize) {
        self.next[s * self.num_actions + a] = Some(s_next);
    }

    /// Predicted next cell and whether the pair was observed.
    pub fn predict(&self, s: usize, a: usize) -> (usize, bool) {
        match self.next[s * self.num_actions + a] {
            Some(n) => (n, true),
            None => (s, false),
        }
    }

    pub fn visited_pairs(&self) -> usize {
        self.next.iter().filter(|n| n.is_some()).count()
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }
}

/// Neural dynamics regressor. The network sees `[encode(s), one_hot(a)]` and
/// outputs the state increment, so `f(s, a) = s + net(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpDyn {
    net: Mlp,
    encoder: Encoder,
    num_actions: usize,
    adam: AdamState,
}

impl MlpDyn {
    pub fn new(net: Mlp, encoder: Encoder, num_actions: usize, lr: f64) -> Self {
        assert_eq!(net.input_dim(), encoder.dim() + num_actions, "dynamics input width");
        assert_eq!(net.output_dim(), encoder.dim(), "dynamics output width");
        assert_eq!(net.head(), Head::Linear, "dynamics use a linear head");
        let adam = AdamState::for_net(&net, lr);
        MlpDyn {
            net,
            encoder,
            num_actions,
            adam,
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn input(&self, s: &State, a: usize) -> Vec<f64> {
        let d = self.encoder.dim();
        let mut x = vec![0.0; d + self.num_actions];
        self.encoder.encode_into(s, &mut x[..d]);
        x[d + a] = 1.0;
        x
    }

    pub fn predict(&self, s: &State, a: usize) -> Vec<f64> {
        let base = self.encoder.encode(s);
        let delta = self.net.forward(&self.input(s, a)).expect("dynamics input width");
        base.iter().zip(&delta).map(|(b, d)| b + d).collect()
    }

    pub fn squared_error(&self, t: &Transition) -> f64 {
        let target = self.encoder.encode(&t.s_next);
        self.predict(&t.s, t.a)
            .iter()
            .zip(&target)
            .map(|(p, y)| (y - p) * (y - p))
            .sum()
    }

    /// One Adam step on `(1/|B|) sum ||s' - f(s,a)||^2` (plus L2). Returns the
    /// loss before the step.
    pub fn train(&mut self, batch: &[&Transition]) -> f64 {
        assert!(!batch.is_empty(), "empty dynamics batch");
        let m = batch.len() as f64;
        let mut grads = vec![0.0; self.net.num_params()];
        let mut loss = 0.0;
        for t in batch {
            let base = self.encoder.encode(&t.s);
            let target = self.encoder.encode(&t.s_next);
            let cache = self.net.forward_cached(&self.input(&t.s, t.a)).expect("dynamics input width");
            let upstream: Vec<f64> = cache
                .output()
                .iter()
                .zip(base.iter().zip(&target))
                .map(|(d, (b, y))| {
                    let err = b + d - y;
                    loss += err * err;
                    2.0 * err / m
                })
                .collect();
            self.net.accumulate_output_grad(&cache, &upstream, &mut grads);
        }
        self.net.add_l2_grad(&mut grads);
        self.adam.step(&mut self.net, &grads);
        loss / m
    }

    pub fn mse(&self, data: &[&Transition]) -> f64 {
        data.iter().map(|t| self.squared_error(t)).sum::<f64>() / data.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dynamics {
    Tabular(TabularDyn),
    Mlp(MlpDyn),
}

pub fn train_dynamics(dynamics: &mut MlpDyn, batch: &[&Transition]) -> f64 {
    dynamics.train(batch)
}

/// Unnormalized Gaussian kernel `exp(-precision * err_sq)`.
pub fn gaussian_kernel(err_sq: f64, precision: f64) -> f64 {
    (-precision * err_sq).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTask {
    pub policy: Policy,
    pub dynamics: Dynamics,
    /// Kernel precision used for continuous dynamics.
    pub precision: f64,
}

impl SourceTask {
    /// `P(s'|s,a)` for tabular dynamics, or the kernel `exp(-nu ||s' - f(s,a)||^2)`.
    pub fn likelihood(&self, s: &State, a: usize, s_next: &State) -> f64 {
        match &self.dynamics {
            Dynamics::Tabular(table) => {
                let (pred, _) = table.predict(s.cell().expect("tabular dynamics need cells"), a);
                if Some(pred) == s_next.cell() {
                    1.0
                } else {
                    0.0
                }
            }
            Dynamics::Mlp(model) => {
                let err = model.squared_error(&Transition {
                    s: s.clone(),
                    a,
                    r: 0.0,
                    s_next: s_next.clone(),
                    terminal: false,
                });
                gaussian_kernel(err, self.precision)
            }
        }
    }

    pub fn policy_action_prob(&self, s: &State, a: usize) -> f64 {
        policy_action_prob(&self.policy, s, a)
    }
}

pub fn policy_action_prob(policy: &Policy, s: &State, a: usize) -> f64 {
    match policy.action(s) {
        Some(rec) => {
            if rec == a {
                1.0
            } else {
                0.0
            }
        }
        None => 1.0 / policy.num_actions() as f64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceLibrary {
    pub env: EnvId,
    pub num_actions: usize,
    pub tasks: Vec<SourceTask>,
}

const BUNDLE_FORMAT: &str = "ctxfer-sources";
const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    env: EnvId,
    num_actions: usize,
    sources: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    policy: String,
    dynamics: String,
    precision: f64,
}

impl SourceLibrary {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Per-source likelihood of `t`; kernel likelihoods are floored at
    /// [`LIKELIHOOD_FLOOR`].
    pub fn likelihoods(&self, t: &Transition) -> Vec<f64> {
        self.tasks
            .iter()
            .map(|src| {
                let l = src.likelihood(&t.s, t.a, &t.s_next);
                match src.dynamics {
                    Dynamics::Tabular(_) => l,
                    Dynamics::Mlp(_) => l.max(LIKELIHOOD_FLOOR),
                }
            })
            .collect()
    }

    /// `P(a = pi_i(s))` for every source `i` and action `a`, row-major by source.
    pub fn advice(&self, s: &State) -> Vec<f64> {
        let k = self.num_actions;
        let mut out = vec![0.0; self.tasks.len() * k];
        for (i, src) in self.tasks.iter().enumerate() {
            src.policy.distribution_into(s, &mut out[i * k..(i + 1) * k]);
        }
        out
    }

    /// Attaches likelihoods and advice to a transition. `advice` may be passed
    /// in when already computed for `t.s`.
    pub fn annotate(&self, t: Transition, advice: Option<Vec<f64>>) -> Experience {
        let likelihoods = self.likelihoods(&t);
        let advice = advice.unwrap_or_else(|| self.advice(&t.s));
        let advice_next = self.advice(&t.s_next);
        Experience {
            transition: t,
            likelihoods,
            advice,
            advice_next,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.tasks.len());
        for (i, task) in self.tasks.iter().enumerate() {
            let policy = format!("source_{i}_policy.json");
            let dynamics = format!("source_{i}_dynamics.json");
            write_json(&dir.join(&policy), &task.policy)?;
            write_json(&dir.join(&dynamics), &task.dynamics)?;
            entries.push(ManifestEntry {
                policy,
                dynamics,
                precision: task.precision,
            });
        }
        let manifest = Manifest {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            env: self.env,
            num_actions: self.num_actions,
            sources: entries,
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.is_file() {
            return Err(Error::SourcesNotFound(format!(
                "no manifest.json in {}",
                dir.display()
            )));
        }
        let manifest: Manifest = read_json(&manifest_path)?;
        if manifest.format != BUNDLE_FORMAT || manifest.version != BUNDLE_VERSION {
            return Err(Error::SourcesNotFound(format!(
                "unsupported bundle {} v{}",
                manifest.format, manifest.version
            )));
        }
        let mut tasks = Vec::with_capacity(manifest.sources.len());
        for entry in &manifest.sources {
            if entry.precision <= 0.0 {
                return Err(Error::BadConfig("kernel precision must be positive".into()));
            }
            tasks.push(SourceTask {
                policy: read_json(&dir.join(&entry.policy))?,
                dynamics: read_json(&dir.join(&entry.dynamics))?,
                precision: entry.precision,
            });
        }
        Ok(SourceLibrary {
            env: manifest.env,
            num_actions: manifest.num_actions,
            tasks,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{stream_rng, Stream};

    fn cont(v: &[f64]) -> State {
        State::Continuous(v.to_vec())
    }

    fn zero_dyn() -> MlpDyn {
        MlpDyn::new(
            Mlp::zeros(&[8, 5, 4], Head::Linear, 0.0),
            Encoder::Identity { dim: 4 },
            4,
            1e-3,
        )
    }

    fn mlp_source(precision: f64) -> SourceTask {
        SourceTask {
            policy: Policy::Uniform { num_actions: 4 },
            dynamics: Dynamics::Mlp(zero_dyn()),
            precision,
        }
    }

    #[test]
    fn kernel_likelihood_values() {
        // a zero network predicts s' = s
        let src = mlp_source(1.0);
        let s = cont(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(src.likelihood(&s, 1, &s), 1.0);
        let off = cont(&[1.1, 0.2, 0.3, 0.4]);
        assert!((src.likelihood(&s, 1, &off) - (-1f64).exp()).abs() < 1e-12);
        assert!((src.likelihood(&s, 1, &off) - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn kernel_floor_applies_in_library() {
        let lib = SourceLibrary {
            env: EnvId::Cartpole,
            num_actions: 4,
            tasks: vec![mlp_source(DEFAULT_KERNEL_PRECISION)],
        };
        let t = Transition {
            s: cont(&[0.0; 4]),
            a: 0,
            r: 1.0,
            s_next: cont(&[0.5, 0.0, 0.0, 0.0]),
            terminal: false,
        };
        assert_eq!(lib.likelihoods(&t), vec![LIKELIHOOD_FLOOR]);
    }

    #[test]
    fn tabular_likelihood_is_indicator() {
        let mut table = TabularDyn::new(4, 2);
        table.record(0, 1, 2);
        let src = SourceTask {
            policy: Policy::Tabular {
                actions: vec![1, 0, 0, 0],
                num_actions: 2,
            },
            dynamics: Dynamics::Tabular(table),
            precision: 1.0,
        };
        let (s0, s2) = (State::Discrete(0), State::Discrete(2));
        assert_eq!(src.likelihood(&s0, 1, &s2), 1.0);
        assert_eq!(src.likelihood(&s0, 1, &s0), 0.0);
        // unvisited pair: identity fallback
        assert_eq!(src.likelihood(&s0, 0, &s0), 1.0);
        assert_eq!(src.likelihood(&s2, 1, &s2), 1.0);
    }

    #[test]
    fn policy_probabilities() {
        let det = Policy::Tabular {
            actions: vec![2, 3],
            num_actions: 4,
        };
        let s = State::Discrete(0);
        assert_eq!(policy_action_prob(&det, &s, 2), 1.0);
        assert_eq!(policy_action_prob(&det, &s, 1), 0.0);
        let uni = Policy::Uniform { num_actions: 4 };
        assert_eq!(policy_action_prob(&uni, &s, 3), 0.25);
    }

    #[test]
    fn perfect_predictor_has_zero_loss_and_no_update() {
        let mut model = zero_dyn();
        let s = cont(&[0.3, -0.1, 0.05, 0.2]);
        let t = Transition {
            s: s.clone(),
            a: 2,
            r: 1.0,
            s_next: s,
            terminal: false,
        };
        let before = model.net().params().to_vec();
        assert_eq!(train_dynamics(&mut model, &[&t]), 0.0);
        assert_eq!(model.net().params(), &before[..]);
    }

    #[test]
    fn unit_offset_gives_unit_loss() {
        let mut model = zero_dyn();
        let t = Transition {
            s: cont(&[1.0, 0.0, 0.0, 0.0]),
            a: 0,
            r: 1.0,
            s_next: cont(&[0.0, 0.0, 0.0, 0.0]),
            terminal: false,
        };
        assert!((train_dynamics(&mut model, &[&t]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn overfits_fixed_dataset() {
        let mut rng = stream_rng(8, Stream::Init);
        let net = Mlp::new(&[8, 50, 50, 4], Head::Linear, 1e-6, &mut rng);
        let mut model = MlpDyn::new(net, Encoder::Identity { dim: 4 }, 4, 1e-3);
        let spec = crate::envs::CartPoleSpec::constant(5.0);
        let data: Vec<Transition> = (0..32)
            .map(|i| {
                let s = [0.05 * (i % 7) as f64 - 0.15, 0.1, 0.02 * (i % 5) as f64 - 0.04, -0.1];
                let a = i % 4;
                let n = crate::envs::cartpole::cartpole_dynamics(&spec, &s, a).unwrap();
                Transition {
                    s: cont(&s),
                    a,
                    r: 1.0,
                    s_next: cont(&n),
                    terminal: false,
                }
            })
            .collect();
        let batch: Vec<&Transition> = data.iter().collect();
        let first = model.train(&batch);
        let mut windows = Vec::new();
        let mut acc = 0.0;
        for k in 1..=3000 {
            acc += model.train(&batch);
            if k % 500 == 0 {
                windows.push(acc / 500.0);
                acc = 0.0;
            }
        }
        assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
        assert!(model.mse(&batch) < 1e-3 && model.mse(&batch) < first);
    }

    #[test]
    fn bundle_round_trip_and_missing() {
        let mut table = TabularDyn::new(3, 4);
        table.record(1, 2, 2);
        let lib = SourceLibrary {
            env: EnvId::TwoRoom,
            num_actions: 4,
            tasks: vec![
                SourceTask {
                    policy: Policy::Tabular {
                        actions: vec![0, 1, 2],
                        num_actions: 4,
                    },
                    dynamics: Dynamics::Tabular(table),
                    precision: 5e5,
                },
                mlp_source(2.0),
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        lib.save(dir.path()).unwrap();
        assert_eq!(SourceLibrary::load(dir.path()).unwrap(), lib);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            SourceLibrary::load(empty.path()),
            Err(Error::SourcesNotFound(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn kernel_decreases_with_error(e1 in 0.0f64..3.0, gap in 1e-3f64..3.0, nu in 0.1f64..5.0) {
            let e2 = e1 + gap;
            proptest::prop_assert!(gaussian_kernel(e2 * e2, nu) < gaussian_kernel(e1 * e1, nu));
            proptest::prop_assert!(gaussian_kernel(e1 * e1, nu) <= gaussian_kernel(0.0, nu));
        }
    }
}
