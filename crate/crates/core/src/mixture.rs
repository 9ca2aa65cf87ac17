//! Contextual mixture of source dynamics models.
//!
//! A gating network maps a state to a point `a(s)` on the simplex over sources.
//! The predictive density of a transition is `sum_i L_i a_i(s)`, where `L_i` is the
//! likelihood under source `i`, and training minimizes the negative log of that
//! density. Its gradient with respect to the logits `z(s)` is `a(s) - p(s)`, with
//! `p_i ∝ L_i a_i` the Bayes posterior over sources.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Encoder, Experience, State};
use crate::nn::{AdamState, Head, Mlp};
use crate::sources::SourceLibrary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureNet {
    net: Mlp,
    encoder: Encoder,
    adam: AdamState,
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples skipped because no source assigned them positive likelihood.
    pub zero_evidence: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub prior: Vec<f64>,
    pub likelihoods: Vec<f64>,
    pub posterior: Vec<f64>,
}

impl PosteriorSample {
    pub fn from_prior(prior: Vec<f64>, likelihoods: Vec<f64>) -> Result<Self> {
        let posterior = bayes_posterior(&prior, &likelihoods)?;
        Ok(PosteriorSample {
            prior,
            likelihoods,
            posterior,
        })
    }
}

/// Summary of one [`MixtureNet::grad_step`] call.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    /// Mean NLL over usable samples before the first update.
    pub loss: f64,
    pub used: usize,
    pub skipped: usize,
}

pub fn predictive_density(gate: &[f64], likelihoods: &[f64]) -> f64 {
    assert_eq!(gate.len(), likelihoods.len(), "one likelihood per source");
    gate.iter().zip(likelihoods).map(|(a, l)| a * l).sum()
}

pub fn bayes_posterior(prior: &[f64], likelihoods: &[f64]) -> Result<Vec<f64>> {
    let evidence = predictive_density(prior, likelihoods);
    if evidence <= 0.0 {
        return Err(Error::ZeroEvidence);
    }
    Ok(prior
        .iter()
        .zip(likelihoods)
        .map(|(a, l)| a * l / evidence)
        .collect())
}

impl MixtureNet {
    pub fn new(net: Mlp, encoder: Encoder, lr: f64, epochs: usize, batch_size: usize) -> Self {
        assert_eq!(net.head(), Head::Softmax, "gating network needs a softmax head");
        assert_eq!(net.input_dim(), encoder.dim(), "gate input width");
        let adam = AdamState::for_net(&net, lr);
        MixtureNet {
            net,
            encoder,
            adam,
            epochs,
            batch_size,
            zero_evidence: 0,
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn encoder(&self) -> Encoder {
        self.encoder
    }

    pub fn num_sources(&self) -> usize {
        self.net.output_dim()
    }

    pub fn gate(&self, s: &State) -> Vec<f64> {
        self.net.forward(&self.encoder.encode(s)).expect("gate input width")
    }

    pub fn predictive_density(&self, sources: &SourceLibrary, t: &crate::mdp::Transition) -> f64 {
        predictive_density(&self.gate(&t.s), &sources.likelihoods(t))
    }

    pub fn bayes_posterior(
        &self,
        sources: &SourceLibrary,
        t: &crate::mdp::Transition,
    ) -> Result<PosteriorSample> {
        PosteriorSample::from_prior(self.gate(&t.s), sources.likelihoods(t))
    }

    /// `-sum log density` over samples with positive density.
    pub fn nll_loss(&self, batch: &[&Experience]) -> f64 {
        batch
            .iter()
            .map(|e| predictive_density(&self.gate(&e.transition.s), &e.likelihoods))
            .filter(|&d| d > 0.0)
            .map(|d| -d.ln())
            .sum()
    }

    /// The training objective: mean NLL over usable samples plus the L2 penalty.
    pub fn objective(&self, batch: &[&Experience]) -> f64 {
        let used = batch
            .iter()
            .filter(|e| e.likelihoods.iter().any(|&l| l > 0.0))
            .count();
        if used == 0 {
            return self.net.l2_penalty();
        }
        self.nll_loss(batch) / used as f64 + self.net.l2_penalty()
    }

    /// Gradient of [`MixtureNet::objective`], assembled from the per-sample logit
    /// coefficients `a - p`. Returns the gradient and the step statistics.
    pub fn gradient(&self, batch: &[&Experience]) -> (Vec<f64>, StepStats) {
        let mut grads = vec![0.0; self.net.num_params()];
        let mut stats = StepStats::default();
        let mut coeffs = Vec::with_capacity(batch.len());
        for e in batch {
            let cache = self
                .net
                .forward_cached(&self.encoder.encode(&e.transition.s))
                .expect("gate input width");
            match bayes_posterior(cache.output(), &e.likelihoods) {
                Ok(p) => {
                    stats.loss -= predictive_density(cache.output(), &e.likelihoods).ln();
                    let coeff: Vec<f64> =
                        cache.output().iter().zip(&p).map(|(a, p)| a - p).collect();
                    coeffs.push((cache, coeff));
                    stats.used += 1;
                }
                Err(_) => stats.skipped += 1,
            }
        }
        if stats.used > 0 {
            let m = stats.used as f64;
            stats.loss /= m;
            for (cache, coeff) in &coeffs {
                let scaled: Vec<f64> = coeff.iter().map(|c| c / m).collect();
                self.net.accumulate_logit_grad(cache, &scaled, &mut grads);
            }
        }
        self.net.add_l2_grad(&mut grads);
        (grads, stats)
    }

    /// `epochs` Adam steps on one minibatch. Zero-evidence samples are skipped and
    /// counted once per call.
    pub fn grad_step(&mut self, batch: &[&Experience]) -> StepStats {
        let mut first = None;
        for _ in 0..self.epochs.max(1) {
            let (grads, stats) = self.gradient(batch);
            if first.is_none() {
                self.zero_evidence += stats.skipped as u64;
                first = Some(stats);
            }
            if stats.used == 0 {
                break;
            }
            self.adam.step(&mut self.net, &grads);
        }
        first.unwrap_or_default()
    }

    /// Gate values at labelled states, for heatmap export.
    pub fn snapshot(&self, states: &[(String, State)]) -> Vec<(String, Vec<f64>)> {
        states
            .iter()
            .map(|(label, s)| (label.clone(), self.gate(s)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{stream_rng, Stream, Transition};
    use rand::Rng;

    fn exp(s: State, likelihoods: Vec<f64>) -> Experience {
        Experience {
            transition: Transition {
                s: s.clone(),
                a: 0,
                r: 0.0,
                s_next: s,
                terminal: false,
            },
            likelihoods,
            advice: Vec::new(),
            advice_next: Vec::new(),
        }
    }

    fn tabular_gate(n_states: usize, n_sources: usize) -> MixtureNet {
        MixtureNet::new(
            Mlp::zeros(&[n_states, n_sources], Head::Softmax, 0.0),
            Encoder::OneHot { n: n_states },
            0.05,
            1,
            32,
        )
    }

    #[test]
    fn untrained_gate_is_uniform() {
        let mix = MixtureNet::new(
            Mlp::zeros(&[4, 30, 30, 3], Head::Softmax, 0.0),
            Encoder::Identity { dim: 4 },
            1e-3,
            3,
            32,
        );
        let a = mix.gate(&State::Continuous(vec![0.3, -1.0, 0.1, 2.0]));
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn random_gates_are_on_simplex() {
        let mut rng = stream_rng(4, Stream::Init);
        let mix = MixtureNet::new(
            Mlp::new(&[4, 30, 30, 3], Head::Softmax, 0.0, &mut rng),
            Encoder::Identity { dim: 4 },
            1e-3,
            3,
            32,
        );
        for _ in 0..100 {
            let s: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = mix.gate(&State::Continuous(s));
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(a.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn density_examples() {
        assert!((predictive_density(&[0.5, 0.5], &[0.8, 0.2]) - 0.5).abs() < 1e-15);
        assert_eq!(predictive_density(&[0.0, 1.0, 0.0], &[0.3, 0.7, 0.1]), 0.7);
        assert!((predictive_density(&[0.2, 0.3, 0.5], &[0.4; 3]) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn posterior_examples() {
        let p = bayes_posterior(&[0.5, 0.5], &[0.8, 0.2]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15 && (p[1] - 0.2).abs() < 1e-15);
        let prior = [0.1, 0.6, 0.3];
        let p = bayes_posterior(&prior, &[0.25; 3]).unwrap();
        assert!(p.iter().zip(&prior).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(bayes_posterior(&[0.0, 1.0], &[0.9, 0.4]).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(bayes_posterior(&[0.5, 0.5], &[0.0, 0.0]), Err(Error::ZeroEvidence)));
    }

    #[test]
    fn nll_examples() {
        // zero net gives a uniform gate of (0.5, 0.5); density 0.5*0.5 + 0.5*0.25 = 0.375
        let mix = tabular_gate(2, 2);
        let e = exp(State::Discrete(0), vec![0.5, 0.25]);
        assert!((mix.nll_loss(&[&e]) - 0.980829253011726).abs() < 1e-12);
        let sure = exp(State::Discrete(1), vec![1.0, 1.0]);
        assert_eq!(mix.nll_loss(&[&sure, &sure]), 0.0);
    }

    #[test]
    fn logit_coefficients_are_prior_minus_posterior() {
        let mix = tabular_gate(1, 2);
        let e = exp(State::Discrete(0), vec![0.8, 0.2]);
        let (g, stats) = mix.gradient(&[&e]);
        assert_eq!(stats.used, 1);
        // a single linear layer on a one-hot input: the bias gradient is the coefficient
        assert!((g[2] + 0.3).abs() < 1e-15 && (g[3] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn flat_evidence_gives_l2_only_gradient() {
        let mut rng = stream_rng(9, Stream::Init);
        let mix = MixtureNet::new(
            Mlp::new(&[3, 5, 2], Head::Softmax, 1e-3, &mut rng),
            Encoder::Identity { dim: 3 },
            1e-3,
            1,
            4,
        );
        let e = exp(State::Continuous(vec![0.1, 0.2, -0.3]), vec![0.6, 0.6]);
        let (g, _) = mix.gradient(&[&e]);
        let mut l2 = vec![0.0; mix.net().num_params()];
        mix.net().add_l2_grad(&mut l2);
        assert!(g.iter().zip(&l2).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn zero_evidence_is_skipped_and_counted() {
        let mut mix = tabular_gate(2, 2);
        let before = mix.net().params().to_vec();
        let dead = exp(State::Discrete(0), vec![0.0, 0.0]);
        let stats = mix.grad_step(&[&dead, &dead]);
        assert_eq!((stats.used, stats.skipped), (0, 2));
        assert_eq!(mix.zero_evidence, 2);
        assert_eq!(mix.net().params(), &before[..]);
    }

    #[test]
    fn training_on_source_one_data_lowers_loss() {
        let mut mix = tabular_gate(3, 2);
        mix.epochs = 4;
        let data: Vec<Experience> = (0..3).map(|s| exp(State::Discrete(s), vec![1.0, 0.05])).collect();
        let batch: Vec<&Experience> = data.iter().collect();
        let start = mix.nll_loss(&batch);
        for _ in 0..50 {
            mix.grad_step(&batch);
        }
        assert!(mix.nll_loss(&batch) < start);
        assert!(mix.gate(&State::Discrete(1))[0] > 0.9);
    }

    proptest::proptest! {
        #[test]
        fn posterior_is_on_simplex(
            prior in proptest::collection::vec(0.01f64..1.0, 4),
            lik in proptest::collection::vec(0.0f64..1.0, 4),
        ) {
            let z: f64 = prior.iter().sum();
            let prior: Vec<f64> = prior.iter().map(|p| p / z).collect();
            proptest::prop_assume!(predictive_density(&prior, &lik) > 1e-9);
            let p = bayes_posterior(&prior, &lik).unwrap();
            proptest::prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            proptest::prop_assert!(p.iter().all(|&x| x >= 0.0));
        }
    }
}
