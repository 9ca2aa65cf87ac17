//! Minimal dense feed-forward networks: forward pass with cache, exact backprop,
//! L2 penalty and Adam.
//!
//! Parameters live in one flat vector. For each layer `k` (input `n_in`, output
//! `n_out`) the vector holds the weight block followed by the bias block:
//!
//! ```text
//! [ w_k[0][0..n_out], w_k[1][0..n_out], ..., w_k[n_in-1][0..n_out], b_k[0..n_out] ]
//! ```
//!
//! i.e. weights are input-major: `w[i * n_out + j]` connects input `i` to unit `j`.
//! Layers follow in order from input to output. The JSON save format stores this
//! flat vector verbatim together with the layer sizes and head.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    Softmax,
    /// Per-dimension `tanh` squashing.
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    head: Head,
    l2: f64,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_cached`]. `acts[0]` is the input,
/// `acts[k]` the post-ReLU output of hidden layer `k`, and the last entry holds
/// the pre-head logits.
#[derive(Debug, Clone)]
pub struct Cache {
    acts: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("cache has layers")
    }
}

fn num_params_for(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], head: Head, l2: f64, rng: &mut R) -> Self {
        let mut net = Mlp::zeros(sizes, head, l2);
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            for p in &mut net.params[offset..offset + n_in * n_out] {
                *p = rng.gen_range(-limit..limit);
            }
            offset += n_in * n_out + n_out;
        }
        net
    }

    pub fn zeros(sizes: &[usize], head: Head, l2: f64) -> Self {
        assert!(sizes.len() >= 2, "network needs input and output sizes");
        assert!(sizes.iter().all(|&n| n > 0), "layer sizes must be positive");
        assert!(
            head != Head::Softmax || sizes[sizes.len() - 1] >= 1,
            "softmax head needs outputs"
        );
        Mlp {
            sizes: sizes.to_vec(),
            head,
            l2,
            params: vec![0.0; num_params_for(sizes)],
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut offset = 0;
        let n_layers = self.sizes.len() - 1;
        for k in 0..n_layers {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            let mut next = vec![0.0; n_out];
            affine(&self.params[offset..], n_in, n_out, &cur, &mut next);
            if k + 1 < n_layers {
                relu(&mut next);
            }
            offset += n_in * n_out + n_out;
            cur = next;
        }
        apply_head(self.head, &mut cur);
        Ok(cur)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<Cache> {
        self.check_input(x)?;
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        let mut offset = 0;
        for k in 0..n_layers {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            let mut next = vec![0.0; n_out];
            affine(&self.params[offset..], n_in, n_out, &acts[k], &mut next);
            if k + 1 < n_layers {
                relu(&mut next);
            }
            offset += n_in * n_out + n_out;
            acts.push(next);
        }
        let mut output = acts[n_layers].clone();
        apply_head(self.head, &mut output);
        Ok(Cache { acts, output })
    }

    /// Maps a gradient with respect to the head output onto the logits.
    pub fn head_backward(&self, cache: &Cache, upstream: &[f64]) -> Vec<f64> {
        let y = &cache.output;
        match self.head {
            Head::Linear => upstream.to_vec(),
            Head::Softmax => {
                let dot: f64 = y.iter().zip(upstream).map(|(a, u)| a * u).sum();
                y.iter().zip(upstream).map(|(a, u)| a * (u - dot)).collect()
            }
            Head::Tanh => y
                .iter()
                .zip(upstream)
                .map(|(t, u)| u * (1.0 - t * t))
                .collect(),
        }
    }

    /// Adds the data gradient for one cached sample, given the gradient with
    /// respect to the logits, into `grads`. No L2 term.
    pub fn accumulate_logit_grad(&self, cache: &Cache, grad_logits: &[f64], grads: &mut [f64]) {
        debug_assert_eq!(grads.len(), self.params.len());
        let n_layers = self.sizes.len() - 1;
        let mut delta = grad_logits.to_vec();
        let mut offset = self.params.len();
        for k in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            offset -= n_in * n_out + n_out;
            let input = &cache.acts[k];
            let g = &mut grads[offset..offset + n_in * n_out + n_out];
            let (gw, gb) = g.split_at_mut(n_in * n_out);
            for (b, d) in gb.iter_mut().zip(&delta) {
                *b += d;
            }
            for (i, &xi) in input.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (w, d) in gw[i * n_out..(i + 1) * n_out].iter_mut().zip(&delta) {
                    *w += xi * d;
                }
            }
            if k > 0 {
                let w = &self.params[offset..offset + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for (i, p) in prev.iter_mut().enumerate() {
                    // ReLU derivative: the cached activation is zero iff the unit is off.
                    if input[i] > 0.0 {
                        *p = w[i * n_out..(i + 1) * n_out]
                            .iter()
                            .zip(&delta)
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                }
                delta = prev;
            }
        }
    }

    pub fn accumulate_output_grad(&self, cache: &Cache, upstream: &[f64], grads: &mut [f64]) {
        let gl = self.head_backward(cache, upstream);
        self.accumulate_logit_grad(cache, &gl, grads);
    }

    /// Full parameter gradient for one sample: backprop of `upstream` (gradient with
    /// respect to the head output) plus the L2 term.
    pub fn backward(&self, cache: &Cache, upstream: &[f64]) -> Vec<f64> {
        let mut grads = vec![0.0; self.params.len()];
        self.accumulate_output_grad(cache, upstream, &mut grads);
        self.add_l2_grad(&mut grads);
        grads
    }

    /// Penalty `l2 * sum(w^2)` over weights (biases are not penalized).
    pub fn l2_penalty(&self) -> f64 {
        if self.l2 == 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        self.for_each_weight_range(|lo, hi| {
            total += self.params[lo..hi].iter().map(|w| w * w).sum::<f64>();
        });
        self.l2 * total
    }

    pub fn add_l2_grad(&self, grads: &mut [f64]) {
        if self.l2 == 0.0 {
            return;
        }
        let coeff = 2.0 * self.l2;
        self.for_each_weight_range(|lo, hi| {
            for (g, w) in grads[lo..hi].iter_mut().zip(&self.params[lo..hi]) {
                *g += coeff * w;
            }
        });
    }

    fn for_each_weight_range(&self, mut f: impl FnMut(usize, usize)) {
        let mut offset = 0;
        for w in self.sizes.windows(2) {
            f(offset, offset + w[0] * w[1]);
            offset += w[0] * w[1] + w[1];
        }
    }

    pub fn copy_params_from(&mut self, other: &Mlp) {
        assert_eq!(self.sizes, other.sizes, "layer sizes differ");
        self.params.copy_from_slice(&other.params);
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let net: Mlp = serde_json::from_str(&text)?;
        if net.params.len() != num_params_for(&net.sizes) {
            return Err(Error::DimensionMismatch {
                expected: num_params_for(&net.sizes),
                got: net.params.len(),
            });
        }
        Ok(net)
    }
}

fn affine(layer: &[f64], n_in: usize, n_out: usize, x: &[f64], out: &mut [f64]) {
    let (w, rest) = layer.split_at(n_in * n_out);
    out.copy_from_slice(&rest[..n_out]);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, wij) in out.iter_mut().zip(&w[i * n_out..(i + 1) * n_out]) {
            *o += wij * xi;
        }
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn apply_head(head: Head, v: &mut [f64]) {
    match head {
        Head::Linear => {}
        Head::Softmax => softmax_in_place(v),
        Head::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn for_net(net: &Mlp, lr: f64) -> Self {
        AdamState::new(net.num_params(), lr)
    }

    /// One bias-corrected Adam update of `net` along `grad`.
    pub fn step(&mut self, net: &mut Mlp, grad: &[f64]) {
        assert_eq!(grad.len(), self.m.len(), "gradient shape mismatch");
        assert_eq!(net.params.len(), self.m.len(), "parameter shape mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in net
            .params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
