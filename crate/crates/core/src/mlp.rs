//! Fully connected network with ReLU hidden layers and a linear output layer.
//!
//! Parameters live in one flat vector, layer by layer, each layer stored as a
//! row-major `out × in` weight matrix followed by its `out` biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::{gemv_acc, log_softmax, softmax};
use crate::rng::StreamRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Per-layer activations kept for the backward pass.
pub struct Trace {
    /// `acts[0]` is the input, `acts[l]` the post-ReLU output of layer `l`,
    /// the last entry the raw output logits.
    pub acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace always holds the input")
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// Uniform(±1/√fan_in) weights and biases.
    pub fn init(sizes: &[usize], rng: &mut StreamRng) -> Self {
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[1] * w[0] + w[1]) {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Self {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn is_consistent(&self) -> bool {
        self.sizes.len() >= 2 && self.params.len() == param_count(&self.sizes)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        debug_assert_eq!(x.len(), self.input_dim());
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let wm = &self.params[off..off + fan_out * fan_in];
            let b = &self.params[off + fan_out * fan_in..off + fan_out * fan_in + fan_out];
            off += fan_out * fan_in + fan_out;
            let mut y = b.to_vec();
            gemv_acc(wm, &acts[l], &mut y);
            if l + 1 < n_layers {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(y);
        }
        Trace { acts }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_trace(x).acts.pop().unwrap()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.forward(x))
    }

    /// Back-propagates `d_out` (gradient w.r.t. the output logits), adding
    /// parameter gradients into `grads` and returning the input gradient.
    pub fn backward(&self, trace: &Trace, d_out: &[f64], grads: Option<&mut [f64]>) -> Vec<f64> {
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[1] * w[0] + w[1];
        }
        let mut grads = grads;
        let mut delta = d_out.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &trace.acts[l];
            if let Some(g) = grads.as_deref_mut() {
                for o in 0..fan_out {
                    let d = delta[o];
                    if d != 0.0 {
                        let row = &mut g[off + o * fan_in..off + (o + 1) * fan_in];
                        for (gi, xi) in row.iter_mut().zip(input) {
                            *gi += d * xi;
                        }
                    }
                    g[off + fan_out * fan_in + o] += d;
                }
            }
            let wm = &self.params[off..off + fan_out * fan_in];
            let mut d_in = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d != 0.0 {
                    for (di, w) in d_in.iter_mut().zip(&wm[o * fan_in..(o + 1) * fan_in]) {
                        *di += d * w;
                    }
                }
            }
            if l > 0 {
                for (di, a) in d_in.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *di = 0.0;
                    }
                }
            }
            delta = d_in;
        }
        delta
    }

    /// Mean softmax cross-entropy over `batch` and its parameter gradient.
    pub fn loss_and_grad(&self, batch: &[(&[f64], usize)]) -> (f64, Vec<f64>) {
        let mut grads = vec![0.0; self.params.len()];
        let mut total = 0.0;
        let scale = 1.0 / batch.len().max(1) as f64;
        for (x, y) in batch {
            let trace = self.forward_trace(x);
            let ls = log_softmax(trace.output());
            total -= ls[*y];
            let mut d: Vec<f64> = ls.iter().map(|l| l.exp() * scale).collect();
            d[*y] -= scale;
            self.backward(&trace, &d, Some(&mut grads));
        }
        (total * scale, grads)
    }

    pub fn loss(&self, batch: &[(&[f64], usize)]) -> f64 {
        let total: f64 = batch.iter().map(|(x, y)| -log_softmax(&self.forward(x))[*y]).sum();
        total / batch.len().max(1) as f64
    }
}
