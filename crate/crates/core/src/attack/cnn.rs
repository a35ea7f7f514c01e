//! Single-channel 1-D CNN: two "same"-padded convolutions with ReLU,
//! adaptive max pooling and a linear layer to two logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::log_softmax;
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnShape {
    pub channels1: usize,
    pub channels2: usize,
    pub kernel: usize,
    pub pooled: usize,
}

impl Default for CnnShape {
    fn default() -> Self {
        Self {
            channels1: 16,
            channels2: 32,
            kernel: 3,
            pooled: 4,
        }
    }
}

impl CnnShape {
    fn sizes(&self) -> [usize; 6] {
        let (c1, c2, k, p) = (self.channels1, self.channels2, self.kernel, self.pooled);
        [c1 * k, c1, c2 * c1 * k, c2, 2 * c2 * p, 2]
    }

    pub fn param_count(&self) -> usize {
        self.sizes().iter().sum()
    }

    fn offsets(&self) -> [usize; 6] {
        let s = self.sizes();
        let mut o = [0; 6];
        for i in 1..6 {
            o[i] = o[i - 1] + s[i - 1];
        }
        o
    }
}

/// Window `[start, end)` of adaptive pooling bin `i` of `bins` over `len` positions.
pub fn pool_window(i: usize, bins: usize, len: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end.max(start + 1))
}

/// Adaptive max pooling of one channel; returns values and arg-max positions.
pub fn adaptive_max_pool(x: &[f64], bins: usize) -> (Vec<f64>, Vec<usize>) {
    (0..bins)
        .map(|i| {
            let (s, e) = pool_window(i, bins, x.len());
            let mut best = s;
            for j in s + 1..e {
                if x[j] > x[best] {
                    best = j;
                }
            }
            (x[best], best)
        })
        .unzip()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cnn {
    pub shape: CnnShape,
    pub params: Vec<f64>,
}

pub struct CnnTrace {
    pub input: Vec<f64>,
    /// Pre-activation of conv1, `c1 × W`.
    pub pre1: Vec<f64>,
    /// Pre-activation of conv2, `c2 × W`.
    pub pre2: Vec<f64>,
    pub pooled: Vec<f64>,
    pub pool_idx: Vec<usize>,
    pub logits: Vec<f64>,
}

impl CnnTrace {
    /// Distance of the nearest ReLU input to zero, or of the nearest runner-up
    /// to the maximum inside a pooling window.
    pub fn kink_margin(&self, shape: &CnnShape) -> f64 {
        let mut m = f64::INFINITY;
        for v in self.pre1.iter().chain(&self.pre2) {
            m = m.min(v.abs());
        }
        let w = self.input.len();
        for c in 0..shape.channels2 {
            let row: Vec<f64> = self.pre2[c * w..(c + 1) * w].iter().map(|v| v.max(0.0)).collect();
            for i in 0..shape.pooled {
                let (s, e) = pool_window(i, shape.pooled, w);
                let best = self.pool_idx[c * shape.pooled + i];
                if row[best] <= 0.0 {
                    continue;
                }
                for j in s..e {
                    if j != best {
                        m = m.min(row[best] - row[j]);
                    }
                }
            }
        }
        m
    }

    /// ReLU on/off pattern plus pooling winners; equal patterns mean no kink was crossed.
    pub fn pattern(&self) -> (Vec<bool>, Vec<usize>) {
        (
            self.pre1.iter().chain(&self.pre2).map(|v| *v > 0.0).collect(),
            self.pool_idx.clone(),
        )
    }
}

fn conv_same(input: &[f64], in_ch: usize, w: usize, weights: &[f64], bias: &[f64], k: usize) -> Vec<f64> {
    let out_ch = bias.len();
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; out_ch * w];
    for o in 0..out_ch {
        let row = &mut out[o * w..(o + 1) * w];
        row.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..in_ch {
            let x = &input[c * w..(c + 1) * w];
            let kw = &weights[(o * in_ch + c) * k..(o * in_ch + c + 1) * k];
            for (t, &wt) in kw.iter().enumerate() {
                for (p, r) in row.iter_mut().enumerate() {
                    let q = p + t;
                    if q >= pad && q - pad < w {
                        *r += wt * x[q - pad];
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a same-padded convolution given `d_out`; accumulates into
/// `gw`/`gb` and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv_same_backward(
    input: &[f64],
    in_ch: usize,
    w: usize,
    weights: &[f64],
    k: usize,
    d_out: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let out_ch = gb.len();
    let pad = (k - 1) / 2;
    let mut d_in = vec![0.0; in_ch * w];
    for o in 0..out_ch {
        let d = &d_out[o * w..(o + 1) * w];
        gb[o] += d.iter().sum::<f64>();
        for c in 0..in_ch {
            let x = &input[c * w..(c + 1) * w];
            let base = (o * in_ch + c) * k;
            for t in 0..k {
                let wt = weights[base + t];
                let mut acc = 0.0;
                for (p, &dp) in d.iter().enumerate() {
                    let q = p + t;
                    if q >= pad && q - pad < w {
                        acc += dp * x[q - pad];
                        d_in[c * w + q - pad] += dp * wt;
                    }
                }
                gw[base + t] += acc;
            }
        }
    }
    d_in
}

impl Cnn {
    pub fn init(shape: CnnShape, rng: &mut StreamRng) -> Self {
        let s = shape.sizes();
        let fan_in = [
            shape.kernel,
            shape.kernel,
            shape.channels1 * shape.kernel,
            shape.channels1 * shape.kernel,
            shape.channels2 * shape.pooled,
            shape.channels2 * shape.pooled,
        ];
        let mut params = Vec::with_capacity(shape.param_count());
        for (n, f) in s.iter().zip(fan_in) {
            let b = 1.0 / (f as f64).sqrt();
            params.extend((0..*n).map(|_| rng.random_range(-b..b)));
        }
        Self { shape, params }
    }

    pub fn zeros(shape: CnnShape) -> Self {
        Self {
            shape,
            params: vec![0.0; shape.param_count()],
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.params.len() == self.shape.param_count()
    }

    pub fn forward_trace(&self, x: &[f64]) -> CnnTrace {
        let sh = &self.shape;
        let o = sh.offsets();
        let s = sh.sizes();
        let p = &self.params;
        let w = x.len();
        let pre1 = conv_same(x, 1, w, &p[o[0]..o[0] + s[0]], &p[o[1]..o[1] + s[1]], sh.kernel);
        let h1: Vec<f64> = pre1.iter().map(|v| v.max(0.0)).collect();
        let pre2 = conv_same(
            &h1,
            sh.channels1,
            w,
            &p[o[2]..o[2] + s[2]],
            &p[o[3]..o[3] + s[3]],
            sh.kernel,
        );
        let mut pooled = Vec::with_capacity(sh.channels2 * sh.pooled);
        let mut pool_idx = Vec::with_capacity(sh.channels2 * sh.pooled);
        for c in 0..sh.channels2 {
            let row: Vec<f64> = pre2[c * w..(c + 1) * w].iter().map(|v| v.max(0.0)).collect();
            let (v, i) = adaptive_max_pool(&row, sh.pooled);
            pooled.extend(v);
            pool_idx.extend(i);
        }
        let fc = &p[o[4]..o[4] + s[4]];
        let fb = &p[o[5]..o[5] + s[5]];
        let n = pooled.len();
        let logits = (0..2)
            .map(|j| {
                fb[j]
                    + fc[j * n..(j + 1) * n]
                        .iter()
                        .zip(&pooled)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        CnnTrace {
            input: x.to_vec(),
            pre1,
            pre2,
            pooled,
            pool_idx,
            logits,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_trace(x).logits
    }

    /// Accumulates parameter gradients for `d_logits` into `grads`.
    pub fn backward(&self, tr: &CnnTrace, d_logits: &[f64], grads: &mut [f64]) {
        let sh = &self.shape;
        let o = sh.offsets();
        let s = sh.sizes();
        let p = &self.params;
        let w = tr.input.len();
        let n = tr.pooled.len();
        let fc = &p[o[4]..o[4] + s[4]];
        let mut d_pooled = vec![0.0; n];
        for j in 0..2 {
            let d = d_logits[j];
            grads[o[5] + j] += d;
            for i in 0..n {
                grads[o[4] + j * n + i] += d * tr.pooled[i];
                d_pooled[i] += d * fc[j * n + i];
            }
        }
        let mut d_pre2 = vec![0.0; sh.channels2 * w];
        for c in 0..sh.channels2 {
            for b in 0..sh.pooled {
                let pos = tr.pool_idx[c * sh.pooled + b];
                if tr.pre2[c * w + pos] > 0.0 {
                    d_pre2[c * w + pos] += d_pooled[c * sh.pooled + b];
                }
            }
        }
        let h1: Vec<f64> = tr.pre1.iter().map(|v| v.max(0.0)).collect();
        let (g_lo, g_hi) = grads.split_at_mut(o[3]);
        let mut d_h1 = conv_same_backward(
            &h1,
            sh.channels1,
            w,
            &p[o[2]..o[2] + s[2]],
            sh.kernel,
            &d_pre2,
            &mut g_lo[o[2]..o[2] + s[2]],
            &mut g_hi[..s[3]],
        );
        for (d, pre) in d_h1.iter_mut().zip(&tr.pre1) {
            if *pre <= 0.0 {
                *d = 0.0;
            }
        }
        let (g_lo, g_hi) = grads.split_at_mut(o[1]);
        conv_same_backward(
            &tr.input,
            1,
            w,
            &p[o[0]..o[0] + s[0]],
            sh.kernel,
            &d_h1,
            &mut g_lo[o[0]..o[0] + s[0]],
            &mut g_hi[..s[1]],
        );
    }

    pub fn loss_and_grad(&self, batch: &[(&[f64], usize)]) -> (f64, Vec<f64>) {
        let mut grads = vec![0.0; self.params.len()];
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut total = 0.0;
        for (x, y) in batch {
            let tr = self.forward_trace(x);
            let ls = log_softmax(&tr.logits);
            total -= ls[*y];
            let mut d: Vec<f64> = ls.iter().map(|l| l.exp() * scale).collect();
            d[*y] -= scale;
            self.backward(&tr, &d, &mut grads);
        }
        (total * scale, grads)
    }

    pub fn loss(&self, batch: &[(&[f64], usize)]) -> f64 {
        let total: f64 = batch.iter().map(|(x, y)| -log_softmax(&self.forward(x))[*y]).sum();
        total / batch.len().max(1) as f64
    }
}
