//! Desk-scale surrogate vulnerability-prediction classifier.
//!
//! Tokens are hashed into a fixed number of buckets, looked up in an embedding
//! table, mean-pooled, passed through one affine+ReLU layer (the *embedding*
//! exposed to gray-box attackers) and mapped to `K = 2` logits by a linear head.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::corpus::{write_file, CodeSample};
use crate::eval::{self, ClassificationMetrics, ConfusionCounts};
use crate::math::{argmax, log_softmax, softmax};
use crate::rng;
use crate::{Error, Result};

/// Number of output classes.
pub const K: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VpHyperparams {
    pub vocab_hash_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs; `None` disables early stopping.
    #[serde(with = "patience")]
    pub early_stop_patience: Option<usize>,
    pub l1_weight: f64,
    pub l2_weight: f64,
    pub seed: u64,
    /// Seed of the parameter initialisation; `None` uses `seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
}

impl Default for VpHyperparams {
    fn default() -> Self {
        Self {
            vocab_hash_size: 4096,
            embed_dim: 16,
            hidden_dim: 32,
            learning_rate: 0.001,
            batch_size: 64,
            max_epochs: 100,
            early_stop_patience: Some(10),
            l1_weight: 0.0,
            l2_weight: 0.0,
            seed: 0,
            init_seed: None,
        }
    }
}

impl VpHyperparams {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_hash_size", self.vocab_hash_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("early_stop_patience", self.early_stop_patience.unwrap_or(1)),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be finite and positive".into()));
        }
        for (name, v) in [("l1_weight", self.l1_weight), ("l2_weight", self.l2_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

mod patience {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(n) => s.serialize_u64(*n as u64),
            None => s.serialize_str("off"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        N(u64),
        S(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Some(n as usize)),
            Raw::S(s) if s == "off" => Ok(None),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "early_stop_patience must be an integer or \"off\", got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

/// Per-sample outputs of a VP model: the raw material of every attack feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOutputRecord {
    pub sample_id: String,
    pub logits: Vec<f64>,
    pub confidence: f64,
    pub loss: f64,
    pub embedding: Vec<f64>,
    pub true_label: u8,
    /// 1 = member, 0 = non-member; unset straight out of [`VpModel::forward`].
    pub membership: Option<u8>,
}

impl ModelOutputRecord {
    pub fn predicted_label(&self) -> u8 {
        argmax(&self.logits) as u8
    }
}

/// Fixed multiplicative (FNV-1a) token hash.
pub fn token_bucket(token: &str, buckets: usize) -> usize {
    (rng::fnv1a(token.as_bytes()) % buckets as u64) as usize
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    len: usize,
}

impl Layout {
    fn new(hp: &VpHyperparams) -> Self {
        let emb = 0;
        let w1 = emb + hp.vocab_hash_size * hp.embed_dim;
        let b1 = w1 + hp.hidden_dim * hp.embed_dim;
        let w2 = b1 + hp.hidden_dim;
        let b2 = w2 + K * hp.hidden_dim;
        Self {
            emb,
            w1,
            b1,
            w2,
            b2,
            len: b2 + K,
        }
    }
}

/// Intermediate activations kept for the backward pass.
struct Trace {
    pooled: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VpModel {
    pub hyperparams: VpHyperparams,
    params: Vec<f64>,
    pub log: Vec<EpochLog>,
}

impl VpModel {
    /// Freshly initialised model: symmetric uniform weights scaled by fan-in,
    /// zero head bias, all drawn from the seeded stream.
    pub fn init(hp: &VpHyperparams) -> Result<Self> {
        hp.validate()?;
        let lay = Layout::new(hp);
        let mut rng = rng::stream(hp.init_seed.unwrap_or(hp.seed), "vp-init", 0);
        let mut params = vec![0.0; lay.len];
        let mut fill = |range: std::ops::Range<usize>, bound: f64| {
            for p in &mut params[range] {
                *p = rng.random_range(-bound..bound);
            }
        };
        let d = hp.embed_dim as f64;
        fill(lay.emb..lay.w1, 1.0);
        fill(lay.w1..lay.b1, 1.0 / d.sqrt());
        fill(lay.w2..lay.b2, 1.0 / (hp.hidden_dim as f64).sqrt());
        Ok(Self {
            hyperparams: hp.clone(),
            params,
            log: Vec::new(),
        })
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.hyperparams)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Classifier head `(weights [K × hidden], bias [K])`.
    pub fn head_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let lay = self.layout();
        let (w, b) = self.params[lay.w2..].split_at_mut(lay.b2 - lay.w2);
        (w, b)
    }

    pub fn zero_head(&mut self) {
        let (w, b) = self.head_mut();
        w.fill(0.0);
        b.fill(0.0);
    }

    pub fn buckets(&self, tokens: &[String]) -> Vec<usize> {
        let h = self.hyperparams.vocab_hash_size;
        tokens.iter().map(|t| token_bucket(t, h)).collect()
    }

    fn trace(&self, buckets: &[usize]) -> Trace {
        let hp = &self.hyperparams;
        let lay = self.layout();
        let (d, hd) = (hp.embed_dim, hp.hidden_dim);
        let p = &self.params;
        let mut pooled = vec![0.0; d];
        for &b in buckets {
            let row = &p[lay.emb + b * d..lay.emb + (b + 1) * d];
            for (acc, v) in pooled.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let inv = 1.0 / buckets.len() as f64;
        pooled.iter_mut().for_each(|v| *v *= inv);
        let mut pre = p[lay.b1..lay.b1 + hd].to_vec();
        crate::math::gemv_acc(&p[lay.w1..lay.b1], &pooled, &mut pre);
        let hidden: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
        let mut logits = p[lay.b2..lay.b2 + K].to_vec();
        crate::math::gemv_acc(&p[lay.w2..lay.b2], &hidden, &mut logits);
        Trace {
            pooled,
            pre,
            hidden,
            logits,
        }
    }

    /// Runs the model on one sample; membership is left unset.
    pub fn forward(&self, sample: &CodeSample) -> Result<ModelOutputRecord> {
        if sample.tokens.is_empty() {
            return Err(Error::Argument(format!("sample {} has no tokens", sample.id)));
        }
        let t = self.trace(&self.buckets(&sample.tokens));
        let logp = log_softmax(&t.logits);
        let y = usize::from(sample.label);
        Ok(ModelOutputRecord {
            sample_id: sample.id.clone(),
            confidence: logp.iter().copied().fold(f64::NEG_INFINITY, f64::max).exp(),
            loss: -logp[y],
            logits: t.logits,
            embedding: t.hidden,
            true_label: sample.label,
            membership: None,
        })
    }

    pub fn predict(&self, sample: &CodeSample) -> Result<u8> {
        Ok(self.forward(sample)?.predicted_label())
    }

    /// Class-weighted mean cross-entropy over `batch` (plus L1/L2 penalties on
    /// weight matrices) and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[(Vec<usize>, u8)], class_weights: [f64; 2]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate_grad(batch, class_weights, &mut grad);
        (loss, grad)
    }

    pub fn loss(&self, batch: &[(Vec<usize>, u8)], class_weights: [f64; 2]) -> f64 {
        let n = batch.len() as f64;
        let data: f64 = batch
            .iter()
            .map(|(b, y)| {
                let t = self.trace(b);
                class_weights[usize::from(*y)] * -log_softmax(&t.logits)[usize::from(*y)]
            })
            .sum::<f64>()
            / n;
        data + self.penalty()
    }

    fn weight_ranges(&self) -> [std::ops::Range<usize>; 3] {
        let lay = self.layout();
        [lay.emb..lay.w1, lay.w1..lay.b1, lay.w2..lay.b2]
    }

    fn penalty(&self) -> f64 {
        let hp = &self.hyperparams;
        if hp.l1_weight == 0.0 && hp.l2_weight == 0.0 {
            return 0.0;
        }
        self.weight_ranges()
            .into_iter()
            .flat_map(|r| self.params[r].iter())
            .map(|&w| hp.l1_weight * w.abs() + hp.l2_weight * w * w)
            .sum()
    }

    fn accumulate_grad(&self, batch: &[(Vec<usize>, u8)], class_weights: [f64; 2], grad: &mut [f64]) -> f64 {
        let hp = &self.hyperparams;
        let lay = self.layout();
        let (d, hd) = (hp.embed_dim, hp.hidden_dim);
        let p = &self.params;
        let n = batch.len() as f64;
        let mut total = 0.0;
        let mut d_hidden = vec![0.0; hd];
        let mut d_pooled = vec![0.0; d];
        for (buckets, y) in batch {
            let y = usize::from(*y);
            let t = self.trace(buckets);
            let w = class_weights[y];
            let logp = log_softmax(&t.logits);
            total += w * -logp[y];
            let coef = w / n;
            let mut dz = softmax(&t.logits);
            dz[y] -= 1.0;
            dz.iter_mut().for_each(|v| *v *= coef);

            d_hidden.fill(0.0);
            for (k, &g) in dz.iter().enumerate() {
                grad[lay.b2 + k] += g;
                let row = lay.w2 + k * hd;
                for j in 0..hd {
                    grad[row + j] += g * t.hidden[j];
                    d_hidden[j] += g * p[row + j];
                }
            }
            d_pooled.fill(0.0);
            for j in 0..hd {
                if t.pre[j] <= 0.0 {
                    continue;
                }
                let g = d_hidden[j];
                grad[lay.b1 + j] += g;
                let row = lay.w1 + j * d;
                for c in 0..d {
                    grad[row + c] += g * t.pooled[c];
                    d_pooled[c] += g * p[row + c];
                }
            }
            let inv = 1.0 / buckets.len() as f64;
            for &b in buckets {
                let row = lay.emb + b * d;
                for c in 0..d {
                    grad[row + c] += d_pooled[c] * inv;
                }
            }
        }
        if hp.l1_weight != 0.0 || hp.l2_weight != 0.0 {
            for r in self.weight_ranges() {
                for i in r {
                    grad[i] += hp.l1_weight * p[i].signum() + 2.0 * hp.l2_weight * p[i];
                }
            }
        }
        total / n + self.penalty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = serde_json::to_vec(self).expect("model serializes");
        write_file(path.as_ref(), &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e.to_string()))?;
        if model.params.len() != model.layout().len {
            return Err(Error::parse(path, "parameter count does not match hyperparameters"));
        }
        Ok(model)
    }
}

/// Inverse-frequency class weights `n / (K · n_y)`.
pub fn class_weights(labels: impl Iterator<Item = u8>) -> [f64; 2] {
    let mut counts = [0usize; 2];
    for y in labels {
        counts[usize::from(y)] += 1;
    }
    let n = (counts[0] + counts[1]) as f64;
    let mut w = [1.0; 2];
    if counts[0] > 0 && counts[1] > 0 {
        for k in 0..2 {
            w[k] = n / (2.0 * counts[k] as f64);
        }
    }
    w
}

/// Trains a VP model with class-balanced cross-entropy and Adam.
///
/// Shuffling and initialisation draw from streams derived from `hp.seed`, so
/// the same inputs always give bitwise-identical parameters. With early
/// stopping, the parameters of the best validation epoch are restored.
pub fn train_vp(train: &[CodeSample], valid: &[CodeSample], hp: &VpHyperparams) -> Result<VpModel> {
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if hp.early_stop_patience.is_some() && valid.is_empty() {
        return Err(Error::Argument(
            "early stopping needs a non-empty validation set".into(),
        ));
    }
    if let Some(s) = train.iter().chain(valid).find(|s| s.tokens.is_empty()) {
        return Err(Error::Argument(format!("sample {} has no tokens", s.id)));
    }
    let mut model = VpModel::init(hp)?;
    let encode =
        |s: &[CodeSample]| -> Vec<(Vec<usize>, u8)> { s.iter().map(|x| (model.buckets(&x.tokens), x.label)).collect() };
    let train_set = encode(train);
    let valid_set = encode(valid);
    let weights = class_weights(train.iter().map(|s| s.label));

    let mut adam = Adam::new(AdamConfig::with_lr(hp.learning_rate), model.params.len());
    let mut rng = rng::stream(hp.seed, "vp-shuffle", 0);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grad = vec![0.0; model.params.len()];
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    let mut log = Vec::with_capacity(hp.max_epochs);

    for epoch in 0..hp.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            let batch: Vec<(Vec<usize>, u8)> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            grad.fill(0.0);
            let loss = model.accumulate_grad(&batch, weights, &mut grad);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            adam.step(&mut model.params, &grad);
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let valid_loss = (!valid_set.is_empty()).then(|| model.loss(&valid_set, weights));
        log.push(EpochLog {
            epoch,
            train_loss,
            valid_loss,
        });
        if let (Some(patience), Some(vl)) = (hp.early_stop_patience, valid_loss) {
            if !vl.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            match &best {
                Some((b, _, _)) if vl >= *b => {
                    if epoch - best.as_ref().map(|x| x.2).unwrap_or(0) >= patience {
                        break;
                    }
                }
                _ => best = Some((vl, model.params.clone(), epoch)),
            }
        }
    }
    if let Some((_, params, _)) = best {
        model.params = params;
    }
    model.log = log;
    Ok(model)
}

/// Accuracy, precision, recall and F1 of argmax predictions (label 1 positive).
pub fn evaluate_vp(model: &VpModel, samples: &[CodeSample]) -> Result<ClassificationMetrics> {
    if samples.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let mut cc = ConfusionCounts::default();
    for s in samples {
        cc.record(model.predict(s)? == 1, s.label == 1);
    }
    eval::metrics(&cc)
}
