#![allow(dead_code)]

use rand::Rng;

use memaudit::attack::cnn::{Cnn, CnnShape};
use memaudit::corpus::{self, CodeSample, SplitPlan, Subset};
use memaudit::math::softmax;
use memaudit::mlp::Mlp;
use memaudit::rng::{self, StreamRng};
use memaudit::surrogate::{class_weights, ModelOutputRecord, VpHyperparams, VpModel};

pub const FD_STEP: f64 = 1e-4;
pub const KINK: f64 = 1e-6;
/// Gradients smaller than this are too close to zero for a relative comparison.
const MIN_GRAD: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn pick_index(g: &[f64], rng: &mut StreamRng) -> Option<usize> {
    let nz: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() >= MIN_GRAD).collect();
    (!nz.is_empty()).then(|| nz[rng.random_range(0..nz.len())])
}

fn random_rows(rng: &mut StreamRng, n: usize, w: usize) -> Vec<(Vec<f64>, usize)> {
    (0..n)
        .map(|_| {
            (
                (0..w).map(|_| rng.random_range(-2.0..2.0)).collect(),
                rng.random_range(0..2),
            )
        })
        .collect()
}

fn mlp_pattern(m: &Mlp, rows: &[(Vec<f64>, usize)]) -> Option<Vec<bool>> {
    let mut out = Vec::new();
    for (x, _) in rows {
        let t = m.forward_trace(x);
        for layer in &t.acts[1..t.acts.len() - 1] {
            for &v in layer {
                if v > 0.0 && v < KINK {
                    return None;
                }
                out.push(v > 0.0);
            }
        }
    }
    Some(out)
}

/// Relative errors of `n` accepted finite-difference probes on the attack MLP.
pub fn mlp_probes(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::seeded(seed);
    let mut errs = Vec::new();
    for attempt in 0..50 * n {
        if errs.len() == n {
            break;
        }
        let w = rng.random_range(1..=20);
        let mut m = Mlp::init(&[w, 128, 64, 2], &mut rng::stream(seed, "mlp-probe", attempt as u64));
        let n_rows = rng.random_range(1..=4);
        let rows = random_rows(&mut rng, n_rows, w);
        let batch: Vec<(&[f64], usize)> = rows.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        let (_, g) = m.loss_and_grad(&batch);
        let Some(p) = pick_index(&g, &mut rng) else { continue };
        let base = m.params[p];
        let mut eval = |v: f64| {
            m.params[p] = v;
            (m.loss(&batch), mlp_pattern(&m, &rows))
        };
        let (lp, pp) = eval(base + FD_STEP);
        let (lm, pm) = eval(base - FD_STEP);
        let (_, p0) = eval(base);
        match (pp, pm, p0) {
            (Some(a), Some(b), Some(c)) if a == b && b == c => {}
            _ => continue,
        }
        errs.push(rel_err(g[p], (lp - lm) / (2.0 * FD_STEP)));
    }
    errs
}

fn cnn_pattern(c: &Cnn, rows: &[(Vec<f64>, usize)]) -> Option<(Vec<bool>, Vec<usize>)> {
    let mut acts = Vec::new();
    let mut idx = Vec::new();
    for (x, _) in rows {
        let t = c.forward_trace(x);
        if t.kink_margin(&c.shape) < KINK {
            return None;
        }
        let (a, i) = t.pattern();
        acts.extend(a);
        idx.extend(i);
    }
    Some((acts, idx))
}

/// Relative errors of `n` accepted probes on the attack CNN.
pub fn cnn_probes(n: usize, seed: u64) -> Vec<f64> {
    let shape = CnnShape::default();
    let mut rng = rng::seeded(seed);
    let mut errs = Vec::new();
    for attempt in 0..50 * n {
        if errs.len() == n {
            break;
        }
        let w = rng.random_range(3..=20);
        let mut c = Cnn::init(shape, &mut rng::stream(seed, "cnn-probe", attempt as u64));
        let n_rows = rng.random_range(1..=3);
        let rows = random_rows(&mut rng, n_rows, w);
        let batch: Vec<(&[f64], usize)> = rows.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        let (_, g) = c.loss_and_grad(&batch);
        let Some(p) = pick_index(&g, &mut rng) else { continue };
        let base = c.params[p];
        let mut eval = |v: f64| {
            c.params[p] = v;
            (c.loss(&batch), cnn_pattern(&c, &rows))
        };
        let (lp, pp) = eval(base + FD_STEP);
        let (lm, pm) = eval(base - FD_STEP);
        let (_, p0) = eval(base);
        match (pp, pm, p0) {
            (Some(a), Some(b), Some(c0)) if a == b && b == c0 => {}
            _ => continue,
        }
        errs.push(rel_err(g[p], (lp - lm) / (2.0 * FD_STEP)));
    }
    errs
}

fn vp_pattern(m: &VpModel, samples: &[CodeSample]) -> Option<Vec<bool>> {
    let mut out = Vec::new();
    for s in samples {
        for &v in &m.forward(s).ok()?.embedding {
            if v > 0.0 && v < KINK {
                return None;
            }
            out.push(v > 0.0);
        }
    }
    Some(out)
}

/// Relative errors of `n` accepted probes on the surrogate classifier,
/// including the class weights and L1/L2 penalties.
pub fn vp_probes(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::seeded(seed);
    let mut errs = Vec::new();
    for attempt in 0..50 * n {
        if errs.len() == n {
            break;
        }
        let hp = VpHyperparams {
            vocab_hash_size: 64,
            embed_dim: 6,
            hidden_dim: 5,
            l1_weight: if attempt % 3 == 1 { 1e-3 } else { 0.0 },
            l2_weight: if attempt % 3 == 2 { 1e-3 } else { 0.0 },
            seed: seed.wrapping_add(attempt as u64),
            ..VpHyperparams::default()
        };
        let mut m = VpModel::init(&hp).unwrap();
        let samples = corpus::synth_corpus(3, 2, 16, 0.5, seed ^ attempt as u64).unwrap();
        let batch: Vec<(Vec<usize>, u8)> = samples.iter().map(|s| (m.buckets(&s.tokens), s.label)).collect();
        let cw = class_weights(samples.iter().map(|s| s.label));
        let (_, g) = m.loss_and_grad(&batch, cw);
        let Some(p) = pick_index(&g, &mut rng) else { continue };
        let base = m.params()[p];
        // the L1 term has its own kink at zero
        if hp.l1_weight > 0.0 && base.abs() < 10.0 * FD_STEP {
            continue;
        }
        let mut eval = |v: f64| {
            m.params_mut()[p] = v;
            (m.loss(&batch, cw), vp_pattern(&m, &samples))
        };
        let (lp, pp) = eval(base + FD_STEP);
        let (lm, pm) = eval(base - FD_STEP);
        let (_, p0) = eval(base);
        match (pp, pm, p0) {
            (Some(a), Some(b), Some(c)) if a == b && b == c => {}
            _ => continue,
        }
        errs.push(rel_err(g[p], (lp - lm) / (2.0 * FD_STEP)));
    }
    errs
}

/// Pairwise (Mann–Whitney) AUC: wins plus half the ties over all pairs.
pub fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &a) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &b) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if a > b {
                num += 1.0;
            } else if a == b {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// A consistent output record with random logits and embedding.
pub fn random_record(rng: &mut StreamRng, id: usize, d: usize) -> ModelOutputRecord {
    let scale = if rng.random_bool(0.2) { 40.0 } else { 5.0 };
    let logits: Vec<f64> = (0..2).map(|_| rng.random_range(-scale..scale)).collect();
    let p = softmax(&logits);
    let y: u8 = rng.random_range(0..2);
    ModelOutputRecord {
        sample_id: format!("r{id}"),
        confidence: p[0].max(p[1]),
        loss: memaudit::math::cross_entropy(&logits, usize::from(y)),
        logits,
        embedding: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        true_label: y,
        membership: Some(rng.random_range(0..2)),
    }
}

/// Checks every plan invariant by brute force; returns a description of the
/// first violation.
pub fn check_plan(plan: &SplitPlan, corpus: &[CodeSample]) -> Result<(), String> {
    use std::collections::{HashMap, HashSet};
    let by_id: HashMap<&str, &CodeSample> = corpus.iter().map(|s| (s.id.as_str(), s)).collect();
    for (i, a) in Subset::ALL.iter().enumerate() {
        let ids = plan.ids(*a);
        let set: HashSet<&String> = ids.iter().collect();
        if set.len() != ids.len() {
            return Err(format!("{} repeats an id", a.name()));
        }
        for b in &Subset::ALL[i + 1..] {
            for id in plan.ids(*b) {
                if set.contains(id) {
                    return Err(format!("{id} in both {} and {}", a.name(), b.name()));
                }
            }
        }
        let mut counts = [0usize; 2];
        for id in ids {
            let s = by_id.get(id.as_str()).ok_or_else(|| format!("{id} not in corpus"))?;
            counts[usize::from(s.label)] += 1;
        }
        if counts[0].abs_diff(counts[1]) > 1 {
            return Err(format!("{} label counts {:?}", a.name(), counts));
        }
    }
    Ok(())
}
