//! MemGuard-style baseline: perturb logits so that a defender-trained
//! membership classifier becomes maximally uncertain, without changing the
//! predicted class.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{expose, DefendedRecord};
use crate::adam::{Adam, AdamConfig};
use crate::math::{argmax, cross_entropy, softmax};
use crate::mlp::Mlp;
use crate::par::{self, Exec};
use crate::rng;
use crate::surrogate::ModelOutputRecord;
use crate::{Error, Result};

/// Which loss value MG exposes alongside the perturbed logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MgLoss {
    /// The undefended loss.
    #[default]
    Original,
    /// Cross-entropy of the perturbed logits against the true label.
    Recomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemGuardParams {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub step: f64,
    pub max_iter: usize,
    pub budget: f64,
    pub band: (f64, f64),
    pub loss: MgLoss,
    pub seed: u64,
}

impl Default for MemGuardParams {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128, 64],
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 64,
            step: 0.05,
            max_iter: 200,
            budget: 5.0,
            band: (0.45, 0.55),
            loss: MgLoss::default(),
            seed: 0,
        }
    }
}

impl MemGuardParams {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !(pos(self.learning_rate) && pos(self.step) && pos(self.budget)) {
            return Err(Error::Config(
                "mg learning_rate, step and budget must be positive".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(
                "mg epochs, batch_size and hidden widths must be positive".into(),
            ));
        }
        let (lo, hi) = self.band;
        if !((0.0..=0.5).contains(&lo) && (0.5..=1.0).contains(&hi)) {
            return Err(Error::Config(format!("mg band ({lo}, {hi}) must bracket 0.5")));
        }
        Ok(())
    }
}

/// Trains the defender's membership classifier on softmax outputs.
pub fn train_defense_classifier(shadow: &[ModelOutputRecord], params: &MemGuardParams) -> Result<Mlp> {
    params.validate()?;
    let data: Vec<(Vec<f64>, usize)> = shadow
        .iter()
        .map(|r| {
            let m = r
                .membership
                .ok_or_else(|| Error::Validation(format!("shadow record {} has no membership label", r.sample_id)))?;
            Ok((softmax(&r.logits), usize::from(m)))
        })
        .collect::<Result<_>>()?;
    if !(data.iter().any(|d| d.1 == 0) && data.iter().any(|d| d.1 == 1)) {
        return Err(Error::Training("MemGuard needs shadow members and non-members".into()));
    }
    let k = data[0].0.len();
    let mut sizes = vec![k];
    sizes.extend(&params.hidden);
    sizes.push(2);
    let mut clf = Mlp::init(&sizes, &mut rng::stream(params.seed, "mg-init", 0));
    let mut adam = Adam::new(AdamConfig::with_lr(params.learning_rate), clf.params.len());
    let mut shuffle = rng::stream(params.seed, "mg-shuffle", 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..params.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(params.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (data[i].0.as_slice(), data[i].1)).collect();
            let (loss, grad) = clf.loss_and_grad(&batch);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            adam.step(&mut clf.params, &grad);
        }
    }
    Ok(clf)
}

/// Member probability of the defense classifier at logits `z` and its
/// gradient with respect to `z`.
pub fn member_probability_grad(clf: &Mlp, z: &[f64]) -> (f64, Vec<f64>) {
    let s = softmax(z);
    let trace = clf.forward_trace(&s);
    let q = softmax(trace.output());
    let p = q[1];
    let g_s = clf.backward(&trace, &[-q[0] * q[1], q[0] * q[1]], None);
    let dot: f64 = s.iter().zip(&g_s).map(|(a, b)| a * b).sum();
    let g_z = s.iter().zip(&g_s).map(|(si, gi)| si * (gi - dot)).collect();
    (p, g_z)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Perturbed logits for one record and whether the search missed the band.
pub fn perturb_logits(clf: &Mlp, z0: &[f64], params: &MemGuardParams) -> (Vec<f64>, bool) {
    let (lo, hi) = params.band;
    let label = argmax(z0);
    let at = |d: &[f64]| -> Vec<f64> { z0.iter().zip(d).map(|(a, b)| a + b).collect() };
    let mut delta = vec![0.0; z0.len()];
    let mut best = (f64::INFINITY, delta.clone());
    for _ in 0..=params.max_iter {
        let z = at(&delta);
        let (p, g) = member_probability_grad(clf, &z);
        let gap = (p - 0.5).abs();
        if gap < best.0 {
            best = (gap, delta.clone());
        }
        if (lo..=hi).contains(&p) {
            return (z, false);
        }
        // descend (p − 0.5)² along its normalised gradient
        let dir: Vec<f64> = g.iter().map(|gi| (p - 0.5) * gi).collect();
        let n = norm(&dir);
        if n == 0.0 || !n.is_finite() {
            break;
        }
        let mut cand: Vec<f64> = delta.iter().zip(&dir).map(|(d, g)| d - params.step * g / n).collect();
        let cn = norm(&cand);
        if cn > params.budget {
            cand.iter_mut().for_each(|c| *c *= params.budget / cn);
        }
        if argmax(&at(&cand)) != label || cand == delta {
            break;
        }
        delta = cand;
    }
    (at(&best.1), true)
}

/// Defends `victims` with an already trained classifier.
pub fn memguard_with(
    clf: &Mlp,
    victims: &[ModelOutputRecord],
    params: &MemGuardParams,
    exec: Exec,
) -> Result<Vec<DefendedRecord>> {
    par::try_map(exec, victims, |r| {
        if r.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("record {} has non-finite logits", r.sample_id)));
        }
        let (z, flagged) = perturb_logits(clf, &r.logits, params);
        let loss = match params.loss {
            MgLoss::Original => r.loss,
            MgLoss::Recomputed => cross_entropy(&z, usize::from(r.true_label)),
        };
        Ok(DefendedRecord {
            predicted_label: r.predicted_label(),
            exposed: expose(r, z, loss),
            flagged,
        })
    })
}

/// Trains the defense classifier on `shadow` and perturbs every victim record.
pub fn memguard_defend(
    shadow: &[ModelOutputRecord],
    victims: &[ModelOutputRecord],
    params: &MemGuardParams,
    exec: Exec,
) -> Result<Vec<DefendedRecord>> {
    let clf = train_defense_classifier(shadow, params)?;
    memguard_with(&clf, victims, params, exec)
}
