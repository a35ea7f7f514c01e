//! Inference-time output defenses.
//!
//! NMID transforms (logit masking, loss clamping, Gaussian smoothing) act on
//! one record at a time; [`memguard`] perturbs logits against a learned
//! membership classifier. Every defense keeps the predicted label computed
//! from the original logits.

pub mod memguard;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::eval::quantile_sorted;
use crate::math::{argmax, softmax};
use crate::par::{self, Exec};
use crate::rng::{self, StreamRng};
use crate::surrogate::ModelOutputRecord;
use crate::{Error, Result};

pub use memguard::{memguard_defend, train_defense_classifier, MemGuardParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DefenseKind {
    ND,
    MG,
    LM,
    LsM,
    LS,
    LsS,
    ALL,
}

impl DefenseKind {
    pub fn needs_alpha(self) -> bool {
        matches!(self, DefenseKind::LS | DefenseKind::LsS | DefenseKind::ALL)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub alpha: f64,
    /// `(lo, hi)` for LsM; `None` means derive it from shadow-member losses.
    pub loss_clamp: Option<(f64, f64)>,
    pub seed: u64,
    pub mg: MemGuardParams,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            kind: DefenseKind::ND,
            alpha: 0.0,
            loss_clamp: None,
            seed: 0,
            mg: MemGuardParams::default(),
        }
    }
}

impl DefenseConfig {
    pub fn new(kind: DefenseKind, alpha: f64) -> Self {
        Self {
            kind,
            alpha,
            ..Default::default()
        }
    }

    /// Short label such as `ND`, `LsM` or `ALL-10`.
    pub fn label(&self) -> String {
        if self.kind.needs_alpha() {
            format!("{:?}-{}", self.kind, self.alpha)
        } else {
            format!("{:?}", self.kind)
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.kind.needs_alpha() && self.alpha <= 0.0 {
            return Err(Error::Config(format!("{:?} needs alpha > 0", self.kind)));
        }
        if let Some((lo, hi)) = self.loss_clamp {
            if !(lo <= hi) {
                return Err(Error::Config(format!("loss clamp lo {lo} exceeds hi {hi}")));
            }
        }
        self.mg.validate()
    }

    /// ND, MG, LM, LsM and LS/LsS/ALL at α ∈ {3, 5, 10}.
    pub fn standard_suite() -> Vec<DefenseConfig> {
        let mut out = vec![
            Self::new(DefenseKind::ND, 0.0),
            Self::new(DefenseKind::MG, 0.0),
            Self::new(DefenseKind::LM, 0.0),
            Self::new(DefenseKind::LsM, 0.0),
        ];
        for kind in [DefenseKind::LS, DefenseKind::LsS, DefenseKind::ALL] {
            for alpha in [3.0, 5.0, 10.0] {
                out.push(Self::new(kind, alpha));
            }
        }
        out
    }
}

impl fmt::Display for DefenseConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for DefenseConfig {
    type Err = Error;

    /// Parses labels like `ND`, `LsM`, `LS-3`, `ALL-10` (case-insensitive).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, alpha) = match s.split_once('-') {
            Some((n, a)) => (
                n,
                Some(
                    a.parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad alpha in `{s}`")))?,
                ),
            ),
            None => (s, None),
        };
        let kind = match name.to_ascii_lowercase().as_str() {
            "nd" => DefenseKind::ND,
            "mg" => DefenseKind::MG,
            "lm" => DefenseKind::LM,
            "lsm" => DefenseKind::LsM,
            "ls" => DefenseKind::LS,
            "lss" => DefenseKind::LsS,
            "all" => DefenseKind::ALL,
            _ => return Err(Error::Config(format!("unknown defense `{s}`"))),
        };
        if kind.needs_alpha() != alpha.is_some() {
            return Err(Error::Config(format!(
                "defense `{s}`: alpha given for the wrong kind or missing"
            )));
        }
        let cfg = Self::new(kind, alpha.unwrap_or(0.0));
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A record as exposed to the querier, plus the label the service reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefendedRecord {
    /// Argmax of the original, undefended logits.
    pub predicted_label: u8,
    pub exposed: ModelOutputRecord,
    /// Set when an iterative defense could not meet its target.
    pub flagged: bool,
}

/// Zeroes the largest logit (lowest index on ties).
pub fn mask_logits(z: &[f64]) -> Result<Vec<f64>> {
    if z.len() < 2 || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument(format!(
            "mask_logits needs ≥ 2 finite logits, got {z:?}"
        )));
    }
    let mut out = z.to_vec();
    out[argmax(z)] = 0.0;
    Ok(out)
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn clamp_loss(loss: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(lo <= hi) {
        return Err(Error::Config(format!("loss clamp lo {lo} exceeds hi {hi}")));
    }
    Ok(loss.max(lo).min(hi))
}

/// Adds independent N(0, α²) noise to every component; α = 0 is the identity.
pub fn smooth(v: &[f64], alpha: f64, rng: &mut StreamRng) -> Result<Vec<f64>> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be non-negative, got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(v.to_vec());
    }
    let normal = Normal::new(0.0, alpha).expect("alpha validated");
    Ok(v.iter().map(|x| x + normal.sample(rng)).collect())
}

pub fn smooth_scalar(v: f64, alpha: f64, rng: &mut StreamRng) -> Result<f64> {
    Ok(smooth(&[v], alpha, rng)?[0])
}

/// Default LsM bounds: `(0, p95)` of the given (shadow-member) losses.
pub fn default_loss_clamp(losses: &[f64]) -> Result<(f64, f64)> {
    if losses.is_empty() {
        return Err(Error::Argument("no losses to derive a clamp from".into()));
    }
    let mut s = losses.to_vec();
    s.sort_by(f64::total_cmp);
    Ok((0.0, quantile_sorted(&s, 0.95)))
}

/// Randomness for one query of one record under `cfg`.
pub fn record_stream(cfg: &DefenseConfig, sample_id: &str, query: u64) -> StreamRng {
    rng::keyed_stream(cfg.seed, &format!("defense/{}", cfg.label()), sample_id, query)
}

/// Exposed record with logits `z` and loss `loss`; confidence follows `z`.
pub(crate) fn expose(record: &ModelOutputRecord, z: Vec<f64>, loss: f64) -> ModelOutputRecord {
    let confidence = softmax(&z).into_iter().fold(f64::NEG_INFINITY, f64::max);
    ModelOutputRecord {
        logits: z,
        confidence,
        loss,
        ..record.clone()
    }
}

/// Applies an NMID configuration to one record.
pub fn apply_defense(record: &ModelOutputRecord, cfg: &DefenseConfig, rng: &mut StreamRng) -> Result<DefendedRecord> {
    cfg.validate()?;
    if record.logits.iter().any(|v| !v.is_finite()) || !record.loss.is_finite() {
        return Err(Error::Argument(format!(
            "record {} has non-finite outputs",
            record.sample_id
        )));
    }
    let predicted_label = record.predicted_label();
    let z = &record.logits;
    let exposed = match cfg.kind {
        DefenseKind::ND => record.clone(),
        DefenseKind::MG => return Err(Error::Argument("MG is a batch defense; use memguard_defend".into())),
        DefenseKind::LM => expose(record, mask_logits(z)?, record.loss),
        DefenseKind::LsM => {
            let (lo, hi) = cfg
                .loss_clamp
                .ok_or_else(|| Error::Config("LsM needs loss_clamp bounds".into()))?;
            expose(record, z.clone(), clamp_loss(record.loss, lo, hi)?)
        }
        DefenseKind::LS => expose(record, smooth(z, cfg.alpha, rng)?, record.loss),
        DefenseKind::LsS => {
            let l = smooth_scalar(record.loss, cfg.alpha, rng)?.max(0.0);
            expose(record, z.clone(), l)
        }
        DefenseKind::ALL => {
            let zt = smooth(z, cfg.alpha, rng)?;
            let l = smooth_scalar(record.loss, cfg.alpha, rng)?.max(0.0);
            expose(record, zt, l)
        }
    };
    Ok(DefendedRecord {
        predicted_label,
        exposed,
        flagged: false,
    })
}

/// Applies an NMID configuration to a batch, one independent stream per record.
pub fn defend_records(
    records: &[ModelOutputRecord],
    cfg: &DefenseConfig,
    query: u64,
    exec: Exec,
) -> Result<Vec<DefendedRecord>> {
    par::try_map(exec, records, |r| {
        let mut rng = record_stream(cfg, &r.sample_id, query);
        apply_defense(r, cfg, &mut rng)
    })
}
