//! Attack metrics, ROC AUC, separability and distribution summaries.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::math::{mean, sample_std};
use crate::rng::StreamRng;
use crate::surrogate::ModelOutputRecord;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn record(&mut self, predicted_positive: bool, actually_positive: bool) {
        match (predicted_positive, actually_positive) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn from_predictions(predicted: &[u8], actual: &[u8]) -> Self {
        let mut cc = Self::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            cc.record(p == 1, a == 1);
        }
        cc
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// F1 from precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Accuracy, precision, recall and F1. Precision is 0 when nothing is
/// predicted positive, recall is 0 when there are no positives.
pub fn metrics(cc: &ConfusionCounts) -> Result<ClassificationMetrics> {
    let total = cc.total();
    if total == 0 {
        return Err(Error::Argument("confusion counts are empty".into()));
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(cc.tp, cc.tp + cc.fp);
    let recall = ratio(cc.tp, cc.tp + cc.fn_);
    Ok(ClassificationMetrics {
        accuracy: ratio(cc.tp + cc.tn, total),
        precision,
        recall,
        f1: f1_score(precision, recall),
    })
}

/// ROC AUC by descending sort and trapezoidal accumulation. Tied scores move
/// the curve diagonally, which gives them half credit.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Evaluation("AUC needs both classes".into()));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Evaluation(format!("score {s} is not a number")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Ok(area / (pos as f64 * neg as f64))
}

/// ‖mean(X | m = 1) − mean(X | m = 0)‖₂.
pub fn centroid_distance(rows: &[Vec<f64>], membership: &[u8]) -> Result<f64> {
    if rows.len() != membership.len() {
        return Err(Error::Shape("row and label counts differ".into()));
    }
    let width = rows.first().map(Vec::len).unwrap_or(0);
    let mut sums = [vec![0.0; width], vec![0.0; width]];
    let mut counts = [0usize; 2];
    for (row, &m) in rows.iter().zip(membership) {
        if row.len() != width {
            return Err(Error::Shape("ragged feature matrix".into()));
        }
        let k = usize::from(m == 1);
        counts[k] += 1;
        for (acc, v) in sums[k].iter_mut().zip(row) {
            *acc += v;
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::Evaluation("centroid distance needs both classes".into()));
    }
    Ok(sums[1]
        .iter()
        .zip(&sums[0])
        .map(|(a, b)| {
            let d = a / counts[1] as f64 - b / counts[0] as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordField {
    Loss,
    Logit0,
    Logit1,
    Confidence,
}

impl RecordField {
    pub const ALL: [RecordField; 4] = [
        RecordField::Loss,
        RecordField::Logit0,
        RecordField::Logit1,
        RecordField::Confidence,
    ];

    pub fn get(self, r: &ModelOutputRecord) -> f64 {
        match self {
            RecordField::Loss => r.loss,
            RecordField::Logit0 => r.logits[0],
            RecordField::Logit1 => r.logits[1],
            RecordField::Confidence => r.confidence,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RecordField::Loss => "loss",
            RecordField::Logit0 => "logit_0",
            RecordField::Logit1 => "logit_1",
            RecordField::Confidence => "confidence",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

/// Quantile by linear interpolation between order statistics at `(n − 1)·q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn five_number(values: &[f64]) -> Option<FiveNumber> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    Some(FiveNumber {
        n: v.len(),
        min: v[0],
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q3: quantile_sorted(&v, 0.75),
        max: v[v.len() - 1],
        mean: mean(&v),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub field: RecordField,
    pub member: FiveNumber,
    pub nonmember: FiveNumber,
}

/// Per-membership-class summary of one record field.
pub fn distribution_summary(records: &[ModelOutputRecord], field: RecordField) -> Result<DistributionSummary> {
    let pick = |m: u8| -> Vec<f64> {
        records
            .iter()
            .filter(|r| r.membership == Some(m))
            .map(|r| field.get(r))
            .collect()
    };
    let member = five_number(&pick(1));
    let nonmember = five_number(&pick(0));
    match (member, nonmember) {
        (Some(member), Some(nonmember)) => Ok(DistributionSummary {
            field,
            member,
            nonmember,
        }),
        _ => Err(Error::Evaluation(
            "distribution summary needs records of both membership classes".into(),
        )),
    }
}

/// The five attack metrics of one run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

/// Hard label threshold: probability ≥ 0.5 counts as member.
pub const MEMBER_THRESHOLD: f64 = 0.5;

impl MetricSet {
    /// Metrics of member-class probabilities against membership labels.
    pub fn from_scores(scores: &[f64], membership: &[u8]) -> Result<Self> {
        let predicted: Vec<u8> = scores.iter().map(|&p| u8::from(p >= MEMBER_THRESHOLD)).collect();
        let m = metrics(&ConfusionCounts::from_predictions(&predicted, membership))?;
        Ok(Self {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            auc: auc(scores, membership)?,
        })
    }

    fn fields(&self) -> [f64; 5] {
        [self.accuracy, self.precision, self.recall, self.f1, self.auc]
    }

    fn from_fields(f: [f64; 5]) -> Self {
        Self {
            accuracy: f[0],
            precision: f[1],
            recall: f[2],
            f1: f[3],
            auc: f[4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: MetricSet,
    pub stddev: MetricSet,
    pub runs: Vec<MetricSet>,
    pub n_members: usize,
    pub n_nonmembers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid_distance: Option<f64>,
}

impl EvalReport {
    pub fn from_runs(runs: Vec<MetricSet>, n_members: usize, n_nonmembers: usize) -> Self {
        let column = |k: usize| -> Vec<f64> { runs.iter().map(|r| r.fields()[k]).collect() };
        let mut mu = [0.0; 5];
        let mut sd = [0.0; 5];
        for k in 0..5 {
            let c = column(k);
            mu[k] = mean(&c);
            sd[k] = sample_std(&c);
        }
        Self {
            mean: MetricSet::from_fields(mu),
            stddev: MetricSet::from_fields(sd),
            runs,
            n_members,
            n_nonmembers,
            centroid_distance: None,
        }
    }
}

/// Indices (ascending) of a membership-balanced subset: every record of the
/// smaller class plus an equally large random subset of the larger one.
pub fn balanced_indices(membership: &[u8], rng: &mut StreamRng) -> Vec<usize> {
    let members: Vec<usize> = (0..membership.len()).filter(|&i| membership[i] == 1).collect();
    let others: Vec<usize> = (0..membership.len()).filter(|&i| membership[i] != 1).collect();
    let (small, large) = if members.len() <= others.len() {
        (members, others)
    } else {
        (others, members)
    };
    let mut keep = small;
    let picked = rand::seq::index::sample(rng, large.len(), keep.len());
    keep.extend(picked.iter().map(|i| large[i]));
    keep.sort_unstable();
    keep
}
