//! Membership classifiers (MLP and 1-D CNN) over attack feature vectors.

pub mod cnn;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::corpus::write_file;
use crate::eval::{centroid_distance, EvalReport, MetricSet};
use crate::features::{AttackDataset, FeatureId};
use crate::math::softmax;
use crate::mlp::Mlp;
use crate::par::{self, Exec};
use crate::rng;
use crate::{Error, Result};

pub use cnn::{Cnn, CnnShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "CNN")]
    Cnn,
}

impl Architecture {
    pub const ALL: [Architecture; 2] = [Architecture::Mlp, Architecture::Cnn];
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Mlp => "MLP",
            Architecture::Cnn => "CNN",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MLP" => Ok(Architecture::Mlp),
            "CNN" => Ok(Architecture::Cnn),
            _ => Err(Error::Config(format!("unknown attack architecture `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackHyperparams {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub architecture: Architecture,
    pub mlp_hidden: Vec<usize>,
    pub cnn: CnnShape,
    /// Training stops once the full-set loss falls below this.
    pub loss_floor: f64,
}

impl Default for AttackHyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            max_epochs: 100,
            batch_size: 64,
            seed: 0,
            architecture: Architecture::Mlp,
            mlp_hidden: vec![128, 64],
            cnn: CnnShape::default(),
            loss_floor: 1e-6,
        }
    }
}

impl AttackHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("attack learning_rate must be positive".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "attack max_epochs and batch_size must be positive".into(),
            ));
        }
        if self.mlp_hidden.contains(&0) {
            return Err(Error::Config("attack MLP hidden widths must be positive".into()));
        }
        let c = &self.cnn;
        if c.channels1 == 0 || c.channels2 == 0 || c.pooled == 0 || c.kernel == 0 || c.kernel.is_multiple_of(2) {
            return Err(Error::Config("CNN widths must be positive and the kernel odd".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttackNet {
    Mlp(Mlp),
    Cnn(Cnn),
}

impl AttackNet {
    fn params(&self) -> &[f64] {
        match self {
            AttackNet::Mlp(m) => &m.params,
            AttackNet::Cnn(c) => &c.params,
        }
    }

    fn params_mut(&mut self) -> &mut Vec<f64> {
        match self {
            AttackNet::Mlp(m) => &mut m.params,
            AttackNet::Cnn(c) => &mut c.params,
        }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        match self {
            AttackNet::Mlp(m) => m.forward(x),
            AttackNet::Cnn(c) => c.forward(x),
        }
    }

    fn loss_and_grad(&self, batch: &[(&[f64], usize)]) -> (f64, Vec<f64>) {
        match self {
            AttackNet::Mlp(m) => m.loss_and_grad(batch),
            AttackNet::Cnn(c) => c.loss_and_grad(batch),
        }
    }

    fn loss(&self, batch: &[(&[f64], usize)]) -> f64 {
        match self {
            AttackNet::Mlp(m) => m.loss(batch),
            AttackNet::Cnn(c) => c.loss(batch),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackModel {
    pub architecture: Architecture,
    pub input_width: usize,
    pub net: AttackNet,
    pub hyperparams: AttackHyperparams,
    /// Full-training-set cross-entropy after each epoch.
    pub log: Vec<f64>,
}

impl AttackModel {
    /// Freshly initialised, untrained model.
    pub fn init(width: usize, hp: &AttackHyperparams) -> Result<Self> {
        hp.validate()?;
        if width == 0 {
            return Err(Error::Shape("attack input width must be positive".into()));
        }
        let mut r = rng::stream(hp.seed, "attack-init", 0);
        let net = match hp.architecture {
            Architecture::Mlp => {
                let mut sizes = vec![width];
                sizes.extend(&hp.mlp_hidden);
                sizes.push(2);
                AttackNet::Mlp(Mlp::init(&sizes, &mut r))
            }
            Architecture::Cnn => {
                if width < hp.cnn.kernel {
                    return Err(Error::Shape(format!(
                        "CNN needs rows at least {} wide, got {width}; use the MLP attack for narrow features",
                        hp.cnn.kernel
                    )));
                }
                AttackNet::Cnn(Cnn::init(hp.cnn, &mut r))
            }
        };
        Ok(Self {
            architecture: hp.architecture,
            input_width: width,
            net,
            hyperparams: hp.clone(),
            log: Vec::new(),
        })
    }

    /// Same layout with every parameter zero.
    pub fn zeroed(width: usize, hp: &AttackHyperparams) -> Result<Self> {
        let mut m = Self::init(width, hp)?;
        m.net.params_mut().fill(0.0);
        Ok(m)
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn member_probability(&self, row: &[f64]) -> f64 {
        softmax(&self.net.logits(row))[1]
    }

    pub fn probabilities(&self, row: &[f64]) -> [f64; 2] {
        let p = softmax(&self.net.logits(row));
        [p[0], p[1]]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = serde_json::to_vec(self).expect("attack model serializes");
        write_file(path.as_ref(), &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e.to_string()))?;
        let ok = match &m.net {
            AttackNet::Mlp(n) => n.is_consistent() && n.input_dim() == m.input_width,
            AttackNet::Cnn(c) => c.is_consistent(),
        };
        if !ok {
            return Err(Error::parse(
                path,
                "attack checkpoint parameters do not match its shape",
            ));
        }
        Ok(m)
    }
}

/// Full-dataset cross-entropy of `model`.
pub fn dataset_loss(model: &AttackModel, dataset: &AttackDataset) -> f64 {
    let batch: Vec<(&[f64], usize)> = dataset
        .rows
        .iter()
        .zip(&dataset.membership)
        .map(|(r, &m)| (r.as_slice(), usize::from(m)))
        .collect();
    model.net.loss(&batch)
}

/// Trains a membership classifier on a (shadow) attack dataset.
pub fn train_attack(dataset: &AttackDataset, hp: &AttackHyperparams) -> Result<AttackModel> {
    if dataset.is_empty() || dataset.count(0) == 0 || dataset.count(1) == 0 {
        return Err(Error::Training(
            "attack training data must contain both members and non-members".into(),
        ));
    }
    let width = dataset.rows[0].len();
    if dataset.rows.iter().any(|r| r.len() != width) {
        return Err(Error::Shape("attack rows have differing widths".into()));
    }
    let mut model = AttackModel::init(width, hp)?;
    let rows: Vec<(&[f64], usize)> = dataset
        .rows
        .iter()
        .zip(&dataset.membership)
        .map(|(r, &m)| (r.as_slice(), usize::from(m)))
        .collect();
    let mut adam = Adam::new(AdamConfig::with_lr(hp.learning_rate), model.params().len());
    let mut shuffle = rng::stream(hp.seed, "attack-shuffle", 0);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut batch = Vec::with_capacity(hp.batch_size);
    for epoch in 0..hp.max_epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(hp.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| rows[i]));
            let (loss, grad) = model.net.loss_and_grad(&batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            adam.step(model.net.params_mut(), &grad);
        }
        let full = model.net.loss(&rows);
        model.log.push(full);
        if full < hp.loss_floor {
            break;
        }
    }
    Ok(model)
}

/// Member-class probability for every row of `rows`.
pub fn predict_membership(model: &AttackModel, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    if let Some(r) = rows.iter().find(|r| r.len() != model.input_width) {
        return Err(Error::Shape(format!(
            "row width {} does not match attack model input width {}",
            r.len(),
            model.input_width
        )));
    }
    Ok(rows.iter().map(|r| model.member_probability(r)).collect())
}

/// Member-class probabilities for a dataset, thresholded metrics included.
pub fn evaluate_attack(model: &AttackModel, dataset: &AttackDataset) -> Result<MetricSet> {
    let scores = predict_membership(model, &dataset.rows)?;
    MetricSet::from_scores(&scores, &dataset.membership)
}

/// Right-pads every row with zeros up to `width`.
pub fn pad_rows(dataset: &AttackDataset, width: usize) -> AttackDataset {
    let mut out = dataset.clone();
    for r in &mut out.rows {
        if r.len() < width {
            r.resize(width, 0.0);
        }
    }
    out
}

/// One (feature, architecture) cell of the attack grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub feature: FeatureId,
    pub architecture: Architecture,
    pub defense: String,
    pub report: EvalReport,
}

/// Seed of one repeat of one grid cell; independent of execution order.
pub fn cell_seed(base: u64, feature: FeatureId, arch: Architecture, repeat: usize) -> u64 {
    rng::derive_seed(base, &format!("attack/{feature}/{arch}"), repeat as u64)
}

/// Trains and evaluates every (dataset pair × architecture) cell `repeats`
/// times with independent seeds. Returns the cells plus the repeat-0 model
/// of each cell, in `pairs × architectures` order.
pub fn run_attack_grid(
    shadow: &[AttackDataset],
    target: &[AttackDataset],
    architectures: &[Architecture],
    hp: &AttackHyperparams,
    repeats: usize,
    exec: Exec,
) -> Result<Vec<(GridCell, AttackModel)>> {
    if shadow.len() != target.len() {
        return Err(Error::Argument(format!(
            "{} shadow datasets but {} target datasets",
            shadow.len(),
            target.len()
        )));
    }
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    for (s, t) in shadow.iter().zip(target) {
        if s.spec != t.spec {
            return Err(Error::Shape(format!(
                "shadow {:?} and target {:?} feature specs differ",
                s.spec, t.spec
            )));
        }
    }
    let mut jobs = Vec::new();
    for (d, _) in shadow.iter().enumerate() {
        for &arch in architectures {
            for r in 0..repeats {
                jobs.push((d, arch, r));
            }
        }
    }
    let results = par::try_map(
        exec,
        &jobs,
        |&(d, arch, r)| -> Result<(MetricSet, Option<AttackModel>)> {
            let (s, t) = (&shadow[d], &target[d]);
            let mut cell_hp = hp.clone();
            cell_hp.architecture = arch;
            cell_hp.seed = cell_seed(hp.seed, s.spec.feature, arch, r);
            let (s, t) = if arch == Architecture::Cnn && s.width() < hp.cnn.kernel {
                (pad_rows(s, hp.cnn.kernel), pad_rows(t, hp.cnn.kernel))
            } else {
                (s.clone(), t.clone())
            };
            let model = train_attack(&s, &cell_hp)?;
            let m = evaluate_attack(&model, &t)?;
            Ok((m, (r == 0).then_some(model)))
        },
    )?;

    let mut out = Vec::new();
    let mut it = results.into_iter();
    for t in target {
        for &arch in architectures {
            let mut runs = Vec::with_capacity(repeats);
            let mut model = None;
            for _ in 0..repeats {
                let (m, mdl) = it.next().expect("one result per job");
                runs.push(m);
                model = model.or(mdl);
            }
            let mut report = EvalReport::from_runs(runs, t.count(1), t.count(0));
            report.centroid_distance = Some(centroid_distance(&t.rows, &t.membership)?);
            out.push((
                GridCell {
                    feature: t.spec.feature,
                    architecture: arch,
                    defense: t.defense.clone(),
                    report,
                },
                model.expect("repeat 0 keeps its model"),
            ));
        }
    }
    Ok(out)
}
