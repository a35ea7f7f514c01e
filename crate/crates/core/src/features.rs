//! Attack feature combinations built from [`ModelOutputRecord`]s.
//!
//! Column layout within a row is always
//! `[logit_0 .. logit_{K-1}] ++ [confidence] ++ [loss] ++ [emb_0 .. emb_{d-1}]`,
//! keeping only the blocks a feature uses.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{write_file, CodeSample};
use crate::par::{self, Exec};
use crate::surrogate::{ModelOutputRecord, VpModel};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureId {
    F1,
    F2,
    F3,
    F4,
    F5,
    F6,
    F7,
    F8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccessType {
    BlackBox,
    GrayBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Block {
    Logits,
    Confidence,
    Loss,
    Embedding,
}

impl FeatureId {
    pub const ALL: [FeatureId; 8] = [
        FeatureId::F1,
        FeatureId::F2,
        FeatureId::F3,
        FeatureId::F4,
        FeatureId::F5,
        FeatureId::F6,
        FeatureId::F7,
        FeatureId::F8,
    ];

    fn blocks(self) -> &'static [Block] {
        use Block::*;
        match self {
            FeatureId::F1 => &[Confidence],
            FeatureId::F2 => &[Loss],
            FeatureId::F3 => &[Logits],
            FeatureId::F4 => &[Logits, Confidence],
            FeatureId::F5 => &[Logits, Loss],
            FeatureId::F6 => &[Logits, Confidence, Loss],
            FeatureId::F7 => &[Logits, Embedding],
            FeatureId::F8 => &[Logits, Loss, Embedding],
        }
    }

    pub fn access(self) -> AccessType {
        match self {
            FeatureId::F7 | FeatureId::F8 => AccessType::GrayBox,
            _ => AccessType::BlackBox,
        }
    }

    /// Row width for `k` classes and a `d_emb`-dimensional embedding.
    pub fn dimension(self, k: usize, d_emb: usize) -> usize {
        self.blocks()
            .iter()
            .map(|b| match b {
                Block::Logits => k,
                Block::Confidence | Block::Loss => 1,
                Block::Embedding => d_emb,
            })
            .sum()
    }

    pub fn description(self) -> &'static str {
        match self {
            FeatureId::F1 => "confidence",
            FeatureId::F2 => "loss",
            FeatureId::F3 => "logits",
            FeatureId::F4 => "logits+confidence",
            FeatureId::F5 => "logits+loss",
            FeatureId::F6 => "logits+confidence+loss",
            FeatureId::F7 => "embedding+logits",
            FeatureId::F8 => "embedding+logits+loss",
        }
    }

    pub fn column_names(self, k: usize, d_emb: usize) -> Vec<String> {
        let mut out = Vec::new();
        for b in self.blocks() {
            match b {
                Block::Logits => out.extend((0..k).map(|i| format!("logit_{i}"))),
                Block::Confidence => out.push("confidence".into()),
                Block::Loss => out.push("loss".into()),
                Block::Embedding => out.extend((0..d_emb).map(|i| format!("emb_{i}"))),
            }
        }
        out
    }

    pub fn row(self, r: &ModelOutputRecord) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dimension(r.logits.len(), r.embedding.len()));
        for b in self.blocks() {
            match b {
                Block::Logits => out.extend_from_slice(&r.logits),
                Block::Confidence => out.push(r.confidence),
                Block::Loss => out.push(r.loss),
                Block::Embedding => out.extend_from_slice(&r.embedding),
            }
        }
        out
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for FeatureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureId::ALL
            .into_iter()
            .find(|f| f.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown feature `{s}` (expected F1..F8)")))
    }
}

/// Which feature sources a pipeline stage may read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccessPolicy {
    BlackBoxOnly,
    #[default]
    GrayBox,
}

pub fn check_access(feature: FeatureId, policy: AccessPolicy) -> Result<()> {
    if policy == AccessPolicy::BlackBoxOnly && feature.access() == AccessType::GrayBox {
        return Err(Error::Access {
            feature: feature.to_string(),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub feature: FeatureId,
    pub k: usize,
    pub d_emb: usize,
}

impl FeatureSpec {
    pub fn dimension(&self) -> usize {
        self.feature.dimension(self.k, self.d_emb)
    }

    pub fn access(&self) -> AccessType {
        self.feature.access()
    }
}

/// Per-column z-score statistics (population standard deviation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Columns with a standard deviation below this are only mean-centred.
pub const MIN_STD: f64 = 1e-12;

impl Normalizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Argument("cannot fit a normalizer on no rows".into()));
        };
        let w = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; w];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; w];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| if *s < MIN_STD { v - m } else { (v - m) / s })
            .collect()
    }
}

/// Feature matrix plus membership labels for one feature combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackDataset {
    pub spec: FeatureSpec,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub membership: Vec<u8>,
    pub sample_ids: Vec<String>,
    /// Statistics the rows were normalized with, if any.
    pub normalization: Option<Normalizer>,
    /// Label of the output defense the records passed through.
    pub defense: String,
}

impl AttackDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.spec.dimension()
    }

    pub fn count(&self, m: u8) -> usize {
        self.membership.iter().filter(|&&x| x == m).count()
    }

    /// A copy normalized with `stats` (typically fitted on shadow data).
    pub fn normalized(&self, stats: &Normalizer) -> Result<Self> {
        if stats.mean.len() != self.width() {
            return Err(Error::Shape(format!(
                "normalizer width {} vs dataset width {}",
                stats.mean.len(),
                self.width()
            )));
        }
        Ok(Self {
            rows: self.rows.iter().map(|r| stats.apply_row(r)).collect(),
            normalization: Some(stats.clone()),
            ..self.clone()
        })
    }
}

pub fn fit_normalizer(shadow: &AttackDataset) -> Result<Normalizer> {
    Normalizer::fit(&shadow.rows)
}

pub fn apply_normalizer(dataset: &AttackDataset, stats: &Normalizer) -> Result<AttackDataset> {
    dataset.normalized(stats)
}

/// Runs the model over one split subset and tags every record with its membership.
pub fn extract(model: &VpModel, samples: &[&CodeSample], membership: u8, exec: Exec) -> Result<Vec<ModelOutputRecord>> {
    par::try_map(exec, samples, |s| {
        let mut r = model.forward(s)?;
        r.membership = Some(membership);
        Ok(r)
    })
}

/// Builds the feature matrix for `feature` from labelled records.
pub fn assemble(records: &[ModelOutputRecord], feature: FeatureId, defense: &str) -> Result<AttackDataset> {
    let Some(first) = records.first() else {
        return Err(Error::Argument("cannot assemble features from no records".into()));
    };
    let (k, d_emb) = (first.logits.len(), first.embedding.len());
    let mut rows = Vec::with_capacity(records.len());
    let mut membership = Vec::with_capacity(records.len());
    for r in records {
        if r.logits.len() != k || r.embedding.len() != d_emb {
            return Err(Error::Shape(format!(
                "record {} has {} logits / {}-dim embedding, expected {k} / {d_emb}",
                r.sample_id,
                r.logits.len(),
                r.embedding.len()
            )));
        }
        let Some(m) = r.membership else {
            return Err(Error::Validation(format!(
                "record {} has no membership label",
                r.sample_id
            )));
        };
        let row = feature.row(r);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "record {} has non-finite outputs",
                r.sample_id
            )));
        }
        rows.push(row);
        membership.push(m);
    }
    Ok(AttackDataset {
        spec: FeatureSpec { feature, k, d_emb },
        columns: feature.column_names(k, d_emb),
        rows,
        membership,
        sample_ids: records.iter().map(|r| r.sample_id.clone()).collect(),
        normalization: None,
        defense: defense.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Delimiter-separated dataset files

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

pub fn dataset_to_tsv(ds: &AttackDataset) -> String {
    let mut out = String::from("# memaudit attack dataset\n");
    out.push_str(&format!(
        "# feature_id={} K={} d_emb={} access={} defense={}\n",
        ds.spec.feature,
        ds.spec.k,
        ds.spec.d_emb,
        match ds.spec.access() {
            AccessType::BlackBox => "black-box",
            AccessType::GrayBox => "gray-box",
        },
        ds.defense
    ));
    if let Some(n) = &ds.normalization {
        out.push_str(&format!("# norm_mean={}\n# norm_std={}\n", join(&n.mean), join(&n.std)));
    }
    out.push_str("sample_id\tmembership");
    for c in &ds.columns {
        out.push('\t');
        out.push_str(c);
    }
    out.push('\n');
    for ((id, m), row) in ds.sample_ids.iter().zip(&ds.membership).zip(&ds.rows) {
        out.push_str(&format!("{id}\t{m}"));
        for v in row {
            out.push('\t');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &AttackDataset) -> Result<()> {
    write_file(path.as_ref(), dataset_to_tsv(ds).as_bytes())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<AttackDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text).map_err(|m| Error::parse(path, m))
}

fn parse_floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| v.parse::<f64>().map_err(|e| format!("bad number `{v}`: {e}")))
        .collect()
}

pub fn parse_dataset(text: &str) -> std::result::Result<AttackDataset, String> {
    let mut feature = None;
    let (mut k, mut d_emb) = (None, None);
    let mut defense = String::from("ND");
    let (mut nmean, mut nstd) = (None, None);
    let mut lines = text.lines();
    let mut header = None;
    for line in lines.by_ref() {
        if let Some(meta) = line.strip_prefix('#') {
            for kv in meta.split_whitespace() {
                let Some((key, val)) = kv.split_once('=') else { continue };
                match key {
                    "feature_id" => feature = Some(val.parse::<FeatureId>().map_err(|e| e.to_string())?),
                    "K" => k = Some(val.parse::<usize>().map_err(|e| e.to_string())?),
                    "d_emb" => d_emb = Some(val.parse::<usize>().map_err(|e| e.to_string())?),
                    "defense" => defense = val.to_string(),
                    "norm_mean" => nmean = Some(parse_floats(val)?),
                    "norm_std" => nstd = Some(parse_floats(val)?),
                    _ => {}
                }
            }
        } else {
            header = Some(line);
            break;
        }
    }
    let (Some(feature), Some(k), Some(d_emb)) = (feature, k, d_emb) else {
        return Err("missing feature_id/K/d_emb header".into());
    };
    let header = header.ok_or("missing column header")?;
    let columns: Vec<String> = header.split('\t').skip(2).map(str::to_string).collect();
    let spec = FeatureSpec { feature, k, d_emb };
    if columns.len() != spec.dimension() {
        return Err(format!(
            "{} columns but {feature} needs {}",
            columns.len(),
            spec.dimension()
        ));
    }
    let mut ds = AttackDataset {
        spec,
        columns,
        rows: Vec::new(),
        membership: Vec::new(),
        sample_ids: Vec::new(),
        normalization: match (nmean, nstd) {
            (Some(mean), Some(std)) => Some(Normalizer { mean, std }),
            _ => None,
        },
        defense,
    };
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut cells = line.split('\t');
        let id = cells.next().ok_or_else(|| format!("row {i}: empty"))?;
        let m: u8 = cells
            .next()
            .ok_or_else(|| format!("row {i}: missing membership"))?
            .parse()
            .map_err(|e| format!("row {i}: {e}"))?;
        if m > 1 {
            return Err(format!("row {i}: membership {m} outside {{0,1}}"));
        }
        let row: Vec<f64> = cells
            .map(|c| c.parse::<f64>().map_err(|e| format!("row {i}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        if row.len() != spec.dimension() {
            return Err(format!("row {i}: width {} != {}", row.len(), spec.dimension()));
        }
        ds.sample_ids.push(id.to_string());
        ds.membership.push(m);
        ds.rows.push(row);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, m: u8) -> ModelOutputRecord {
        ModelOutputRecord {
            sample_id: id.into(),
            logits: vec![1.5, -0.25],
            confidence: 0.9,
            loss: 0.1,
            embedding: (0..16).map(|i| i as f64 * 0.1).collect(),
            true_label: 0,
            membership: Some(m),
        }
    }

    #[test]
    fn table_dimensions_for_k2_d16() {
        let expect = [1, 1, 2, 3, 3, 4, 18, 19];
        for (f, w) in FeatureId::ALL.iter().zip(expect) {
            assert_eq!(f.dimension(2, 16), w, "{f}");
            let ds = assemble(&[rec("a", 1)], *f, "ND").unwrap();
            assert_eq!(ds.rows[0].len(), w);
            assert_eq!(ds.columns.len(), w);
        }
    }

    #[test]
    fn access_types() {
        for f in FeatureId::ALL {
            let gray = matches!(f, FeatureId::F7 | FeatureId::F8);
            assert_eq!(f.access() == AccessType::GrayBox, gray);
            assert_eq!(check_access(f, AccessPolicy::BlackBoxOnly).is_err(), gray);
            assert!(check_access(f, AccessPolicy::GrayBox).is_ok());
        }
    }

    #[test]
    fn confidence_only_row() {
        let ds = assemble(&[rec("a", 1)], FeatureId::F1, "ND").unwrap();
        assert_eq!(ds.rows[0], vec![0.9]);
    }

    #[test]
    fn column_order_is_logits_confidence_loss_embedding() {
        let ds = assemble(&[rec("a", 1)], FeatureId::F8, "ND").unwrap();
        assert_eq!(&ds.columns[..3], &["logit_0", "logit_1", "loss"]);
        assert_eq!(ds.columns[3], "emb_0");
        let ds = assemble(&[rec("a", 1)], FeatureId::F6, "ND").unwrap();
        assert_eq!(ds.columns, vec!["logit_0", "logit_1", "confidence", "loss"]);
    }

    #[test]
    fn mixed_embedding_lengths_rejected() {
        let mut b = rec("b", 0);
        b.embedding.pop();
        assert!(matches!(
            assemble(&[rec("a", 1), b], FeatureId::F7, "ND"),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn unlabelled_records_rejected() {
        let mut a = rec("a", 1);
        a.membership = None;
        assert!(assemble(&[a], FeatureId::F1, "ND").is_err());
        assert!(assemble(&[], FeatureId::F1, "ND").is_err());
    }

    #[test]
    fn normalizer_two_point_and_constant() {
        let rows = vec![vec![0.0, 5.0], vec![2.0, 5.0]];
        let n = Normalizer::fit(&rows).unwrap();
        assert_eq!(n.apply_row(&rows[0]), vec![-1.0, 0.0]);
        assert_eq!(n.apply_row(&rows[1]), vec![1.0, 0.0]);
    }

    #[test]
    fn tsv_round_trip_is_exact() {
        let mut recs = vec![rec("a", 1), rec("b", 0)];
        recs[1].loss = 1.0 / 3.0;
        recs[1].logits[0] = -1e-300;
        let ds = assemble(&recs, FeatureId::F8, "ALL-10").unwrap();
        let n = fit_normalizer(&ds).unwrap();
        let ds = apply_normalizer(&ds, &n).unwrap();
        let back = parse_dataset(&dataset_to_tsv(&ds)).unwrap();
        assert_eq!(back, ds);
    }
}
