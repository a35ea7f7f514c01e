//! Stage-by-stage orchestration from one seeded configuration.
//!
//! Every stage reads only files written by earlier stages under the output
//! directory, so any stage can be rerun in isolation:
//!
//! | stage      | writes                                                   |
//! |------------|----------------------------------------------------------|
//! | `synth`    | `corpus.jsonl`                                           |
//! | `split`    | `plan.json`, `strata.tsv`                                |
//! | `train-vp` | `vp/shadow.json`, `vp/target.json`, `vp/metrics.json`    |
//! | `extract`  | `records/<subset>.jsonl`                                 |
//! | `defend`   | `defended/<defense>/{shadow,target}.jsonl`               |
//! | `attack`   | `datasets/…`, `attacks/…`, `grid/<defense>.json`         |
//! | `evaluate` | `report.json`, `report.tsv`, `distributions.tsv`         |
//! | `report`   | `report.txt`                                             |
//!
//! Stage seeds are `derive_seed(seed, stage, 0)` of the global seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack_grid, Architecture, AttackHyperparams, GridCell};
use crate::corpus::{
    self, partition, strata_summary, strata_tsv, write_file, CodeSample, SplitPlan, Subset, SynthOptions,
};
use crate::defense::memguard::{memguard_with, train_defense_classifier};
use crate::defense::{default_loss_clamp, defend_records, DefendedRecord, DefenseConfig, DefenseKind, MemGuardParams};
use crate::eval::{
    balanced_indices, distribution_summary, ClassificationMetrics, EvalReport, FiveNumber, MetricSet, RecordField,
};
use crate::features::{self, check_access, AccessPolicy, FeatureId, Normalizer};
use crate::math::argmax;
use crate::par::{self, Exec};
use crate::rng;
use crate::surrogate::{evaluate_vp, train_vp, ModelOutputRecord, VpHyperparams, VpModel};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Line-delimited corpus file; when absent a synthetic corpus is generated.
    pub path: Option<PathBuf>,
    pub synth: SynthOptions,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: None,
            synth: SynthOptions {
                n_vul: 1000,
                n_nonvul: 1000,
                vocab_size: 256,
                pattern_strength: 0.0,
                family_size: 2,
                identifier_tokens: 2,
                sample_identifiers: 0,
                ..SynthOptions::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub architectures: Vec<Architecture>,
    pub mlp: AttackHyperparams,
    pub cnn: AttackHyperparams,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            architectures: Architecture::ALL.to_vec(),
            mlp: AttackHyperparams::default(),
            cnn: AttackHyperparams {
                architecture: Architecture::Cnn,
                ..AttackHyperparams::default()
            },
        }
    }
}

impl AttackConfig {
    pub fn hyperparams(&self, arch: Architecture) -> &AttackHyperparams {
        match arch {
            Architecture::Mlp => &self.mlp,
            Architecture::Cnn => &self.cnn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    /// Defense labels (`ND`, `MG`, `LM`, `LsM`, `LS-3`, `ALL-10`, …).
    pub suite: Vec<String>,
    /// LsM bounds; `None` uses `(0, p95)` of shadow-member losses.
    pub loss_clamp: Option<(f64, f64)>,
    /// Also defend the shadow outputs the attack is trained on.
    pub defend_shadow: bool,
    pub mg: MemGuardParams,
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self {
            suite: DefenseConfig::standard_suite()
                .iter()
                .map(DefenseConfig::label)
                .collect(),
            loss_clamp: None,
            defend_shadow: true,
            mg: MemGuardParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub member_ratio: f64,
    pub access: AccessPolicy,
    pub normalize: bool,
    /// Start shadow and target surrogates from the same initial parameters.
    pub shared_vp_init: bool,
    pub repeats: usize,
    /// Features attacked on undefended outputs.
    pub features: Vec<FeatureId>,
    /// Features attacked under every other defense.
    pub defense_features: Vec<FeatureId>,
    pub corpus: CorpusConfig,
    pub vp: VpHyperparams,
    pub attack: AttackConfig,
    pub defense: DefenseSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 20240601,
            out_dir: None,
            member_ratio: 0.7,
            access: AccessPolicy::GrayBox,
            normalize: true,
            shared_vp_init: true,
            repeats: 3,
            features: FeatureId::ALL.to_vec(),
            defense_features: vec![FeatureId::F6],
            corpus: CorpusConfig::default(),
            vp: VpHyperparams {
                vocab_hash_size: 65536,
                early_stop_patience: None,
                ..VpHyperparams::default()
            },
            attack: AttackConfig::default(),
            defense: DefenseSection::default(),
        }
    }
}

impl PipelineConfig {
    /// The reference desk-scale configuration.
    pub fn reference() -> Self {
        Self::default()
    }

    /// Parses a config file; keys it leaves out keep their reference values,
    /// including keys inside partially specified sections.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(Self::reference()).expect("config serializes");
        merge_tables(&mut merged, user);
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.member_ratio > 0.0 && self.member_ratio < 1.0) {
            return Err(Error::Config(format!(
                "member_ratio {} outside (0,1)",
                self.member_ratio
            )));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.features.is_empty() {
            return Err(Error::Config("no features selected".into()));
        }
        if self.attack.architectures.is_empty() {
            return Err(Error::Config("no attack architectures selected".into()));
        }
        for f in self.features.iter().chain(&self.defense_features) {
            check_access(*f, self.access)?;
        }
        self.vp.validate()?;
        for arch in &self.attack.architectures {
            self.attack.hyperparams(*arch).validate()?;
        }
        self.defense_configs()?;
        Ok(())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        rng::derive_seed(self.seed, stage, 0)
    }

    /// Parsed defense suite with ND first whenever any defense is requested.
    pub fn defense_configs(&self) -> Result<Vec<DefenseConfig>> {
        let mut out: Vec<DefenseConfig> = Vec::new();
        for label in &self.defense.suite {
            let mut cfg: DefenseConfig = label.parse()?;
            cfg.seed = self.stage_seed("defense");
            cfg.loss_clamp = self.defense.loss_clamp;
            cfg.mg = MemGuardParams {
                seed: self.stage_seed("memguard"),
                ..self.defense.mg.clone()
            };
            cfg.validate()?;
            if out.iter().any(|c| c.label() == cfg.label()) {
                return Err(Error::Config(format!("defense `{label}` listed twice")));
            }
            out.push(cfg);
        }
        if !out.iter().any(|c| c.kind == DefenseKind::ND) {
            out.insert(0, DefenseConfig::default());
        }
        out.sort_by_key(|c| c.kind != DefenseKind::ND);
        Ok(out)
    }

    fn vp_hyperparams(&self, role: &str) -> VpHyperparams {
        VpHyperparams {
            seed: self.stage_seed(&format!("vp/{role}")),
            init_seed: self.shared_vp_init.then(|| self.stage_seed("vp/init")),
            ..self.vp.clone()
        }
    }

    fn features_for(&self, defense: &DefenseConfig) -> &[FeatureId] {
        if defense.kind == DefenseKind::ND {
            &self.features
        } else {
            &self.defense_features
        }
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Artifact layout

pub const ROLES: [&str; 2] = ["shadow", "target"];

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }
    pub fn plan(&self) -> PathBuf {
        self.root.join("plan.json")
    }
    pub fn strata(&self) -> PathBuf {
        self.root.join("strata.tsv")
    }
    pub fn vp(&self, role: &str) -> PathBuf {
        self.root.join("vp").join(format!("{role}.json"))
    }
    pub fn vp_metrics(&self) -> PathBuf {
        self.root.join("vp").join("metrics.json")
    }
    pub fn records(&self, subset: Subset) -> PathBuf {
        self.root.join("records").join(format!("{}.jsonl", subset.name()))
    }
    pub fn defended(&self, defense: &str, role: &str) -> PathBuf {
        self.root.join("defended").join(defense).join(format!("{role}.jsonl"))
    }
    pub fn defense_summary(&self) -> PathBuf {
        self.root.join("defended").join("summary.json")
    }
    pub fn dataset(&self, defense: &str, role: &str, feature: FeatureId) -> PathBuf {
        self.root
            .join("datasets")
            .join(defense)
            .join(format!("{role}_{feature}.tsv"))
    }
    pub fn attack_model(&self, defense: &str, feature: FeatureId, arch: Architecture) -> PathBuf {
        self.root
            .join("attacks")
            .join(defense)
            .join(format!("{feature}_{arch}.json"))
    }
    pub fn grid(&self, defense: &str) -> PathBuf {
        self.root.join("grid").join(format!("{defense}.json"))
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_tsv(&self) -> PathBuf {
        self.root.join("report.tsv")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn distributions(&self) -> PathBuf {
        self.root.join("distributions.tsv")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_records(path: impl AsRef<Path>, records: &[ModelOutputRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    write_file(path.as_ref(), &out)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ModelOutputRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1))))
        .collect()
}

// ---------------------------------------------------------------------------
// Stages

fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

pub fn stage_synth(cfg: &PipelineConfig, lay: &Layout) -> Result<Vec<CodeSample>> {
    staged(
        "synth",
        (|| {
            let opts = SynthOptions {
                seed: cfg.stage_seed("synth"),
                ..cfg.corpus.synth.clone()
            };
            let samples = corpus::synth_corpus_with(&opts)?;
            corpus::write_corpus(lay.corpus(), &samples)?;
            info!("synth: {} samples -> {}", samples.len(), lay.corpus().display());
            Ok(samples)
        })(),
    )
}

/// The corpus the split stage works on: the configured file or the synthesized one.
pub fn load_pipeline_corpus(cfg: &PipelineConfig, lay: &Layout) -> Result<Vec<CodeSample>> {
    let path = cfg.corpus.path.clone().unwrap_or_else(|| lay.corpus());
    let loaded = corpus::load_corpus(&path)?;
    for r in &loaded.rejected {
        warn!("{}: line {} rejected: {}", path.display(), r.line, r.reason);
    }
    Ok(loaded.samples)
}

pub fn stage_split(cfg: &PipelineConfig, lay: &Layout) -> Result<SplitPlan> {
    staged(
        "split",
        (|| {
            let corpus = load_pipeline_corpus(cfg, lay)?;
            let plan = partition(&corpus, cfg.member_ratio, cfg.stage_seed("split"))?;
            plan.validate(&corpus)?;
            for line in &plan.remainder_log {
                info!("split: {line}");
            }
            plan.save(lay.plan())?;
            write_file(&lay.strata(), strata_tsv(&strata_summary(&plan, &corpus)?).as_bytes())?;
            Ok(plan)
        })(),
    )
}

fn load_plan(cfg: &PipelineConfig, lay: &Layout) -> Result<(Vec<CodeSample>, SplitPlan)> {
    let corpus = load_pipeline_corpus(cfg, lay)?;
    let plan = SplitPlan::load(lay.plan())?;
    plan.validate(&corpus)?;
    Ok((corpus, plan))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VpSummary {
    pub role: String,
    /// Metrics on the model's own members (its training set).
    pub train: ClassificationMetrics,
    /// Metrics on the model's non-members.
    pub test: ClassificationMetrics,
    pub epochs: usize,
    pub final_train_loss: f64,
}

fn role_subsets(role: &str) -> (Subset, Subset) {
    if role == "shadow" {
        (Subset::ShadowMember, Subset::ShadowNonmember)
    } else {
        (Subset::TargetMember, Subset::TargetNonmember)
    }
}

pub fn stage_train_vp(cfg: &PipelineConfig, lay: &Layout, exec: Exec) -> Result<Vec<VpSummary>> {
    staged(
        "train-vp",
        (|| {
            let (corpus, plan) = load_plan(cfg, lay)?;
            let summaries = par::try_map(exec, &ROLES, |role| -> Result<VpSummary> {
                let (m, n) = role_subsets(role);
                let train: Vec<CodeSample> = plan.samples(m, &corpus)?.into_iter().cloned().collect();
                let valid: Vec<CodeSample> = plan.samples(n, &corpus)?.into_iter().cloned().collect();
                let model = train_vp(&train, &valid, &cfg.vp_hyperparams(role))?;
                model.save(lay.vp(role))?;
                Ok(VpSummary {
                    role: role.to_string(),
                    train: evaluate_vp(&model, &train)?,
                    test: evaluate_vp(&model, &valid)?,
                    epochs: model.log.len(),
                    final_train_loss: model.log.last().map_or(f64::NAN, |l| l.train_loss),
                })
            })?;
            write_json(&lay.vp_metrics(), &summaries)?;
            Ok(summaries)
        })(),
    )
}

pub fn stage_extract(cfg: &PipelineConfig, lay: &Layout, exec: Exec) -> Result<()> {
    staged(
        "extract",
        (|| {
            let (corpus, plan) = load_plan(cfg, lay)?;
            for role in ROLES {
                let model = VpModel::load(lay.vp(role))?;
                let (m, n) = role_subsets(role);
                for (subset, membership) in [(m, 1), (n, 0)] {
                    let samples = plan.samples(subset, &corpus)?;
                    let records = features::extract(&model, &samples, membership, exec)?;
                    write_records(lay.records(subset), &records)?;
                }
            }
            Ok(())
        })(),
    )
}

/// Membership-balanced records of one model, in a seeded but defense-independent selection.
pub fn balanced_records(cfg: &PipelineConfig, lay: &Layout, role: &str) -> Result<Vec<ModelOutputRecord>> {
    let (m, n) = role_subsets(role);
    let mut records = read_records(lay.records(m))?;
    records.extend(read_records(lay.records(n))?);
    let membership: Vec<u8> = records.iter().map(|r| r.membership.unwrap_or(0)).collect();
    let keep = balanced_indices(&membership, &mut rng::stream(cfg.seed, "balance", role_index(role)));
    Ok(keep.into_iter().map(|i| records[i].clone()).collect())
}

fn role_index(role: &str) -> u64 {
    u64::from(role != "shadow")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DefenseSummary {
    pub defense: String,
    pub records: usize,
    pub flagged: usize,
    /// Records whose exposed argmax differs from the original one.
    pub argmax_changed: usize,
    /// Records whose reported label differs from the undefended prediction.
    pub label_changed: usize,
    pub loss_clamp: Option<(f64, f64)>,
}

fn summarize(defense: &str, original: &[ModelOutputRecord], defended: &[DefendedRecord]) -> DefenseSummary {
    let mut s = DefenseSummary {
        defense: defense.to_string(),
        records: defended.len(),
        ..Default::default()
    };
    for (o, d) in original.iter().zip(defended) {
        s.flagged += usize::from(d.flagged);
        s.argmax_changed += usize::from(argmax(&d.exposed.logits) != argmax(&o.logits));
        s.label_changed += usize::from(d.predicted_label != o.predicted_label());
    }
    s
}

fn passthrough(r: &ModelOutputRecord) -> DefendedRecord {
    DefendedRecord {
        predicted_label: r.predicted_label(),
        exposed: r.clone(),
        flagged: false,
    }
}

pub fn stage_defend(cfg: &PipelineConfig, lay: &Layout, exec: Exec) -> Result<Vec<DefenseSummary>> {
    staged(
        "defend",
        (|| {
            let shadow = balanced_records(cfg, lay, "shadow")?;
            let target = balanced_records(cfg, lay, "target")?;
            let mut summaries = Vec::new();
            for mut dcfg in cfg.defense_configs()? {
                let label = dcfg.label();
                if dcfg.kind == DefenseKind::LsM && dcfg.loss_clamp.is_none() {
                    let losses: Vec<f64> = shadow
                        .iter()
                        .filter(|r| r.membership == Some(1))
                        .map(|r| r.loss)
                        .collect();
                    dcfg.loss_clamp = Some(default_loss_clamp(&losses)?);
                }
                let defended: Vec<(Vec<DefendedRecord>, Vec<DefendedRecord>)> = if dcfg.kind == DefenseKind::MG {
                    let clf = train_defense_classifier(&shadow, &dcfg.mg)?;
                    vec![(
                        memguard_with(&clf, &shadow, &dcfg.mg, exec)?,
                        memguard_with(&clf, &target, &dcfg.mg, exec)?,
                    )]
                } else {
                    vec![(
                        defend_records(&shadow, &dcfg, 0, exec)?,
                        defend_records(&target, &dcfg, 0, exec)?,
                    )]
                };
                let (mut ds, dt) = defended.into_iter().next().expect("one pair");
                if !cfg.defense.defend_shadow {
                    ds = shadow.iter().map(passthrough).collect();
                }
                for (role, original, d) in [("shadow", &shadow, &ds), ("target", &target, &dt)] {
                    let exposed: Vec<ModelOutputRecord> = d.iter().map(|r| r.exposed.clone()).collect();
                    write_records(lay.defended(&label, role), &exposed)?;
                    let mut s = summarize(&format!("{label}/{role}"), original, d);
                    s.loss_clamp = dcfg.loss_clamp.filter(|_| dcfg.kind == DefenseKind::LsM);
                    if s.label_changed > 0 {
                        return Err(Error::Evaluation(format!(
                            "{label}: {} reported labels changed",
                            s.label_changed
                        )));
                    }
                    summaries.push(s);
                }
                info!("defend: {label} done");
            }
            write_json(&lay.defense_summary(), &summaries)?;
            Ok(summaries)
        })(),
    )
}

pub fn stage_attack(cfg: &PipelineConfig, lay: &Layout, exec: Exec) -> Result<Vec<GridCell>> {
    staged(
        "attack",
        (|| {
            let mut all = Vec::new();
            for dcfg in cfg.defense_configs()? {
                let label = dcfg.label();
                let shadow = read_records(lay.defended(&label, "shadow"))?;
                let target = read_records(lay.defended(&label, "target"))?;
                let mut sds = Vec::new();
                let mut tds = Vec::new();
                for &f in cfg.features_for(&dcfg) {
                    check_access(f, cfg.access)?;
                    let mut s = features::assemble(&shadow, f, &label)?;
                    let mut t = features::assemble(&target, f, &label)?;
                    if cfg.normalize {
                        let stats: Normalizer = features::fit_normalizer(&s)?;
                        s = s.normalized(&stats)?;
                        t = t.normalized(&stats)?;
                    }
                    features::write_dataset(lay.dataset(&label, "shadow", f), &s)?;
                    features::write_dataset(lay.dataset(&label, "target", f), &t)?;
                    sds.push(s);
                    tds.push(t);
                }
                let mut cells = Vec::new();
                for &arch in &cfg.attack.architectures {
                    let hp = AttackHyperparams {
                        architecture: arch,
                        seed: cfg.stage_seed("attack"),
                        ..cfg.attack.hyperparams(arch).clone()
                    };
                    for (cell, model) in run_attack_grid(&sds, &tds, &[arch], &hp, cfg.repeats, exec)? {
                        model.save(lay.attack_model(&label, cell.feature, arch))?;
                        cells.push(cell);
                    }
                }
                cells.sort_by_key(|c| (c.feature, c.architecture));
                write_json(&lay.grid(&label), &cells)?;
                info!("attack: {label}: {} cells", cells.len());
                all.extend(cells);
            }
            Ok(all)
        })(),
    )
}

// ---------------------------------------------------------------------------
// Report

pub const MODEL_TAG: &str = "surrogate";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_tag: String,
    pub feature: FeatureId,
    pub architecture: Architecture,
    pub defense: String,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub model_tag: String,
    pub field: RecordField,
    pub member: FiveNumber,
    pub nonmember: FiveNumber,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub vp: Vec<VpSummary>,
    pub rows: Vec<ReportRow>,
    pub distributions: Vec<DistributionRow>,
    pub defenses: Vec<DefenseSummary>,
}

impl Report {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    pub fn row(&self, feature: FeatureId, arch: Architecture, defense: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.feature == feature && r.architecture == arch && r.defense == defense)
    }

    /// Best mean AUC over architectures for one feature under one defense.
    pub fn best_auc(&self, feature: FeatureId, defense: &str) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.feature == feature && r.defense == defense)
            .map(|r| r.report.mean.auc)
            .reduce(f64::max)
    }
}

pub fn stage_evaluate(cfg: &PipelineConfig, lay: &Layout) -> Result<Report> {
    staged(
        "evaluate",
        (|| {
            let vp: Vec<VpSummary> = read_json(&lay.vp_metrics())?;
            let mut rows = Vec::new();
            for dcfg in cfg.defense_configs()? {
                let cells: Vec<GridCell> = read_json(&lay.grid(&dcfg.label()))?;
                rows.extend(cells.into_iter().map(|c| ReportRow {
                    model_tag: MODEL_TAG.to_string(),
                    feature: c.feature,
                    architecture: c.architecture,
                    defense: c.defense,
                    report: c.report,
                }));
            }
            let mut distributions = Vec::new();
            for role in ROLES {
                let (m, n) = role_subsets(role);
                let mut records = read_records(lay.records(m))?;
                records.extend(read_records(lay.records(n))?);
                for field in RecordField::ALL {
                    let s = distribution_summary(&records, field)?;
                    distributions.push(DistributionRow {
                        model_tag: role.to_string(),
                        field,
                        member: s.member,
                        nonmember: s.nonmember,
                    });
                }
            }
            let defenses: Vec<DefenseSummary> = read_json(&lay.defense_summary())?;
            let report = Report {
                seed: cfg.seed,
                vp,
                rows,
                distributions,
                defenses,
            };
            write_json(&lay.report_json(), &report)?;
            write_file(&lay.report_tsv(), report_tsv(&report.rows).as_bytes())?;
            write_file(
                &lay.distributions(),
                distributions_tsv(&report.distributions).as_bytes(),
            )?;
            Ok(report)
        })(),
    )
}

const METRICS: [&str; 5] = ["accuracy", "precision", "recall", "f1", "auc"];

fn metric_values(m: &MetricSet) -> [f64; 5] {
    [m.accuracy, m.precision, m.recall, m.f1, m.auc]
}

fn metric_set(v: &[f64]) -> MetricSet {
    MetricSet {
        accuracy: v[0],
        precision: v[1],
        recall: v[2],
        f1: v[3],
        auc: v[4],
    }
}

/// Tab-separated export: one line per report row, means then standard deviations.
pub fn report_tsv(rows: &[ReportRow]) -> String {
    let mut out = String::from("model_tag\tfeature\tarchitecture\tdefense\tn_members\tn_nonmembers");
    for m in METRICS {
        write!(out, "\t{m}").unwrap();
    }
    for m in METRICS {
        write!(out, "\t{m}_sd").unwrap();
    }
    out.push_str("\tcentroid_distance\truns\n");
    for r in rows {
        let e = &r.report;
        write!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.model_tag, r.feature, r.architecture, r.defense, e.n_members, e.n_nonmembers
        )
        .unwrap();
        for v in metric_values(&e.mean).iter().chain(&metric_values(&e.stddev)) {
            write!(out, "\t{v}").unwrap();
        }
        let cd = e.centroid_distance.map_or(String::new(), |c| c.to_string());
        writeln!(out, "\t{cd}\t{}", e.runs.len()).unwrap();
    }
    out
}

/// Parses [`report_tsv`] output back into rows (per-run values are not exported).
pub fn parse_report_tsv(text: &str) -> Result<Vec<ReportRow>> {
    let bad = |i: usize, m: String| Error::Validation(format!("report export line {}: {m}", i + 1));
    let mut lines = text.lines().enumerate();
    lines
        .next()
        .ok_or_else(|| Error::Validation("empty report export".into()))?;
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 18 {
            return Err(bad(i, format!("{} fields, expected 18", c.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i, e.to_string()));
        let count = |s: &str| s.parse::<usize>().map_err(|e| bad(i, e.to_string()));
        let vals: Vec<f64> = c[6..16].iter().map(|s| num(s)).collect::<Result<_>>()?;
        rows.push(ReportRow {
            model_tag: c[0].to_string(),
            feature: c[1].parse()?,
            architecture: c[2].parse()?,
            defense: c[3].to_string(),
            report: EvalReport {
                mean: metric_set(&vals[..5]),
                stddev: metric_set(&vals[5..]),
                runs: Vec::new(),
                n_members: count(c[4])?,
                n_nonmembers: count(c[5])?,
                centroid_distance: if c[16].is_empty() { None } else { Some(num(c[16])?) },
            },
        });
    }
    Ok(rows)
}

pub fn distributions_tsv(rows: &[DistributionRow]) -> String {
    let mut out = String::from("model_tag\tfield\tclass\tn\tmin\tq1\tmedian\tq3\tmax\tmean\n");
    for r in rows {
        for (class, s) in [("member", &r.member), ("nonmember", &r.nonmember)] {
            writeln!(
                out,
                "{}\t{}\t{class}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.model_tag,
                r.field.name(),
                s.n,
                s.min,
                s.q1,
                s.median,
                s.q3,
                s.max,
                s.mean
            )
            .unwrap();
        }
    }
    out
}

/// Column-aligned table grouped by defense; `*` marks the highest-AUC
/// feature of each (model, architecture, defense) group.
pub fn render_table(report: &Report) -> String {
    let mut defense_order: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !defense_order.contains(&r.defense.as_str()) {
            defense_order.push(&r.defense);
        }
    }
    let mut best: BTreeMap<(String, Architecture, String), f64> = BTreeMap::new();
    for r in &report.rows {
        let e = best
            .entry((r.model_tag.clone(), r.architecture, r.defense.clone()))
            .or_insert(f64::NEG_INFINITY);
        *e = e.max(r.report.mean.auc);
    }
    let mut rows: Vec<&ReportRow> = report.rows.iter().collect();
    rows.sort_by_key(|r| {
        (
            defense_order.iter().position(|d| *d == r.defense),
            r.model_tag.clone(),
            r.architecture,
            r.feature,
        )
    });
    let mut out = String::new();
    for v in &report.vp {
        writeln!(
            out,
            "VP {:<6} train acc {:.4} f1 {:.4} | held-out acc {:.4} f1 {:.4} | epochs {}",
            v.role, v.train.accuracy, v.train.f1, v.test.accuracy, v.test.f1, v.epochs
        )
        .unwrap();
    }
    out.push('\n');
    writeln!(
        out,
        "{:<8} {:<10} {:<4} {:<8} {:>8} {:>9} {:>8} {:>8} {:>8} {:>8} {:>9}",
        "defense", "model", "arch", "feature", "accuracy", "precision", "recall", "f1", "auc", "auc_sd", "centroid"
    )
    .unwrap();
    for r in rows {
        let e = &r.report;
        let top = best[&(r.model_tag.clone(), r.architecture, r.defense.clone())];
        let mark = if e.mean.auc == top { "*" } else { " " };
        writeln!(
            out,
            "{:<8} {:<10} {:<4} {:<8} {:>8.4} {:>9.4} {:>8.4} {:>8.4} {:>7.4}{mark} {:>8.4} {:>9}",
            r.defense,
            r.model_tag,
            r.architecture.to_string(),
            format!("{}", r.feature),
            e.mean.accuracy,
            e.mean.precision,
            e.mean.recall,
            e.mean.f1,
            e.mean.auc,
            e.stddev.auc,
            e.centroid_distance.map_or("-".to_string(), |c| format!("{c:.4}")),
        )
        .unwrap();
    }
    out
}

pub fn stage_report(lay: &Layout) -> Result<String> {
    staged(
        "report",
        (|| {
            let report = Report::load(lay.report_json())?;
            let table = render_table(&report);
            write_file(&lay.report_txt(), table.as_bytes())?;
            Ok(table)
        })(),
    )
}

/// Runs every stage in order and returns the final report.
pub fn run_all(cfg: &PipelineConfig, out: &Path, exec: Exec) -> Result<Report> {
    cfg.validate()?;
    let lay = Layout::new(out);
    if cfg.corpus.path.is_none() {
        stage_synth(cfg, &lay)?;
    }
    stage_split(cfg, &lay)?;
    stage_train_vp(cfg, &lay, exec)?;
    stage_extract(cfg, &lay, exec)?;
    stage_defend(cfg, &lay, exec)?;
    stage_attack(cfg, &lay, exec)?;
    let report = stage_evaluate(cfg, &lay)?;
    stage_report(&lay)?;
    Ok(report)
}
