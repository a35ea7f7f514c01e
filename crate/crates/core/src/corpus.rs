//! Labeled code corpora and the four-way shadow/target × member/non-member split.
//!
//! Corpus files are line-delimited JSON, one record per line:
//!
//! ```text
//! {"id":"s0","tokens":["int","x","=","0",";"],"label":0,"strata_tag":"CWE-121","source_tag":"sard"}
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

pub const VUL: u8 = 1;
pub const NONVUL: u8 = 0;

/// One labeled code snippet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSample {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strata_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_tag: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct LoadedCorpus {
    pub samples: Vec<CodeSample>,
    pub rejected: Vec<RejectedLine>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelCounts {
    pub vul: usize,
    pub nonvul: usize,
}

pub fn label_counts(samples: &[CodeSample]) -> LabelCounts {
    samples.iter().fold(LabelCounts::default(), |mut c, s| {
        if s.label == VUL {
            c.vul += 1;
        } else {
            c.nonvul += 1;
        }
        c
    })
}

impl LoadedCorpus {
    pub fn counts(&self) -> LabelCounts {
        label_counts(&self.samples)
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<serde_json::Value>,
    tokens: Option<serde_json::Value>,
    label: Option<serde_json::Value>,
    strata_tag: Option<String>,
    source_tag: Option<String>,
}

enum LineOutcome {
    Sample(CodeSample),
    Rejected(String),
}

fn parse_line(text: &str) -> Result<LineOutcome> {
    let raw: RawRecord = match serde_json::from_str(text) {
        Ok(r) => r,
        Err(e) => return Ok(LineOutcome::Rejected(format!("malformed record: {e}"))),
    };
    let Some(serde_json::Value::String(id)) = raw.id else {
        return Ok(LineOutcome::Rejected("missing or non-string `id`".into()));
    };
    let tokens = match raw.tokens {
        Some(serde_json::Value::Array(items)) => {
            let mut out = Vec::with_capacity(items.len());
            for it in items {
                match it {
                    serde_json::Value::String(s) => out.push(s),
                    _ => return Ok(LineOutcome::Rejected(format!("{id}: non-string token"))),
                }
            }
            out
        }
        _ => return Ok(LineOutcome::Rejected(format!("{id}: missing `tokens` array"))),
    };
    if tokens.is_empty() {
        return Ok(LineOutcome::Rejected(format!("{id}: empty token list")));
    }
    let label = match raw.label {
        None | Some(serde_json::Value::Null) => return Ok(LineOutcome::Rejected(format!("{id}: missing `label`"))),
        Some(serde_json::Value::Number(n)) => match n.as_i64() {
            Some(0) => NONVUL,
            Some(1) => VUL,
            _ => return Err(Error::Validation(format!("sample {id}: label {n} outside {{0,1}}"))),
        },
        Some(other) => return Err(Error::Validation(format!("sample {id}: label {other} outside {{0,1}}"))),
    };
    Ok(LineOutcome::Sample(CodeSample {
        id,
        tokens,
        label,
        strata_tag: raw.strata_tag,
        source_tag: raw.source_tag,
    }))
}

/// Reads a line-delimited corpus. Malformed lines are collected in
/// [`LoadedCorpus::rejected`]; duplicate ids and out-of-range labels abort.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<LoadedCorpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = LoadedCorpus::default();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line)? {
            LineOutcome::Sample(s) => {
                if !seen.insert(s.id.clone()) {
                    return Err(Error::Validation(format!("duplicate sample id `{}`", s.id)));
                }
                out.samples.push(s);
            }
            LineOutcome::Rejected(reason) => out.rejected.push(RejectedLine { line: i + 1, reason }),
        }
    }
    if !out.rejected.is_empty() {
        log::warn!("{}: rejected {} malformed line(s)", path.display(), out.rejected.len());
    }
    Ok(out)
}

pub fn write_corpus(path: impl AsRef<Path>, samples: &[CodeSample]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s).expect("corpus records serialize");
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic corpus

const KEYWORDS: &[&str] = &[
    "strcpy", "strncpy", "int", "char", "if", "else", "for", "while", "return", "(", ")", "{", "}", "[", "]", ";", "=",
    "==", "<", ">", "+", "-", "*", "&", "->", "sizeof", "malloc", "free", "memcpy", "len", "buf", "i",
];

const STRATA: &[&str] = &[
    "CWE-121", "CWE-122", "CWE-124", "CWE-190", "CWE-401", "CWE-415", "CWE-476", "CWE-690",
];

/// Vocabulary entry `i` of a synthetic corpus. Entries 0 and 1 are the
/// vulnerable and safe class markers.
pub fn vocab_token(i: usize) -> String {
    KEYWORDS
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("v{i}"))
}

pub fn vul_marker() -> String {
    vocab_token(0)
}

pub fn safe_marker() -> String {
    vocab_token(1)
}

/// Parameters of the synthetic generator.
///
/// `pattern_strength` is the probability that a sample carries its class
/// marker. With `family_size = n > 0`, samples come in families of `n`
/// vulnerable and `n` fixed variants, mirroring good/bad test-suite functions:
/// every (vulnerable, fixed) pair of a family shares one code fragment, while
/// variants of the same label share nothing beyond the common vocabulary.
/// `identifier_tokens` adds that many identifier tokens to every fragment and
/// `sample_identifiers` adds that many sample-unique identifiers to every
/// sample (independent samples get `identifier_tokens` of them).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    pub n_vul: usize,
    pub n_nonvul: usize,
    pub vocab_size: usize,
    pub pattern_strength: f64,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    pub family_size: usize,
    pub identifier_tokens: usize,
    pub sample_identifiers: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n_vul: 1000,
            n_nonvul: 1000,
            vocab_size: 256,
            pattern_strength: 0.5,
            seed: 0,
            min_len: 12,
            max_len: 40,
            family_size: 0,
            identifier_tokens: 0,
            sample_identifiers: 0,
        }
    }
}

pub fn synth_corpus(
    n_vul: usize,
    n_nonvul: usize,
    vocab_size: usize,
    pattern_strength: f64,
    seed: u64,
) -> Result<Vec<CodeSample>> {
    synth_corpus_with(&SynthOptions {
        n_vul,
        n_nonvul,
        vocab_size,
        pattern_strength,
        seed,
        ..SynthOptions::default()
    })
}

pub fn synth_corpus_with(opts: &SynthOptions) -> Result<Vec<CodeSample>> {
    if opts.n_vul == 0 || opts.n_nonvul == 0 {
        return Err(Error::Argument("n_vul and n_nonvul must be at least 1".into()));
    }
    if opts.vocab_size < 8 {
        return Err(Error::Argument(format!(
            "vocab_size must be at least 8, got {}",
            opts.vocab_size
        )));
    }
    if !(0.0..=1.0).contains(&opts.pattern_strength) {
        return Err(Error::Argument(format!(
            "pattern_strength must lie in [0,1], got {}",
            opts.pattern_strength
        )));
    }
    if opts.min_len == 0 || opts.min_len > opts.max_len {
        return Err(Error::Argument(format!(
            "invalid length range [{}, {}]",
            opts.min_len, opts.max_len
        )));
    }

    let mut rng = rng::stream(opts.seed, "synth", 0);
    let vocab: Vec<String> = (0..opts.vocab_size).map(vocab_token).collect();
    let body = |rng: &mut rng::StreamRng, len: usize| -> Vec<String> {
        (0..len)
            .map(|_| vocab[rng.random_range(2..vocab.len())].clone())
            .collect()
    };
    let mark = |rng: &mut rng::StreamRng, tokens: &mut Vec<String>, label: u8| {
        if rng.random::<f64>() < opts.pattern_strength {
            let pos = rng.random_range(0..tokens.len());
            tokens[pos] = vocab[if label == VUL { 0 } else { 1 }].clone();
        }
    };

    let mut out = Vec::with_capacity(opts.n_vul + opts.n_nonvul);
    let mut next_id = 0usize;
    let mut push = |out: &mut Vec<CodeSample>, tokens: Vec<String>, label: u8, strata: &str| {
        out.push(CodeSample {
            id: format!("syn-{next_id:06}"),
            tokens,
            label,
            strata_tag: Some(strata.to_string()),
            source_tag: Some("synth".into()),
        });
        next_id += 1;
    };

    let n = opts.family_size;
    let families = opts.n_vul.min(opts.n_nonvul).checked_div(n).unwrap_or(0);
    for fam in 0..families {
        let len = rng.random_range(opts.min_len..=opts.max_len);
        let strata = STRATA[rng.random_range(0..STRATA.len())];
        let frag_len = len.div_ceil(n);
        // fragments[i][j] is shared by vulnerable variant i and fixed variant j
        let fragments: Vec<Vec<Vec<String>>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let mut f = body(&mut rng, frag_len);
                        f.extend((0..opts.identifier_tokens).map(|k| format!("f{fam}s{i}x{j}_{k}")));
                        f
                    })
                    .collect()
            })
            .collect();
        for (label, tag) in [(VUL, "b"), (NONVUL, "g")] {
            for v in 0..n {
                let mut tokens: Vec<String> = (0..n)
                    .flat_map(|o| {
                        let (i, j) = if label == VUL { (v, o) } else { (o, v) };
                        fragments[i][j].clone()
                    })
                    .collect();
                tokens.extend(body(&mut rng, 1));
                tokens.extend((0..opts.sample_identifiers).map(|k| format!("f{fam}{tag}{v}_{k}")));
                mark(&mut rng, &mut tokens, label);
                push(&mut out, tokens, label, strata);
            }
        }
    }
    let pairs = families * n;

    let singles =
        std::iter::repeat_n(VUL, opts.n_vul - pairs).chain(std::iter::repeat_n(NONVUL, opts.n_nonvul - pairs));
    for (k, label) in singles.enumerate() {
        let len = rng.random_range(opts.min_len..=opts.max_len);
        let strata = STRATA[rng.random_range(0..STRATA.len())];
        let mut tokens = body(&mut rng, len);
        tokens.extend((0..opts.identifier_tokens).map(|j| format!("fn{k}_{j}")));
        mark(&mut rng, &mut tokens, label);
        push(&mut out, tokens, label, strata);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Partition

/// The four disjoint id sets of a shadow/target × member/non-member split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub shadow_member: Vec<String>,
    pub shadow_nonmember: Vec<String>,
    pub target_member: Vec<String>,
    pub target_nonmember: Vec<String>,
    pub seed: u64,
    pub member_ratio: f64,
    /// How odd-count remainders and majority-label excess were handled.
    pub remainder_log: Vec<String>,
    /// Corpus ids left out of every subset (majority-label excess).
    pub unassigned: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    ShadowMember,
    ShadowNonmember,
    TargetMember,
    TargetNonmember,
}

impl Subset {
    pub const ALL: [Subset; 4] = [
        Subset::ShadowMember,
        Subset::ShadowNonmember,
        Subset::TargetMember,
        Subset::TargetNonmember,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subset::ShadowMember => "shadow_member",
            Subset::ShadowNonmember => "shadow_nonmember",
            Subset::TargetMember => "target_member",
            Subset::TargetNonmember => "target_nonmember",
        }
    }

    pub fn is_member(self) -> bool {
        matches!(self, Subset::ShadowMember | Subset::TargetMember)
    }

    pub fn is_shadow(self) -> bool {
        matches!(self, Subset::ShadowMember | Subset::ShadowNonmember)
    }
}

pub const MIN_PER_LABEL: usize = 4;

impl SplitPlan {
    pub fn ids(&self, subset: Subset) -> &[String] {
        match subset {
            Subset::ShadowMember => &self.shadow_member,
            Subset::ShadowNonmember => &self.shadow_nonmember,
            Subset::TargetMember => &self.target_member,
            Subset::TargetNonmember => &self.target_nonmember,
        }
    }

    fn ids_mut(&mut self, subset: Subset) -> &mut Vec<String> {
        match subset {
            Subset::ShadowMember => &mut self.shadow_member,
            Subset::ShadowNonmember => &mut self.shadow_nonmember,
            Subset::TargetMember => &mut self.target_member,
            Subset::TargetNonmember => &mut self.target_nonmember,
        }
    }

    /// Resolves a subset against the corpus, in plan order.
    pub fn samples<'a>(&self, subset: Subset, corpus: &'a [CodeSample]) -> Result<Vec<&'a CodeSample>> {
        let index: HashMap<&str, &CodeSample> = corpus.iter().map(|s| (s.id.as_str(), s)).collect();
        self.ids(subset)
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("plan id `{id}` not in corpus")))
            })
            .collect()
    }

    /// Checks disjointness, membership in the corpus and per-subset label balance.
    pub fn validate(&self, corpus: &[CodeSample]) -> Result<()> {
        if !(self.member_ratio > 0.0 && self.member_ratio < 1.0) {
            return Err(Error::Validation(format!(
                "member_ratio {} outside (0,1)",
                self.member_ratio
            )));
        }
        let labels: HashMap<&str, u8> = corpus.iter().map(|s| (s.id.as_str(), s.label)).collect();
        let mut seen: HashMap<&str, Subset> = HashMap::new();
        for subset in Subset::ALL {
            let mut counts = LabelCounts::default();
            for id in self.ids(subset) {
                let Some(&label) = labels.get(id.as_str()) else {
                    return Err(Error::Validation(format!("{}: id `{id}` not in corpus", subset.name())));
                };
                if let Some(prev) = seen.insert(id.as_str(), subset) {
                    return Err(Error::Validation(format!(
                        "id `{id}` appears in both {} and {}",
                        prev.name(),
                        subset.name()
                    )));
                }
                if label == VUL {
                    counts.vul += 1;
                } else {
                    counts.nonvul += 1;
                }
            }
            if counts.vul.abs_diff(counts.nonvul) > 1 {
                return Err(Error::Validation(format!(
                    "{}: label counts {} vs {} differ by more than one",
                    subset.name(),
                    counts.vul,
                    counts.nonvul
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self).expect("plan serializes");
        write_file(path.as_ref(), &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e.to_string()))
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Splits the corpus into the four subsets.
///
/// Per label, the majority-label excess is set aside so both labels contribute
/// equally; each label is then halved between shadow and target (an odd
/// remainder goes to a side chosen by a seeded coin flip), and each side is cut
/// into `member_ratio` members and the rest non-members. The result depends
/// only on the corpus ids, labels, `member_ratio` and `seed`.
pub fn partition(corpus: &[CodeSample], member_ratio: f64, seed: u64) -> Result<SplitPlan> {
    if !(member_ratio > 0.0 && member_ratio < 1.0) {
        return Err(Error::Argument(format!(
            "member_ratio must lie in (0,1), got {member_ratio}"
        )));
    }
    let mut by_label: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, s) in corpus.iter().enumerate() {
        by_label[usize::from(s.label)].push(i);
    }
    for label in [VUL, NONVUL] {
        let count = by_label[usize::from(label)].len();
        if count < MIN_PER_LABEL {
            return Err(Error::Partition {
                label,
                count,
                needed: MIN_PER_LABEL,
            });
        }
    }
    let per_label = by_label[0].len().min(by_label[1].len());

    let mut plan = SplitPlan {
        shadow_member: Vec::new(),
        shadow_nonmember: Vec::new(),
        target_member: Vec::new(),
        target_nonmember: Vec::new(),
        seed,
        member_ratio,
        remainder_log: Vec::new(),
        unassigned: Vec::new(),
    };
    let mut assignment: Vec<Option<Subset>> = vec![None; corpus.len()];

    for label in [VUL, NONVUL] {
        let mut idx = by_label[usize::from(label)].clone();
        let mut rng = rng::stream(seed, "partition", u64::from(label));
        idx.shuffle(&mut rng);
        if idx.len() > per_label {
            let excess = idx.split_off(per_label);
            plan.remainder_log.push(format!(
                "label {label}: {} majority-label sample(s) left unassigned for label balance",
                excess.len()
            ));
            plan.unassigned.extend(excess.iter().map(|&i| corpus[i].id.clone()));
        }
        let half = idx.len() / 2;
        let shadow_len = if idx.len() % 2 == 1 {
            let to_shadow = rng.random_bool(0.5);
            plan.remainder_log.push(format!(
                "label {label}: odd remainder `{}` assigned to {}",
                corpus[idx[idx.len() - 1]].id,
                if to_shadow { "shadow" } else { "target" }
            ));
            if to_shadow {
                half + 1
            } else {
                half
            }
        } else {
            half
        };
        // The odd remainder is the last shuffled index; it lands in the shadow
        // block only when the shadow side is the longer one.
        let (shadow, target): (Vec<usize>, Vec<usize>) = if shadow_len > half {
            let mut s = idx[..half].to_vec();
            s.push(idx[idx.len() - 1]);
            (s, idx[half..idx.len() - 1].to_vec())
        } else {
            (idx[..half].to_vec(), idx[half..].to_vec())
        };
        for (side, members, nonmembers) in [
            (shadow, Subset::ShadowMember, Subset::ShadowNonmember),
            (target, Subset::TargetMember, Subset::TargetNonmember),
        ] {
            let n_member = round_half_up(side.len() as f64 * member_ratio).min(side.len());
            for (k, &i) in side.iter().enumerate() {
                assignment[i] = Some(if k < n_member { members } else { nonmembers });
            }
        }
    }

    for (i, a) in assignment.iter().enumerate() {
        if let Some(subset) = a {
            let id = corpus[i].id.clone();
            plan.ids_mut(*subset).push(id);
        }
    }
    Ok(plan)
}

// ---------------------------------------------------------------------------
// Strata summary

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrataRow {
    pub strata: String,
    pub shadow_count: usize,
    pub shadow_vul: usize,
    /// Label-1 fraction of shadow members within this strata.
    pub shadow_ratio: f64,
    pub target_count: usize,
    pub target_vul: usize,
    pub target_ratio: f64,
}

pub const UNTAGGED: &str = "untagged";

/// Per-strata label-1 ratios of shadow members vs target members.
pub fn strata_summary(plan: &SplitPlan, corpus: &[CodeSample]) -> Result<Vec<StrataRow>> {
    let mut table: BTreeMap<String, [usize; 4]> = BTreeMap::new();
    for (subset, slot) in [(Subset::ShadowMember, 0), (Subset::TargetMember, 2)] {
        for s in plan.samples(subset, corpus)? {
            let key = s.strata_tag.clone().unwrap_or_else(|| UNTAGGED.to_string());
            let row = table.entry(key).or_default();
            row[slot] += 1;
            if s.label == VUL {
                row[slot + 1] += 1;
            }
        }
    }
    let ratio = |vul: usize, n: usize| if n == 0 { 0.0 } else { vul as f64 / n as f64 };
    Ok(table
        .into_iter()
        .map(|(strata, [sn, sv, tn, tv])| StrataRow {
            strata,
            shadow_count: sn,
            shadow_vul: sv,
            shadow_ratio: ratio(sv, sn),
            target_count: tn,
            target_vul: tv,
            target_ratio: ratio(tv, tn),
        })
        .collect())
}

pub fn strata_tsv(rows: &[StrataRow]) -> String {
    let mut out =
        String::from("strata\tshadow_count\tshadow_vul\tshadow_ratio\ttarget_count\ttarget_vul\ttarget_ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.strata, r.shadow_count, r.shadow_vul, r.shadow_ratio, r.target_count, r.target_vul, r.target_ratio
        ));
    }
    out
}
