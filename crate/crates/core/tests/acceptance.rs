//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;

use memaudit::attack::Architecture;
use memaudit::corpus::{partition, synth_corpus};
use memaudit::defense::memguard::memguard_with;
use memaudit::defense::{
    default_loss_clamp, defend_records, train_defense_classifier, DefenseConfig, DefenseKind, MemGuardParams,
};
use memaudit::eval::{auc, f1_score, RecordField};
use memaudit::features::{assemble, FeatureId};
use memaudit::par::Exec;
use memaudit::pipeline::{run_all, PipelineConfig, Report};
use memaudit::rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, detail: String) -> Outcome {
    let t = start.elapsed();
    ensure(
        t < limit,
        format!("{detail}; {:.1}s (limit {}s)", t.as_secs_f64(), limit.as_secs()),
    )
}

fn widths() -> Outcome {
    let start = Instant::now();
    let mut r = rng::seeded(1);
    let records: Vec<_> = (0..8).map(|i| common::random_record(&mut r, i, 16)).collect();
    let want = [1, 1, 2, 3, 3, 4, 18, 19];
    let mut got = Vec::new();
    for f in FeatureId::ALL {
        let ds = assemble(&records, f, "ND").map_err(|e| e.to_string())?;
        got.push(ds.width());
    }
    if got != want {
        return Err(format!("widths {got:?}, expected {want:?}"));
    }
    within(Duration::from_secs(1), start, format!("widths {got:?}"))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, errs) in [
        ("vp", common::vp_probes(24, 101)),
        ("mlp", common::mlp_probes(24, 102)),
        ("cnn", common::cnn_probes(24, 103)),
    ] {
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        ok &= errs.len() >= 20 && worst < 1e-4;
        parts.push(format!("{name} {} probes worst {worst:.1e}", errs.len()));
    }
    let detail = parts.join(", ");
    if !ok {
        return Err(detail);
    }
    within(Duration::from_secs(30), start, detail)
}

fn auc_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let mut r = rng::stream(7, "acceptance/auc", i);
        let n = r.random_range(2..=200);
        // every other instance draws from at most three score levels
        let levels = if i % 2 == 0 { r.random_range(1..=3) } else { 1_000_000 };
        let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..levels))).collect();
        let fast = auc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((fast - common::brute_force_auc(&scores, &labels)).abs());
    }
    if worst > 1e-9 {
        return Err(format!("max |trapezoid - pairwise| = {worst:e}"));
    }
    within(
        Duration::from_secs(10),
        start,
        format!("100 instances, max deviation {worst:.1e}"),
    )
}

fn metric_spot_check() -> Outcome {
    let f1 = f1_score(0.6109, 0.5920);
    ensure((f1 - 0.6013).abs() <= 1e-4, format!("F1 {f1:.6}"))
}

fn label_invariance() -> Outcome {
    let start = Instant::now();
    let mut r = rng::seeded(9);
    let records: Vec<_> = (0..10_000).map(|i| common::random_record(&mut r, i, 4)).collect();
    let shadow: Vec<_> = (0..400).map(|i| common::random_record(&mut r, i, 4)).collect();
    let clamp = default_loss_clamp(&shadow.iter().map(|x| x.loss).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for cfg in DefenseConfig::standard_suite() {
        let out = if cfg.kind == DefenseKind::MG {
            let mg = MemGuardParams {
                hidden: vec![64],
                epochs: 10,
                ..MemGuardParams::default()
            };
            let clf = train_defense_classifier(&shadow, &mg).map_err(|e| e.to_string())?;
            memguard_with(&clf, &records, &mg, Exec::Parallel)
        } else {
            let cfg = DefenseConfig {
                loss_clamp: Some(clamp),
                ..cfg.clone()
            };
            defend_records(&records, &cfg, 0, Exec::Parallel)
        }
        .map_err(|e| e.to_string())?;
        let changed = out
            .iter()
            .zip(&records)
            .filter(|(o, x)| o.predicted_label != x.predicted_label())
            .count();
        if changed > 0 {
            return Err(format!("{}: {changed} labels changed", cfg.label()));
        }
        checked += out.len();
    }
    within(
        Duration::from_secs(5),
        start,
        format!("{checked} defended records, 0 label changes"),
    )
}

fn partition_integrity() -> Outcome {
    let start = Instant::now();
    let mut runner = TestRunner::new(Config {
        cases: 50,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (8usize..150, 8usize..150, 0.1f64..0.9, any::<u64>());
    runner
        .run(&strategy, |(nv, nn, ratio, seed)| {
            let corpus = synth_corpus(nv, nn, 64, 0.5, seed).unwrap();
            let plan = partition(&corpus, ratio, seed).unwrap();
            prop_assert_eq!(common::check_plan(&plan, &corpus), Ok(()));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    within(
        Duration::from_secs(10),
        start,
        "50 corpora disjoint and label-balanced".into(),
    )
}

struct Reference {
    report: Report,
    elapsed: Duration,
}

fn cells(report: &Report, features: &[FeatureId], defense: &str) -> Vec<(String, f64)> {
    report
        .rows
        .iter()
        .filter(|r| features.contains(&r.feature) && r.defense == defense)
        .map(|r| (format!("{}/{}", r.feature, r.architecture), r.report.mean.auc))
        .collect()
}

fn attack_ordering(run: &Reference) -> Outcome {
    let strong = cells(&run.report, &[FeatureId::F5, FeatureId::F6, FeatureId::F8], "ND");
    let weak = cells(&run.report, &[FeatureId::F1, FeatureId::F3, FeatureId::F7], "ND");
    if strong.len() != 6 || weak.len() != 6 {
        return Err("reference report lacks feature rows".into());
    }
    let lo = strong.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let hi = weak.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let mut detail = format!("min strong {lo:.4} - max weak {hi:.4} = {:.4}", lo - hi);
    let mut ok = lo - hi >= 0.25;
    for f in [FeatureId::F5, FeatureId::F6, FeatureId::F8] {
        let best = run.report.best_auc(f, "ND").unwrap_or(0.0);
        ok &= best >= 0.90;
        detail.push_str(&format!(", {f} best {best:.4}"));
    }
    detail.push_str(&format!("; run {:.1}s (limit 600s)", run.elapsed.as_secs_f64()));
    ensure(ok && run.elapsed < Duration::from_secs(600), detail)
}

fn loss_gap(run: &Reference) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for d in run.report.distributions.iter().filter(|d| d.field == RecordField::Loss) {
        ok &= d.member.median < d.nonmember.median;
        parts.push(format!(
            "{} median {:.4} vs {:.4}",
            d.model_tag, d.member.median, d.nonmember.median
        ));
    }
    ensure(ok && parts.len() == 2, parts.join(", "))
}

fn auc_acc(report: &Report, defense: &str, arch: Architecture) -> Result<(f64, f64), String> {
    report
        .row(FeatureId::F6, arch, defense)
        .map(|r| (r.report.mean.auc, r.report.mean.accuracy))
        .ok_or_else(|| format!("no F6 {arch} row for {defense}"))
}

fn defense_efficacy(run: &Reference) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for arch in Architecture::ALL {
        let (nd, _) = auc_acc(&run.report, "ND", arch)?;
        let (a10, acc10) = auc_acc(&run.report, "ALL-10", arch)?;
        let (a5, _) = auc_acc(&run.report, "ALL-5", arch)?;
        let (a3, _) = auc_acc(&run.report, "ALL-3", arch)?;
        ok &= nd >= 0.90 && a10 <= 0.70 && (0.45..=0.70).contains(&acc10);
        ok &= a10 <= a5 + 0.03 && a5 + 0.03 <= a3 + 0.06;
        parts.push(format!(
            "{arch}: ND {nd:.4}, ALL-10 {a10:.4} (acc {acc10:.4}), ALL-5 {a5:.4}, ALL-3 {a3:.4}"
        ));
    }
    ensure(ok, parts.join("; "))
}

fn masking_weakness(run: &Reference) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for arch in Architecture::ALL {
        let (nd, _) = auc_acc(&run.report, "ND", arch)?;
        let (all, _) = auc_acc(&run.report, "ALL-10", arch)?;
        for d in ["LM", "LsM"] {
            let (a, _) = auc_acc(&run.report, d, arch)?;
            ok &= nd - a <= 0.15 && nd - a < nd - all;
            parts.push(format!("{arch} {d} drop {:.4}", nd - a));
        }
        parts.push(format!("{arch} ALL-10 drop {:.4}", nd - all));
    }
    ensure(ok, parts.join(", "))
}

fn memguard_direction(run: &Reference) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for arch in Architecture::ALL {
        let (nd, _) = auc_acc(&run.report, "ND", arch)?;
        let (mg, _) = auc_acc(&run.report, "MG", arch)?;
        ok &= nd - mg >= 0.05;
        parts.push(format!("{arch} ND {nd:.4} MG {mg:.4} drop {:.4}", nd - mg));
    }
    let mg: Vec<_> = run
        .report
        .defenses
        .iter()
        .filter(|d| d.defense.starts_with("MG/"))
        .collect();
    let changed: usize = mg.iter().map(|d| d.argmax_changed).sum();
    let total: usize = mg.iter().map(|d| d.records).sum();
    ok &= changed == 0 && total > 0;
    parts.push(format!("argmax preserved {}/{total}", total - changed));
    ensure(ok, parts.join(", "))
}

fn determinism(a: &Path, b: &Path, first: &Reference, second: &Reference) -> Outcome {
    for f in ["report.tsv", "report.json", "report.txt", "distributions.tsv"] {
        let (x, y) = (fs::read(a.join(f)), fs::read(b.join(f)));
        match (x, y) {
            (Ok(x), Ok(y)) if x == y => {}
            _ => return Err(format!("{f} differs between runs")),
        }
    }
    let total = first.elapsed + second.elapsed;
    ensure(
        total < Duration::from_secs(1200),
        format!("report files identical; {:.1}s for both runs", total.as_secs_f64()),
    )
}

fn reference_run(out: &Path) -> Result<Reference, String> {
    let start = Instant::now();
    let report = run_all(&PipelineConfig::reference(), out, Exec::Parallel).map_err(|e| e.to_string())?;
    Ok(Reference {
        report,
        elapsed: start.elapsed(),
    })
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let (out_a, out_b) = (dir.path().join("run-a"), dir.path().join("run-b"));
    let first = reference_run(&out_a);
    let second = first.as_ref().ok().map(|_| reference_run(&out_b));

    let with_run = |f: fn(&Reference) -> Outcome| -> Outcome {
        match &first {
            Ok(run) => guarded(|| f(run)),
            Err(e) => Err(format!("reference run failed: {e}")),
        }
    };
    let results: Vec<(&str, Outcome)> = vec![
        ("feature widths", guarded(widths)),
        ("gradient checks", guarded(gradients)),
        ("AUC oracle", guarded(auc_oracle)),
        ("F1 spot check", guarded(metric_spot_check)),
        ("attack ordering", with_run(attack_ordering)),
        ("loss gap direction", with_run(loss_gap)),
        ("defense efficacy", with_run(defense_efficacy)),
        ("masking weakness", with_run(masking_weakness)),
        ("label invariance", guarded(label_invariance)),
        ("MemGuard direction", with_run(memguard_direction)),
        (
            "determinism",
            match (&first, &second) {
                (Ok(a), Some(Ok(b))) => guarded(|| determinism(&out_a, &out_b, a, b)),
                _ => Err("reference runs failed".into()),
            },
        ),
        ("partition integrity", guarded(partition_integrity)),
    ];

    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag} {name}: {detail}", i + 1);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
