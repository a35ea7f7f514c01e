mod common;

use memaudit::defense::memguard::{memguard_with, MgLoss};
use memaudit::defense::{
    apply_defense, default_loss_clamp, defend_records, record_stream, smooth, train_defense_classifier, DefenseConfig,
    DefenseKind, MemGuardParams,
};
use memaudit::math::{argmax, mean, sample_std};
use memaudit::par::Exec;
use memaudit::rng;
use memaudit::surrogate::ModelOutputRecord;

fn records(n: usize, seed: u64) -> Vec<ModelOutputRecord> {
    let mut r = rng::seeded(seed);
    (0..n).map(|i| common::random_record(&mut r, i, 4)).collect()
}

fn small_mg() -> MemGuardParams {
    MemGuardParams {
        hidden: vec![32, 16],
        epochs: 5,
        max_iter: 50,
        ..MemGuardParams::default()
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn smoothing_noise_has_the_configured_moments() {
    let mut r = rng::seeded(5);
    let noise: Vec<f64> = (0..100_000).map(|_| smooth(&[0.0], 10.0, &mut r).unwrap()[0]).collect();
    assert!(mean(&noise).abs() <= 0.1, "mean {}", mean(&noise));
    let sd = sample_std(&noise);
    assert!((sd - 10.0).abs() <= 0.2, "std {sd}");
}

#[test]
fn smoothing_noise_is_uncorrelated_across_components_and_records() {
    let recs = records(10_000, 6);
    let cfg = DefenseConfig::new(DefenseKind::ALL, 5.0);
    let out = defend_records(&recs, &cfg, 0, Exec::Parallel).unwrap();
    let d = |k: usize| -> Vec<f64> {
        out.iter()
            .zip(&recs)
            .map(|(o, r)| o.exposed.logits[k] - r.logits[k])
            .collect()
    };
    let (n0, n1) = (d(0), d(1));
    assert!(pearson(&n0, &n1).abs() < 0.05);
    assert!(pearson(&n0[1..], &n0[..n0.len() - 1]).abs() < 0.05);
    assert!((sample_std(&n0) - 5.0).abs() < 0.25);
}

#[test]
fn noise_depends_only_on_record_and_query() {
    let recs = records(50, 7);
    let cfg = DefenseConfig::new(DefenseKind::LS, 3.0);
    let a = defend_records(&recs, &cfg, 0, Exec::Parallel).unwrap();
    let b = defend_records(&recs, &cfg, 0, Exec::Sequential).unwrap();
    let c = defend_records(&recs, &cfg, 1, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let mut one = record_stream(&cfg, &recs[3].sample_id, 0);
    assert_eq!(apply_defense(&recs[3], &cfg, &mut one).unwrap(), a[3]);
}

#[test]
fn every_defense_keeps_the_reported_label() {
    let recs = records(10_000, 8);
    let shadow = records(400, 9);
    let clamp = default_loss_clamp(&shadow.iter().map(|r| r.loss).collect::<Vec<_>>()).unwrap();
    for cfg in DefenseConfig::standard_suite() {
        let out = if cfg.kind == DefenseKind::MG {
            let mg = small_mg();
            let clf = train_defense_classifier(&shadow, &mg).unwrap();
            let out = memguard_with(&clf, &recs, &mg, Exec::Parallel).unwrap();
            for (o, r) in out.iter().zip(&recs) {
                assert_eq!(
                    argmax(&o.exposed.logits),
                    argmax(&r.logits),
                    "MG argmax of {}",
                    r.sample_id
                );
            }
            out
        } else {
            let cfg = DefenseConfig {
                loss_clamp: Some(clamp),
                ..cfg.clone()
            };
            defend_records(&recs, &cfg, 0, Exec::Parallel).unwrap()
        };
        assert_eq!(out.len(), recs.len());
        for (o, r) in out.iter().zip(&recs) {
            assert_eq!(
                o.predicted_label,
                r.predicted_label(),
                "{} {}",
                cfg.label(),
                r.sample_id
            );
            assert_eq!(o.exposed.sample_id, r.sample_id);
            assert_eq!(o.exposed.true_label, r.true_label);
            assert_eq!(o.exposed.embedding, r.embedding);
        }
    }
}

#[test]
fn masking_and_clamping_outputs() {
    let recs = records(2_000, 10);
    let lm = defend_records(&recs, &DefenseConfig::new(DefenseKind::LM, 0.0), 0, Exec::Sequential).unwrap();
    let lsm_cfg = DefenseConfig {
        loss_clamp: Some((0.0, 0.5)),
        ..DefenseConfig::new(DefenseKind::LsM, 0.0)
    };
    let lsm = defend_records(&recs, &lsm_cfg, 0, Exec::Sequential).unwrap();
    for ((m, c), r) in lm.iter().zip(&lsm).zip(&recs) {
        let top = argmax(&r.logits);
        assert_eq!(m.exposed.logits[top], 0.0);
        assert_eq!(m.exposed.logits[1 - top], r.logits[1 - top]);
        assert_eq!(m.exposed.loss, r.loss);
        assert_eq!(c.exposed.logits, r.logits);
        assert_eq!(c.exposed.loss, r.loss.min(0.5));
    }
}

#[test]
fn recomputed_memguard_loss_follows_the_exposed_logits() {
    let recs = records(200, 11);
    let mg = MemGuardParams {
        loss: MgLoss::Recomputed,
        ..small_mg()
    };
    let clf = train_defense_classifier(&records(200, 12), &mg).unwrap();
    for (o, r) in memguard_with(&clf, &recs, &mg, Exec::Sequential)
        .unwrap()
        .iter()
        .zip(&recs)
    {
        let want = memaudit::math::cross_entropy(&o.exposed.logits, usize::from(r.true_label));
        assert!((o.exposed.loss - want).abs() < 1e-12);
    }
}
