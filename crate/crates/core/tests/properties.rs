mod common;

use proptest::prelude::*;
use rand::Rng;

use memaudit::corpus::{partition, synth_corpus};
use memaudit::eval::{auc, centroid_distance};
use memaudit::features::FeatureId;
use memaudit::rng;
use memaudit::surrogate::ModelOutputRecord;

/// Row widths from the feature table: confidence and loss are scalars,
/// logits have K entries and the embedding d.
fn table_width(f: FeatureId, k: usize, d: usize) -> usize {
    match f {
        FeatureId::F1 | FeatureId::F2 => 1,
        FeatureId::F3 => k,
        FeatureId::F4 | FeatureId::F5 => k + 1,
        FeatureId::F6 => k + 2,
        FeatureId::F7 => d + k,
        FeatureId::F8 => d + k + 1,
    }
}

fn scores_with_ties() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=200, 1u32..=50, any::<u64>()).prop_map(|(n, levels, seed)| {
        let mut r = rng::seeded(seed);
        let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores = (0..n)
            .map(|_| f64::from(r.random_range(0..levels)) / f64::from(levels))
            .collect();
        (scores, labels)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn partition_is_disjoint_and_label_balanced(
        n_vul in 8usize..120,
        n_nonvul in 8usize..120,
        ratio in 0.1f64..0.9,
        seed in any::<u64>(),
    ) {
        let corpus = synth_corpus(n_vul, n_nonvul, 64, 0.5, seed).unwrap();
        let plan = partition(&corpus, ratio, seed).unwrap();
        prop_assert_eq!(common::check_plan(&plan, &corpus), Ok(()));
        prop_assert!(plan.validate(&corpus).is_ok());
        let assigned: usize = memaudit::corpus::Subset::ALL.iter().map(|s| plan.ids(*s).len()).sum();
        prop_assert_eq!(assigned + plan.unassigned.len(), corpus.len());
        prop_assert_eq!(assigned, 2 * n_vul.min(n_nonvul));
        prop_assert_eq!(&partition(&corpus, ratio, seed).unwrap(), &plan);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn auc_matches_pairwise_count((scores, labels) in scores_with_ties()) {
        let fast = auc(&scores, &labels).unwrap();
        prop_assert!((fast - common::brute_force_auc(&scores, &labels)).abs() <= 1e-9);
    }

    #[test]
    fn auc_is_invariant_under_increasing_maps((scores, labels) in scores_with_ties(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = auc(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let cubic: Vec<f64> = scores.iter().map(|s| (s - 0.3).powi(3) + s).collect();
        prop_assert!((auc(&affine, &labels).unwrap() - base).abs() <= 1e-12);
        prop_assert!((auc(&cubic, &labels).unwrap() - base).abs() <= 1e-12);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&flipped, &labels).unwrap() - (1.0 - base)).abs() <= 1e-12);
    }

    #[test]
    fn centroid_distance_is_rotation_and_shift_invariant(seed in any::<u64>(), theta in 0.0f64..std::f64::consts::TAU) {
        let mut r = rng::seeded(seed);
        let n = r.random_range(4..60);
        let mut m: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        m[0] = 0;
        m[1] = 1;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)]).collect();
        let (c, s) = (theta.cos(), theta.sin());
        let moved: Vec<Vec<f64>> = rows.iter().map(|x| vec![c * x[0] - s * x[1] + 7.0, s * x[0] + c * x[1] - 2.0]).collect();
        let d0 = centroid_distance(&rows, &m).unwrap();
        prop_assert!((centroid_distance(&moved, &m).unwrap() - d0).abs() <= 1e-9 * (1.0 + d0));
    }

    #[test]
    fn feature_widths_and_block_order(k in 2usize..6, d in 0usize..40, seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let logits: Vec<f64> = (0..k).map(|_| r.random_range(-4.0..4.0)).collect();
        let rec = ModelOutputRecord {
            sample_id: "p".into(),
            confidence: r.random_range(0.0..1.0),
            loss: r.random_range(0.0..5.0),
            logits: logits.clone(),
            embedding: (0..d).map(|_| r.random_range(-1.0..1.0)).collect(),
            true_label: 0,
            membership: Some(1),
        };
        for f in FeatureId::ALL {
            prop_assert_eq!(f.dimension(k, d), table_width(f, k, d));
            prop_assert_eq!(f.row(&rec).len(), table_width(f, k, d));
            prop_assert_eq!(f.column_names(k, d).len(), table_width(f, k, d));
        }
        let row = |f: FeatureId| f.row(&rec);
        prop_assert_eq!(row(FeatureId::F1), vec![rec.confidence]);
        prop_assert_eq!(row(FeatureId::F2), vec![rec.loss]);
        prop_assert_eq!(row(FeatureId::F3), logits.clone());
        prop_assert_eq!(row(FeatureId::F5), [row(FeatureId::F3), vec![rec.loss]].concat());
        prop_assert_eq!(row(FeatureId::F6), [row(FeatureId::F4), vec![rec.loss]].concat());
        prop_assert_eq!(row(FeatureId::F7), [logits.clone(), rec.embedding.clone()].concat());
        let mut f8 = row(FeatureId::F7);
        f8.insert(k, rec.loss);
        prop_assert_eq!(row(FeatureId::F8), f8);
    }
}
