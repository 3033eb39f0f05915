//! Property tests over the public API.

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;

use pangram_fusion::dataset::{split_sizes, Cohort, Ethnicity, Label, Sex};
use pangram_fusion::error_analysis::{build_error_tree, heatmap_matrix, Attribute, ErrorSample, ErrorTreeNode, TreeOptions};
use pangram_fusion::hypertune::{trial_rng, SearchSpace};
use pangram_fusion::metrics::{auroc, confusion_and_rates, roc_export};
use pangram_fusion::model::{Checkpoint, HeadKind, LossWeights, Model, ModelSpec, RecMetric, CHECKPOINT_VERSION};
use pangram_fusion::preprocess::{prune_correlated, ScalingMethod, Scaler};
use pangram_fusion::stats::{fisher_exact_two_sided, spearman, Table2x2};
use pangram_fusion::trainer::{reference_best_config, TrainConfig};

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..120).prop_flat_map(|n| {
        (prop::collection::vec(0u8..20, n), prop::collection::vec(0u8..=1, n)).prop_map(|(s, mut y)| {
            y[0] = 0;
            y[1] = 1;
            (s.into_iter().map(|v| f64::from(v) / 20.0).collect(), y)
        })
    })
}

fn sample() -> impl Strategy<Value = ErrorSample> {
    (
        prop::option::weighted(0.9, 18.0f64..90.0),
        prop::option::of(prop_oneof![Just(Sex::Male), Just(Sex::Female)]),
        prop::option::of(prop_oneof![Just(Ethnicity::White), Just(Ethnicity::Black), Just(Ethnicity::Asian)]),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(age, sex, ethnicity, pd, error)| ErrorSample {
            age: age.map(|a| (a * 10.0).round() / 10.0),
            sex,
            ethnicity,
            label: if pd { Label::Pd } else { Label::Control },
            cohort: Cohort::HomeRecorded,
            error,
        })
}

fn conserved(t: &ErrorTreeNode) -> bool {
    t.children.is_empty()
        || (t.children.iter().map(|c| c.n).sum::<usize>() == t.n
            && t.children.iter().map(|c| c.errors).sum::<usize>() == t.errors
            && t.children.iter().all(conserved))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn auroc_in_unit_interval_and_flips((s, y) in scores_and_labels()) {
        let a = auroc(&s, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        let b = auroc(&s, &flipped).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auroc_invariant_to_monotone_transform((s, y) in scores_and_labels()) {
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert_eq!(auroc(&s, &y).unwrap(), auroc(&t, &y).unwrap());
        let roc = roc_export(&s, &y).unwrap();
        prop_assert_eq!(roc.area, auroc(&s, &y).unwrap());
        prop_assert_eq!(roc.points.first().copied(), Some((0.0, 0.0)));
        prop_assert_eq!(roc.points.last().copied(), Some((1.0, 1.0)));
    }

    #[test]
    fn confusion_counts_add_up((s, y) in scores_and_labels(), thr in 0.0f64..1.0) {
        let r = confusion_and_rates(&s, &y, thr).unwrap();
        prop_assert_eq!((r.tp + r.fp + r.tn + r.fn_) as usize, s.len());
        prop_assert!((r.accuracy - (r.tp + r.tn) as f64 / s.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn fisher_is_a_probability_and_symmetric(a in 0u64..30, b in 0u64..30, c in 0u64..30, d in 0u64..30) {
        prop_assume!(a + b + c + d > 0);
        let p = fisher_exact_two_sided(Table2x2::new(a, b, c, d)).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
        for q in [Table2x2::new(c, d, a, b), Table2x2::new(b, a, d, c), Table2x2::new(a, c, b, d)] {
            prop_assert!((fisher_exact_two_sided(q).unwrap() - p).abs() <= 1e-12 * p.max(1e-300) + 1e-15);
        }
    }

    #[test]
    fn spearman_bounded(x in prop::collection::vec(-50.0f64..50.0, 3..40), seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = x.iter().map(|v| v * 0.5 + rand::Rng::random_range(&mut rng, -10.0..10.0)).collect();
        if let Ok((rho, p)) = spearman(&x, &y) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn split_sizes_partition(n in 0usize..5000, v in 0.0f64..0.4, t in 0.0f64..0.4) {
        let (a, b, c) = split_sizes(n, (1.0 - v - t, v, t));
        prop_assert_eq!(a + b + c, n);
        prop_assert!(b <= (n as f64 * v).ceil() as usize && c <= (n as f64 * t).ceil() as usize);
    }

    #[test]
    fn minmax_maps_train_into_unit_box(rows in 2usize..30, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((rows, cols), |_| rand::Rng::random_range(&mut rng, -1e3..1e3));
        let s = Scaler::fit(&x, ScalingMethod::Minmax).unwrap();
        let y = s.transform(&x).unwrap();
        prop_assert!(y.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn pruning_keeps_columns_below_threshold(rows in 5usize..40, cols in 1usize..8, thr in 0.5f64..0.99, seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let base = Array2::from_shape_fn((rows, cols), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        // Duplicate column 0 so there is always something to prune.
        let x = ndarray::concatenate(ndarray::Axis(1), &[base.view(), base.column(0).insert_axis(ndarray::Axis(1))]).unwrap();
        let kept = prune_correlated(&x, thr).unwrap();
        prop_assert!(!kept.is_empty() && kept.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(!(kept.contains(&0) && kept.contains(&cols)));
    }

    #[test]
    fn error_tree_conserves_counts(samples in prop::collection::vec(sample(), 10..200), depth in 0usize..5) {
        prop_assume!(samples.iter().any(|s| s.age.is_some() || s.sex.is_some() || s.ethnicity.is_some()));
        let tree = build_error_tree(&samples, TreeOptions { max_depth: depth, min_leaf: 5 }).unwrap();
        prop_assert!(conserved(&tree));
        prop_assert!(tree.depth() <= depth);
        prop_assert!(tree.leaves().iter().all(|l| l.n >= 5));
        if tree.errors > 0 {
            let cov: f64 = tree.leaves().iter().map(|l| l.error_coverage).sum();
            prop_assert!((cov - 1.0).abs() < 1e-9);
        }
        let h = heatmap_matrix(&samples, Attribute::Age, Attribute::Sex, 4).unwrap();
        prop_assert_eq!(h.cells.iter().map(|c| c.n).sum::<usize>(), samples.len());
        prop_assert_eq!(h.cells.iter().map(|c| c.errors).sum::<usize>(), samples.iter().filter(|s| s.error).count());
    }

    #[test]
    fn sampled_configs_round_trip_and_validate(seed in any::<u64>(), trial in 0usize..1000) {
        let mut rng = trial_rng(seed, trial);
        let c = SearchSpace::default().sample_config(&reference_best_config(), &mut rng);
        prop_assert!(c.validate().is_ok());
        let json = serde_json::to_vec(&c).unwrap();
        prop_assert_eq!(TrainConfig::from_json(&json).unwrap(), c);
    }

    #[test]
    fn checkpoints_round_trip_bit_exact(seed in any::<u64>(), ds in 1usize..8, dt in 1usize..8, ann in any::<bool>()) {
        let spec = ModelSpec::Fusion {
            head: if ann { HeadKind::Ann } else { HeadKind::Shallow },
            d_src: ds,
            d_tgt: dt,
            hidden: 3,
            renormalize_after_sum: ann,
            weights: LossWeights { pred: 1.0, cos: 0.3, rec: 0.2 },
            rec_metric: RecMetric::Kl,
        };
        let model = Model::init(&spec, seed).unwrap();
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            spec,
            modalities: vec!["wavlm".into(), "imagebind".into()],
            plans: Vec::new(),
            seed,
            best_epoch: 0,
            best_val_auroc: None,
            model,
        };
        let bytes = ckpt.to_json().unwrap();
        let back = Checkpoint::from_json(&bytes).unwrap();
        prop_assert_eq!(back.to_json().unwrap(), bytes);
        prop_assert_eq!(back, ckpt);
    }
}
