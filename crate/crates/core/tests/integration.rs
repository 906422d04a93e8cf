use std::collections::BTreeSet;

use budgetseg_core::budget::{allocation_cost, allocations_for_budget};
use budgetseg_core::matching::hungarian;
use budgetseg_core::pipeline::{run_experiment, write_results, AnnotatorVariant, TrainConfig};
use budgetseg_core::synthdata::{generate_scenes, split_dataset, OverlapPolicy};
use budgetseg_core::{Allocation, CostMatrix, CostModel, DataConfig, ExperimentConfig, ModelConfig, SupervisionKind};
use proptest::prelude::*;

fn small_data() -> DataConfig {
    DataConfig {
        height: 16,
        width: 16,
        num_classes: 2,
        min_instances: 1,
        max_instances: 2,
        min_size: 4,
        max_size: 6,
        overlap: OverlapPolicy::Avoid,
        seed: 0,
    }
}

fn small_experiment(variant: AnnotatorVariant, weak: SupervisionKind) -> ExperimentConfig {
    let train = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    ExperimentConfig {
        data: small_data(),
        model: ModelConfig {
            num_classes: 2,
            height: 16,
            width: 16,
            features: 4,
            hidden: 6,
            max_steps: 3,
            stop_threshold: 0.5,
            distance_scale: 2.0,
        },
        variant,
        n_strong: 6,
        m_weak: 10,
        weak_kind: weak,
        test_size: 8,
        annotator: train.clone(),
        segmenter: train,
        repeats: 2,
        ..Default::default()
    }
}

#[test]
fn split_is_disjoint_and_reproducible() {
    let scenes = generate_scenes(&small_data(), 0..40).unwrap();
    let alloc = Allocation::new(12, SupervisionKind::FullMasks, 20, SupervisionKind::ImageLevelCounts);
    let a = split_dataset(&scenes, &alloc, 3).unwrap();
    let b = split_dataset(&scenes, &alloc, 3).unwrap();
    let ids = |s: &budgetseg_core::synthdata::DatasetSplit| {
        let strong: Vec<u64> = s.strong.iter().map(|(x, _)| x.index).collect();
        let weak: Vec<u64> = s.weak.iter().map(|(x, _)| x.index).collect();
        (strong, weak)
    };
    assert_eq!(ids(&a), ids(&b));
    let (strong, weak) = ids(&a);
    assert_eq!((strong.len(), weak.len()), (12, 20));
    let all: BTreeSet<u64> = strong.iter().chain(&weak).copied().collect();
    assert_eq!(all.len(), 32);
    assert!(split_dataset(&scenes, &Allocation::new(30, SupervisionKind::FullMasks, 20, SupervisionKind::ImageLevel), 0).is_err());
}

#[test]
fn experiment_rows_are_reproducible() {
    for (variant, weak) in [
        (AnnotatorVariant::Plain, SupervisionKind::Unlabeled),
        (AnnotatorVariant::Conditioned, SupervisionKind::ImageLevelCounts),
        (AnnotatorVariant::Semantic, SupervisionKind::Unlabeled),
    ] {
        let cfg = small_experiment(variant, weak);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_results(&mut x, &a.rows(&cfg)).unwrap();
        write_results(&mut y, &b.rows(&cfg)).unwrap();
        assert_eq!(x, y, "{variant}");
        assert_eq!(a.repeats.len(), 2);
        for r in &a.repeats {
            assert!((0.0..=1.0).contains(&r.f_score) && (0.0..=1.0).contains(&r.g_score), "{variant}: {r:?}");
        }
    }
}

#[test]
fn weak_variant_without_weak_labels_is_rejected() {
    let cfg = small_experiment(AnnotatorVariant::PlainIL, SupervisionKind::Unlabeled);
    assert!(run_experiment(&cfg).is_err());
}

proptest! {
    #[test]
    fn frontier_allocations_fit_and_are_maximal(days in 0.0f64..3.0) {
        let model = CostModel::default();
        let budget = days * 86_400.0;
        let rows = allocations_for_budget(budget, SupervisionKind::FullMasks, SupervisionKind::ImageLevelCounts, &model);
        prop_assert!(!rows.is_empty());
        for a in &rows {
            prop_assert!(allocation_cost(a, &model) <= budget + 1e-6);
            let more = Allocation::new(a.n_strong, a.strong_kind, a.m_weak + 1, a.weak_kind);
            prop_assert!(allocation_cost(&more, &model) > budget);
        }
    }

    #[test]
    fn cost_grows_with_either_count(n in 0u64..500, m in 0u64..5000) {
        let model = CostModel::default();
        let c = |n, m| allocation_cost(&Allocation::new(n, SupervisionKind::FullMasks, m, SupervisionKind::ImageLevel), &model);
        prop_assert!(c(n + 1, m) > c(n, m));
        prop_assert!(c(n, m + 1) > c(n, m));
    }

    #[test]
    fn hungarian_beats_any_permutation(seed in 0u64..10_000, n in 1usize..7) {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let costs = CostMatrix::from_fn(n, n, |_, _| rng.gen::<f64>()).unwrap();
        let best = hungarian(&costs).unwrap().total_cost;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let other: f64 = perm.iter().enumerate().map(|(r, &c)| costs.get(r, c)).sum();
        prop_assert!(best <= other + 1e-12);
    }
}
