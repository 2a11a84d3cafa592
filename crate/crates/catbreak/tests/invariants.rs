//! Property tests for the core data-model and bandit invariants.

use proptest::prelude::*;

use catbreak::bandit::{reward, ucb_score, ArmStats};
use catbreak::categorical::{
    apply_perturbation, diff, stack_tensor_relaxed, Edit, EmbeddingTable, Instance, Perturbation,
};
use catbreak::classifier::ConfidenceVector;

/// Per-feature value counts, an instance over them, and one editable slot
/// choice per feature.
fn arb_case() -> impl Strategy<Value = (Vec<usize>, Instance, Perturbation)> {
    let shape = prop::collection::vec(1usize..5, 1usize..8);
    shape.prop_flat_map(|shape| {
        let categories: Vec<BoxedStrategy<Option<usize>>> = shape
            .iter()
            .map(|&m| {
                prop_oneof![
                    3 => (0..m).prop_map(Some),
                    1 => Just(None),
                ]
                .boxed()
            })
            .collect();
        let picks = prop::collection::vec((any::<bool>(), 0usize..8, any::<bool>()), shape.len());
        (Just(shape), categories, picks, 0usize..3).prop_map(
            |(shape, categories, picks, label)| {
                let inst = Instance::new(categories, label);
                let mut edits = Vec::new();
                for (feature, &(selected, raw, delete)) in picks.iter().enumerate() {
                    if !selected {
                        continue;
                    }
                    let m = shape[feature];
                    match inst.categories[feature] {
                        Some(cur) => {
                            if delete {
                                edits.push(Edit::delete(feature));
                            } else if m >= 2 {
                                let target = (cur + 1 + raw % (m - 1)) % m;
                                edits.push(Edit::substitute(feature, target));
                            }
                        }
                        None => edits.push(Edit::insert(feature, raw % m)),
                    }
                }
                (shape, inst, Perturbation::new(edits))
            },
        )
    })
}

proptest! {
    /// Applying a perturbation and diffing back recovers exactly the edited
    /// feature set.
    #[test]
    fn diff_recovers_edited_features((_, inst, p) in arb_case()) {
        let modified = apply_perturbation(&inst, &p).unwrap();
        let changed = diff(&inst, &modified).unwrap();
        let edited: std::collections::BTreeSet<usize> =
            p.edits.iter().map(|e| e.feature).collect();
        prop_assert_eq!(changed, edited);
    }

    /// The inverse perturbation restores the original instance.
    #[test]
    fn inverse_round_trip((_, inst, p) in arb_case()) {
        let modified = apply_perturbation(&inst, &p).unwrap();
        let back = apply_perturbation(&modified, &p.inverse_on(&inst).unwrap()).unwrap();
        prop_assert_eq!(back, inst);
    }

    /// The relaxed embedding stack is linear in the indicator values.
    #[test]
    fn relaxed_stack_is_linear(
        rows in prop::collection::vec(
            prop::collection::vec(0.0f64..1.0, 3),
            2,
        ),
        scale in 0.1f64..2.0,
    ) {
        let table = EmbeddingTable::from_flat(
            vec![3, 3],
            2,
            (0..12).map(|i| (i as f64) * 0.5 - 3.0).collect(),
        )
        .unwrap();
        let base = stack_tensor_relaxed(&rows, &table).unwrap();
        let scaled_rows: Vec<Vec<f64>> =
            rows.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        let scaled = stack_tensor_relaxed(&scaled_rows, &table).unwrap();
        for (br, sr) in base.iter().flatten().zip(scaled.iter().flatten()) {
            for (b, s) in br.iter().zip(sr) {
                prop_assert!((s - b * scale).abs() <= 1e-12);
            }
        }
    }

    /// Rewards stay inside `[lambda - 1, lambda + 1]`, and misclassification
    /// corresponds to rewards at or above lambda.
    #[test]
    fn reward_band_and_success_flag(
        raw in prop::collection::vec(1e-3f64..1.0, 2..6),
        label_pick in 0usize..6,
        lambda in 1.0f64..3.0,
    ) {
        let sum: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|p| p / sum).collect();
        let label = label_pick % probs.len();
        let conf = ConfidenceVector::new(probs).unwrap();
        let g = reward(&conf, &conf, label, lambda).unwrap();
        prop_assert!(g >= lambda - 1.0 - 1e-12 && g <= lambda + 1.0 + 1e-12);
        if conf.margin(label) >= 0.0 {
            prop_assert!(g >= lambda);
        }
        if g >= lambda {
            prop_assert!(conf.margin(label) >= -1e-12);
        }
    }

    /// Selection scores rise with the empirical mean (uniform reward shifts
    /// move the score by exactly the shift), never fall as the round count
    /// grows, and never rise as the arm's pull count grows at fixed
    /// mean/variance.
    #[test]
    fn ucb_monotonicity(
        history in prop::collection::vec(0.0f64..2.0, 1..12),
        shift in 0.01f64..1.0,
        t1 in 1.0f64..50.0,
        dt in 0.0f64..50.0,
        alpha in 0.0f64..8.0,
    ) {
        let mut base = ArmStats::new();
        let mut shifted = ArmStats::new();
        let mut doubled = ArmStats::new();
        for &g in &history {
            base.update(g).unwrap();
            shifted.update(g + shift).unwrap();
        }
        for _ in 0..2 {
            for &g in &history {
                doubled.update(g).unwrap();
            }
        }
        let t2 = t1 + dt;
        let b1 = ucb_score(&base, t1, alpha).unwrap();
        prop_assert!((ucb_score(&shifted, t1, alpha).unwrap() - b1 - shift).abs() <= 1e-9);
        prop_assert!(ucb_score(&base, t2, alpha).unwrap() >= b1 - 1e-12);
        // Repeating the history doubles the pull count while preserving the
        // mean and population variance, so the exploration terms shrink.
        prop_assert!(ucb_score(&doubled, t1, alpha).unwrap() <= b1 + 1e-9);
    }
}
