use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_edit(seed: u64, shape: (usize, usize)) -> EditedLayerWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0));
    let d = Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0));
    EditedLayerWeights::new(0, w.clone(), &w + &d, vec![]).unwrap()
}

fn stats(rows: usize) -> ActivationStats {
    ActivationStats {
        layer: 0,
        mean_abs: Array1::from_shape_fn(rows, |i| ((i * 37) % 11) as f64),
    }
}

fn all_specs(pct: f64) -> Vec<PruneSpec> {
    PruneCriterion::ALL
        .iter()
        .flat_map(|&criterion| {
            [PruneMode::Zero, PruneMode::Original]
                .into_iter()
                .map(move |mode| PruneSpec { criterion, pct, mode })
        })
        .collect()
}

#[test]
fn zero_pct_is_bit_exact_noop() {
    let e = random_edit(1, (6, 4));
    let st = stats(6);
    for spec in all_specs(0.0) {
        assert_eq!(prune(&e, &spec, Some(&st)).unwrap(), e.edited);
    }
}

#[test]
fn full_restore_is_bit_exact() {
    let e = random_edit(2, (6, 4));
    let st = stats(6);
    for spec in all_specs(1.0).into_iter().filter(|s| s.mode == PruneMode::Original) {
        assert_eq!(prune(&e, &spec, Some(&st)).unwrap(), e.original);
    }
}

#[test]
fn hand_sorted_three_by_three() {
    let w = Array2::from_elem((3, 3), 1.0);
    let d = array![[0.1, -0.9, 0.3], [0.5, 0.2, -0.7], [0.05, 0.8, -0.4]];
    let e = EditedLayerWeights::new(0, w.clone(), &w + &d, vec![]).unwrap();
    let spec = PruneSpec {
        criterion: PruneCriterion::UnstructuredDelta,
        pct: 1.0 / 3.0,
        mode: PruneMode::Zero,
    };
    let out = prune(&e, &spec, None).unwrap();
    let mut want = e.edited.clone();
    for (i, j) in [(0, 1), (2, 1), (1, 2)] {
        want[[i, j]] = 0.0;
    }
    assert_eq!(out, want);
    let restored = prune(&e, &PruneSpec { mode: PruneMode::Original, ..spec }, None).unwrap();
    for (i, j) in [(0, 1), (2, 1), (1, 2)] {
        want[[i, j]] = 1.0;
    }
    assert_eq!(restored, want);
}

#[test]
fn structured_criteria_take_whole_columns_and_rows() {
    let e = random_edit(3, (5, 4));
    let sel = select(&e, PruneCriterion::StructuredColumnNorm, 0.25, None).unwrap();
    assert_eq!(sel.indices.len(), 5);
    let col = sel.indices[0] % 4;
    assert!(sel.indices.iter().all(|k| k % 4 == col));
    let norms: Vec<f64> = e.edited.columns().into_iter().map(|c| c.dot(&c)).collect();
    assert!(norms.iter().all(|&n| n <= norms[col]));

    let st = stats(5);
    let sel = select(&e, PruneCriterion::StructuredActivation, 0.2, Some(&st)).unwrap();
    let row = sel.indices[0] / 4;
    assert_eq!(sel.indices, (row * 4..row * 4 + 4).collect::<Vec<_>>());
    assert!(matches!(
        select(&e, PruneCriterion::StructuredActivation, 0.2, None),
        Err(Error::MissingActivationStats)
    ));
}

#[test]
fn ties_break_by_flat_index() {
    let w = Array2::zeros((2, 3));
    let e = EditedLayerWeights::new(0, w.clone(), Array2::from_elem((2, 3), 0.5), vec![]).unwrap();
    let sel = select(&e, PruneCriterion::UnstructuredDelta, 0.5, None).unwrap();
    assert_eq!(sel.indices, vec![0, 1, 2]);
}

#[test]
fn pruning_with_a_fixed_selection_is_idempotent() {
    let e = random_edit(4, (6, 5));
    let st = stats(6);
    for spec in all_specs(0.3) {
        let sel = select(&e, spec.criterion, spec.pct, Some(&st)).unwrap();
        let once = apply_selection(&e, &sel, spec.mode).unwrap();
        let again_in = EditedLayerWeights::new(0, e.original.clone(), once.clone(), vec![]).unwrap();
        assert_eq!(apply_selection(&again_in, &sel, spec.mode).unwrap(), once);
    }
}

#[test]
fn invalid_pct_rejected() {
    let e = random_edit(5, (3, 3));
    for pct in [-0.1, 1.5, f64::NAN] {
        assert!(select(&e, PruneCriterion::UnstructuredDelta, pct, None).is_err());
    }
}

#[test]
fn blocking_rows_partition_totals() {
    let r = BlockingReport {
        per_relation: vec![
            BlockingRow { relation: Some(3), n: 2, standard_success: 2, blocked_success: 1 },
            BlockingRow { relation: Some(4), n: 3, standard_success: 3, blocked_success: 0 },
        ],
        total: BlockingRow { relation: None, n: 5, standard_success: 5, blocked_success: 1 },
        outcomes: vec![],
    };
    assert!((r.drop() - 0.8).abs() < 1e-12);
    assert_eq!(r.per_relation.iter().map(|x| x.n).sum::<usize>(), r.total.n);
}
