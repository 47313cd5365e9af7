use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{FactTriple, Vocab, CANONICAL_TEMPLATE};
use crate::editor::{EditRecord, EditedLayerWeights};
use crate::nanomodel::ModelConfig;

fn model() -> TransformerModel {
    let cfg = ModelConfig {
        n_layers: 3,
        d_model: 8,
        n_heads: 2,
        d_mlp: 12,
        vocab_size: 40,
        max_seq_len: 8,
        ln_eps: 1e-5,
        seed: 2,
    };
    let mut m = TransformerModel::new(cfg).unwrap();
    for (_, mut t) in m.weights.tensors_mut() {
        t.mapv_inplace(|x| x * 8.0);
    }
    m
}

fn edits(m: &TransformerModel, v: &Vocab, n: usize, seed: u64) -> Vec<EditedLayerWeights> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let w = m.w_proj(1).clone();
            let u = Array1::from_shape_fn(12, |_| rng.random::<f64>() - 0.5);
            let l = Array1::from_shape_fn(8, |_| 2.0 * (rng.random::<f64>() - 0.5));
            let delta = u.insert_axis(ndarray::Axis(1)).dot(&l.insert_axis(ndarray::Axis(0)));
            let fact = FactTriple {
                id: i,
                subject: vec![v.id(&format!("s{:03}", i % 6)).unwrap()],
                relation: v.id("r00").unwrap(),
                object: v.id("o001").unwrap(),
                prompt_template: CANONICAL_TEMPLATE.into(),
            };
            let rec = EditRecord {
                edit_id: format!("edit-{i:05}"),
                layer: 1,
                fact,
                o: v.id("o001").unwrap(),
                o_star: v.id("o003").unwrap(),
                achieved_p: 0.9,
            };
            EditedLayerWeights::new(1, w.clone(), &w + &delta, vec![rec]).unwrap()
        })
        .collect()
}

fn neutral() -> Vec<usize> {
    (0..200).map(|i| 22 + (i * 7 + i / 3) % 18).collect()
}

#[test]
fn soft_mask_examples() {
    let theta = array![[0.0, 1e6, -2.0], [0.5, -0.5, 3.0]];
    let k = soft_mask(theta.view(), 1.0).unwrap();
    assert_eq!(k[[0, 0]], 0.5);
    assert!((k[[0, 1]] - 1.0).abs() <= 1e-12);
    let sharper = soft_mask(theta.view(), 0.5).unwrap();
    for (a, b) in k.iter().zip(sharper.iter()) {
        assert!((b - 0.5).abs() >= (a - 0.5).abs());
    }
    assert!(soft_mask(theta.view(), 0.0).is_err());
    assert!(soft_mask(theta.view(), -1.0).is_err());
}

#[test]
fn restoration_loss_examples() {
    assert_eq!(restoration_loss(0.3, 0.3).unwrap(), 0.0);
    let e = std::f64::consts::E;
    assert!((restoration_loss(0.5, 0.5 / e).unwrap() + 1.0).abs() <= 1e-12);
    assert!((restoration_loss(0.5, 0.5 / e.powi(3)).unwrap() + 3.0).abs() <= 1e-12);
    assert!(restoration_loss(0.0, 0.2).is_err());
    assert!(restoration_loss(0.2, 0.0).is_err());
    let z = array![1.0, 2.5, -0.5];
    let p = crate::nanomodel::softmax_row(z.view());
    let direct = restoration_loss(p[0], p[1]).unwrap();
    assert!((restoration_from_logits(z.view(), 0, 1) - direct).abs() <= 1e-12);
}

#[test]
fn sparsity_loss_examples() {
    assert_eq!(sparsity_loss(Array2::ones((3, 4)).view()), 0.0);
    assert_eq!(sparsity_loss(Array2::zeros((3, 4)).view()), 1.0);
    let half = array![[1.0, 0.0], [0.0, 1.0]];
    assert_eq!(sparsity_loss(half.view()), 0.5);
}

#[test]
fn kl_loss_examples() {
    let a = array![[0.3, -1.0, 2.0]];
    assert_eq!(kl_loss(a.view(), a.view(), 1.0).unwrap(), 0.0);
    // Hand arithmetic on two fixed three-way distributions given as log-probabilities.
    let p = [0.5f64, 0.3, 0.2];
    let q = [0.25f64, 0.25, 0.5];
    let la = Array2::from_shape_vec((1, 3), p.iter().map(|x| x.ln()).collect()).unwrap();
    let lb = Array2::from_shape_vec((1, 3), q.iter().map(|x| x.ln()).collect()).unwrap();
    let hand = 0.5 * (0.5f64 / 0.25).ln() + 0.3 * (0.3f64 / 0.25).ln() + 0.2 * (0.2f64 / 0.5).ln();
    assert!((kl_loss(la.view(), lb.view(), 1.0).unwrap() - hand).abs() <= 1e-9);
    // Shift invariance and shape check.
    let shifted = &a + 5.0;
    assert!(kl_loss(a.view(), shifted.view(), 2.0).unwrap().abs() <= 1e-12);
    assert!(kl_loss(a.view(), Array2::zeros((2, 3)).view(), 1.0).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let x = Array2::from_shape_fn((1, 6), |_| 6.0 * (rng.random::<f64>() - 0.5));
        let y = Array2::from_shape_fn((1, 6), |_| 6.0 * (rng.random::<f64>() - 0.5));
        assert!(kl_loss(x.view(), y.view(), 1.7).unwrap() >= 0.0);
    }
}

#[test]
fn combined_loss_hinges() {
    let cfg = MaskTrainerConfig::default();
    let c = LossComponents {
        kl: 0.2,
        sparsity: 0.05,
        restoration: -5.0,
    };
    assert!((combined_loss(&c, &cfg) - cfg.beta * 0.2).abs() <= 1e-12);
    let boundary = LossComponents {
        restoration: -cfg.delta,
        ..c
    };
    assert!((combined_loss(&boundary, &cfg) - cfg.beta * 0.2).abs() <= 1e-12);
    let over = LossComponents {
        sparsity: cfg.s_max + 0.02,
        ..c
    };
    assert!((combined_loss(&over, &cfg) - cfg.beta * 0.2 - 0.02).abs() <= 1e-9);
    let both = LossComponents {
        kl: 0.1,
        sparsity: 0.3,
        restoration: 1.0,
    };
    assert!((combined_loss(&both, &cfg) - (3.26 * 0.1 + 0.2 + 4.0)).abs() <= 1e-9);
}

#[test]
fn binarize_and_apply() {
    let k = array![[0.71, 0.69], [0.7, 0.2]];
    let b = binarize(k.view(), 0.7);
    assert_eq!(b.keep, array![[1.0, 0.0], [1.0, 0.0]]);
    assert_eq!(b.pruned_fraction(), sparsity_loss(b.keep.view()));
    let near_one = binarize(k.view(), 1.0 - 1e-12);
    assert_eq!(near_one.pruned_count(), 4);

    let m = model();
    let ones = BinaryMask::ones(m.w_proj(1).dim());
    assert_eq!(apply_mask(&m, 1, &ones).unwrap(), m);
    let zeros = BinaryMask::zeros(m.w_proj(1).dim());
    let z = apply_mask(&m, 1, &zeros).unwrap();
    assert!(z.w_proj(1).iter().all(|&x| x == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mask = BinaryMask {
        keep: Array2::from_shape_fn(m.w_proj(1).dim(), |_| f64::from(rng.random::<bool>())),
        gamma: 0.5,
    };
    let p = apply_mask(&m, 1, &mask).unwrap();
    for ((k, a), b) in mask.keep.iter().zip(p.w_proj(1).iter()).zip(m.w_proj(1).iter()) {
        assert_eq!(*a, if *k == 1.0 { *b } else { 0.0 });
    }
    for ((name, a), (_, b)) in p.weights.tensors().iter().zip(m.weights.tensors()) {
        if name != "layers.1.w_proj" {
            assert_eq!(a, &b);
        }
    }
    assert!(apply_mask(&m, 1, &BinaryMask::ones((2, 2))).is_err());
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let m = model();
    let v = Vocab::build(6, 2, 6, 22);
    let es = edits(&m, &v, 3, 1);
    let samples = build_samples(&m, &es, &v, &neutral()).unwrap();
    // Margin large enough that the restoration hinge is active everywhere.
    let cfg = MaskTrainerConfig {
        delta: 50.0,
        ..MaskTrainerConfig::default()
    };
    let obj = MaskObjective {
        model: &m,
        layer: 1,
        cfg: &cfg,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let theta = Array2::from_shape_fn((12, 8), |_| 0.85 + 0.3 * (rng.random::<f64>() - 0.5));
    let batch: Vec<&MaskSample> = samples.iter().collect();
    let v0 = obj.evaluate(&theta, 2.0, 1.9, &batch, true).unwrap();
    assert!(v0.components.sparsity > cfg.s_max);
    let grad = v0.grad.unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for idx in 0..96 {
        let (a, b) = (idx / 8, idx % 8);
        let mut tp = theta.clone();
        tp[[a, b]] += h;
        let mut tm = theta.clone();
        tm[[a, b]] -= h;
        let fp = obj.evaluate(&tp, 2.0, 1.9, &batch, false).unwrap().loss;
        let fm = obj.evaluate(&tm, 2.0, 1.9, &batch, false).unwrap().loss;
        let num = (fp - fm) / (2.0 * h);
        let an = grad[[a, b]];
        worst = worst.max((an - num).abs() / an.abs().max(num.abs()).max(1e-6));
    }
    assert!(worst <= 1e-4, "{worst}");
}

#[test]
fn gamma_selection_respects_budget() {
    let p = |gamma, pruned_fraction, rsr| GammaPoint {
        gamma,
        pruned_fraction,
        rsr,
    };
    let pts = [p(0.1, 0.05, 0.4), p(0.2, 0.12, 0.8), p(0.3, 0.14, 0.8), p(0.5, 0.3, 1.0)];
    assert_eq!(select_gamma(&pts, 0.15).unwrap().gamma, 0.2);
    assert_eq!(select_gamma(&pts, 1.0).unwrap().gamma, 0.5);
    assert!(select_gamma(&pts, 0.01).is_none());
}
