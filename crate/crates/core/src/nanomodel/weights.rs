use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    /// `[d_model, d_mlp]`
    pub w_fc: Array2<f64>,
    /// `[d_mlp, d_model]`; rows are hidden units, columns are output dimensions.
    pub w_proj: Array2<f64>,
}

/// All trainable tensors. Linear maps are stored `[in, out]` and applied as `x · W`.
/// The same struct doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    /// `[d_model, vocab]`, untied from `tok_emb`.
    pub unembed: Array2<f64>,
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layer = LayerWeights {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            w_o: Array2::zeros((d, d)),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w_fc: Array2::zeros((d, cfg.d_mlp)),
            w_proj: Array2::zeros((cfg.d_mlp, d)),
        };
        Self {
            tok_emb: Array2::zeros((cfg.vocab_size, d)),
            pos_emb: Array2::zeros((cfg.max_seq_len, d)),
            layers: vec![layer; cfg.n_layers],
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            unembed: Array2::zeros((d, cfg.vocab_size)),
        }
    }

    /// GPT-2 style init: N(0, 0.02), residual-writing matrices scaled by 1/sqrt(2L).
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut w = Self::zeros(cfg);
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        let mut fill = |a: &mut Array2<f64>, s: f64| {
            let n = Normal::new(0.0, s).expect("valid std");
            a.iter_mut().for_each(|x| *x = n.sample(&mut rng));
        };
        fill(&mut w.tok_emb, std);
        fill(&mut w.pos_emb, std);
        for l in &mut w.layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            fill(&mut l.w_q, std);
            fill(&mut l.w_k, std);
            fill(&mut l.w_v, std);
            fill(&mut l.w_o, resid_std);
            fill(&mut l.w_fc, std);
            fill(&mut l.w_proj, resid_std);
        }
        w.lnf_g.fill(1.0);
        fill(&mut w.unembed, std);
        w
    }

    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push((p("ln1_g"), l.ln1_g.view().into_dyn()));
            out.push((p("ln1_b"), l.ln1_b.view().into_dyn()));
            out.push((p("w_q"), l.w_q.view().into_dyn()));
            out.push((p("w_k"), l.w_k.view().into_dyn()));
            out.push((p("w_v"), l.w_v.view().into_dyn()));
            out.push((p("w_o"), l.w_o.view().into_dyn()));
            out.push((p("ln2_g"), l.ln2_g.view().into_dyn()));
            out.push((p("ln2_b"), l.ln2_b.view().into_dyn()));
            out.push((p("w_fc"), l.w_fc.view().into_dyn()));
            out.push((p("w_proj"), l.w_proj.view().into_dyn()));
        }
        out.push(("lnf_g".to_string(), self.lnf_g.view().into_dyn()));
        out.push(("lnf_b".to_string(), self.lnf_b.view().into_dyn()));
        out.push(("unembed".to_string(), self.unembed.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view_mut().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push((p("ln1_g"), l.ln1_g.view_mut().into_dyn()));
            out.push((p("ln1_b"), l.ln1_b.view_mut().into_dyn()));
            out.push((p("w_q"), l.w_q.view_mut().into_dyn()));
            out.push((p("w_k"), l.w_k.view_mut().into_dyn()));
            out.push((p("w_v"), l.w_v.view_mut().into_dyn()));
            out.push((p("w_o"), l.w_o.view_mut().into_dyn()));
            out.push((p("ln2_g"), l.ln2_g.view_mut().into_dyn()));
            out.push((p("ln2_b"), l.ln2_b.view_mut().into_dyn()));
            out.push((p("w_fc"), l.w_fc.view_mut().into_dyn()));
            out.push((p("w_proj"), l.w_proj.view_mut().into_dyn()));
        }
        out.push(("lnf_g".to_string(), self.lnf_g.view_mut().into_dyn()));
        out.push(("lnf_b".to_string(), self.lnf_b.view_mut().into_dyn()));
        out.push(("unembed".to_string(), self.unembed.view_mut().into_dyn()));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.zip_mut_with(&b, |x, y| *x += scale * y);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Rounds every entry to the nearest f32 so the checkpoint is lossless.
    pub fn snap_to_f32(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x as f32 as f64);
        }
    }
}
