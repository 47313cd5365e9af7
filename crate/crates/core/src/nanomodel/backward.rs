//! Reverse-mode gradients for the forward pass in `forward.rs`.

use ndarray::{s, Array1, Array2, Axis};

use super::forward::{gelu_grad, log_softmax_row, softmax_row, ForwardCache, Intervention, LnCache};
use super::{TransformerModel, Weights};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct BackwardOptions {
    /// Accumulate gradients for every stored parameter.
    pub param_grads: bool,
    /// Gradient w.r.t. the effective down-projection of this layer.
    pub proj_grad_layer: Option<usize>,
    /// Layers below this index are not visited.
    pub stop_layer: usize,
}

impl BackwardOptions {
    pub fn full() -> Self {
        Self {
            param_grads: true,
            proj_grad_layer: None,
            stop_layer: 0,
        }
    }

    /// Only the gradient of one layer's effective `w_proj`.
    pub fn proj_only(layer: usize) -> Self {
        Self {
            param_grads: false,
            proj_grad_layer: Some(layer),
            stop_layer: layer,
        }
    }

    /// Only activation gradients down to `layer`.
    pub fn activations_to(layer: usize) -> Self {
        Self {
            param_grads: false,
            proj_grad_layer: None,
            stop_layer: layer,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Option<Weights>,
    pub proj: Option<Array2<f64>>,
    /// `d loss / d mlp_out[l]` (`[T, d_model]`) for every visited layer.
    pub d_mlp_out: Vec<Option<Array2<f64>>>,
}

/// A next-token training example; `targets[i]` is predicted from position `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl Example {
    /// Full language-modelling targets: every token predicts its successor.
    pub fn language_model(seq: &[usize]) -> Self {
        let tokens = seq[..seq.len() - 1].to_vec();
        let targets = seq[1..].iter().map(|&t| Some(t)).collect();
        Self { tokens, targets }
    }

    /// Only the final token is scored, given everything before it.
    pub fn last_only(prompt: &[usize], answer: usize) -> Self {
        let mut targets = vec![None; prompt.len()];
        *targets.last_mut().expect("non-empty prompt") = Some(answer);
        Self {
            tokens: prompt.to_vec(),
            targets,
        }
    }
}

fn ln_backward(dy: &Array2<f64>, c: &LnCache, gain: &Array1<f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgain = (dy * &c.xhat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let (t, d) = dy.dim();
    let mut dx = Array2::zeros((t, d));
    for i in 0..t {
        let dh = dxhat.row(i);
        let xh = c.xhat.row(i);
        let m1 = dh.sum() / d as f64;
        let m2 = dh.dot(&xh) / d as f64;
        let r = c.rstd[i];
        for j in 0..d {
            dx[[i, j]] = r * (dh[j] - m1 - xh[j] * m2);
        }
    }
    (dx, dgain, dbias)
}

/// Mean cross-entropy over scored positions and its logit gradient.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[Option<usize>]) -> (f64, Array2<f64>) {
    let n = targets.iter().filter(|t| t.is_some()).count().max(1) as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            let lp = log_softmax_row(logits.row(i));
            loss -= lp[t];
            let mut g = softmax_row(logits.row(i));
            g[t] -= 1.0;
            grad.row_mut(i).assign(&(g / n));
        }
    }
    (loss / n, grad)
}

impl TransformerModel {
    /// Backpropagates `dlogits` through a cached forward pass. `iv` must be the
    /// intervention the cache was produced with.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &Array2<f64>,
        iv: &Intervention,
        opts: &BackwardOptions,
    ) -> Gradients {
        let cfg = &self.config;
        let w = &self.weights;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut pg = opts.param_grads.then(|| Weights::zeros(cfg));
        let mut proj_grad = None;
        let mut d_mlp_out = vec![None; cfg.n_layers];

        if let Some(g) = pg.as_mut() {
            let y = &cache.lnf.xhat * &w.lnf_g + &w.lnf_b;
            g.unembed = y.t().dot(dlogits);
        }
        let dy = dlogits.dot(&w.unembed.t());
        let (mut dx, dg, db) = ln_backward(&dy, &cache.lnf, &w.lnf_g);
        if let Some(g) = pg.as_mut() {
            g.lnf_g = dg;
            g.lnf_b = db;
        }

        for li in (opts.stop_layer..cfg.n_layers).rev() {
            let lc = &cache.layers[li];
            let lw = &w.layers[li];
            d_mlp_out[li] = Some(dx.clone());

            let mut dm = dx.clone();
            if let Some(vo) = iv.value.filter(|vo| vo.layer == li) {
                dm.row_mut(vo.position).fill(0.0);
            }
            let proj = iv.proj_for(li).unwrap_or(&lw.w_proj);
            let dproj = (opts.param_grads || opts.proj_grad_layer == Some(li)).then(|| lc.g.t().dot(&dm));
            if opts.proj_grad_layer == Some(li) {
                proj_grad = dproj.clone();
            }
            if li == opts.stop_layer && !opts.param_grads {
                break;
            }
            let dgel = dm.dot(&proj.t());
            let dh = &dgel * &lc.h.mapv(gelu_grad);
            let da2 = dh.dot(&lw.w_fc.t());
            let (dxm_ln, dg2, db2) = ln_backward(&da2, &lc.ln2, &lw.ln2_g);
            let dx_mid = &dx + &dxm_ln;

            let dctx = dx_mid.dot(&lw.w_o.t());
            let t = cache.seq_len();
            let mut dq = Array2::zeros((t, cfg.d_model));
            let mut dk = Array2::zeros((t, cfg.d_model));
            let mut dv = Array2::zeros((t, cfg.d_model));
            for (h, p) in lc.probs.iter().enumerate() {
                let cols = s![.., h * hd..(h + 1) * hd];
                let dout = dctx.slice(cols);
                let vh = lc.v.slice(cols);
                dv.slice_mut(cols).assign(&p.t().dot(&dout));
                let dp = dout.dot(&vh.t());
                let mut ds = Array2::zeros((t, t));
                for i in 0..t {
                    let mut dot = 0.0;
                    for j in 0..=i {
                        dot += p[[i, j]] * dp[[i, j]];
                    }
                    for j in 0..=i {
                        ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                    }
                }
                dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
            }
            let da1 = dq.dot(&lw.w_q.t()) + dk.dot(&lw.w_k.t()) + dv.dot(&lw.w_v.t());
            let (dxin_ln, dg1, db1) = ln_backward(&da1, &lc.ln1, &lw.ln1_g);

            if let Some(g) = pg.as_mut() {
                let gl = &mut g.layers[li];
                gl.w_proj = dproj.expect("computed when param_grads");
                gl.w_fc = lc.a2.t().dot(&dh);
                gl.ln2_g = dg2;
                gl.ln2_b = db2;
                gl.w_o = lc.ctx.t().dot(&dx_mid);
                gl.w_q = lc.a1.t().dot(&dq);
                gl.w_k = lc.a1.t().dot(&dk);
                gl.w_v = lc.a1.t().dot(&dv);
                gl.ln1_g = dg1;
                gl.ln1_b = db1;
            }
            dx = dx_mid + dxin_ln;
        }

        if opts.stop_layer == 0 {
            if let Some(g) = pg.as_mut() {
                for (i, &tok) in cache.tokens.iter().enumerate() {
                    let row = dx.row(i);
                    let mut e = g.tok_emb.row_mut(tok);
                    e += &row;
                    let mut p = g.pos_emb.row_mut(i);
                    p += &row;
                }
            }
        }

        Gradients {
            params: pg,
            proj: proj_grad,
            d_mlp_out,
        }
    }

    /// Mean cross-entropy over `examples` (each example weighted equally) and
    /// its gradient with respect to every parameter.
    pub fn loss_and_grads(&self, examples: &[Example]) -> Result<(f64, Weights)> {
        if examples.is_empty() {
            return Err(Error::Empty("example batch"));
        }
        let mut total = Weights::zeros(&self.config);
        let mut loss = 0.0;
        let inv = 1.0 / examples.len() as f64;
        for ex in examples {
            let cache = self.run(&ex.tokens, &Intervention::none())?;
            let (l, dl) = cross_entropy(&cache.logits, &ex.targets);
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    term: "cross_entropy".into(),
                });
            }
            loss += l * inv;
            let g = self.backward(&cache, &dl, &Intervention::none(), &BackwardOptions::full());
            total.add_scaled(g.params.as_ref().expect("full backward"), inv);
        }
        Ok((loss, total))
    }
}
