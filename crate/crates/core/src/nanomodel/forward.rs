//! Pre-norm decoder forward pass with cached activations.

use ndarray::{s, Array1, Array2, ArrayView1};

use super::{TransformerModel, Weights};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Replaces the MLP output (before the residual add) at one position.
#[derive(Debug, Clone, Copy)]
pub struct ValueOverride<'a> {
    pub layer: usize,
    pub position: usize,
    pub value: ArrayView1<'a, f64>,
}

/// Forward-time substitutions that leave the model itself untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct Intervention<'a> {
    /// `(layer, matrix)` pairs used instead of the stored `w_proj`.
    pub proj: &'a [(usize, &'a Array2<f64>)],
    pub value: Option<ValueOverride<'a>>,
}

impl<'a> Intervention<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub(crate) fn proj_for(&self, layer: usize) -> Option<&'a Array2<f64>> {
        self.proj.iter().find(|(l, _)| *l == layer).map(|(_, m)| *m)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub x_in: Array2<f64>,
    pub ln1: LnCache,
    pub a1: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per head `[T, T]` causal attention probabilities.
    pub probs: Vec<Array2<f64>>,
    pub ctx: Array2<f64>,
    pub attn_out: Array2<f64>,
    pub x_mid: Array2<f64>,
    pub ln2: LnCache,
    pub a2: Array2<f64>,
    pub h: Array2<f64>,
    pub g: Array2<f64>,
    pub mlp_out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) tokens: Vec<usize>,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) final_resid: Array2<f64>,
    pub(crate) lnf: LnCache,
    pub logits: Array2<f64>,
}

impl ForwardCache {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn trace(&self) -> ResidualTrace {
        let mut resid: Vec<Array2<f64>> = self.layers.iter().map(|l| l.x_in.clone()).collect();
        resid.push(self.final_resid.clone());
        ResidualTrace {
            resid,
            resid_mid: self.layers.iter().map(|l| l.x_mid.clone()).collect(),
            attn_out: self.layers.iter().map(|l| l.attn_out.clone()).collect(),
            mlp_out: self.layers.iter().map(|l| l.mlp_out.clone()).collect(),
            mlp_keys: self.layers.iter().map(|l| l.g.clone()).collect(),
        }
    }
}

/// Residual stream snapshots, each `[T, d_model]` (keys are `[T, d_mlp]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    /// `resid[l]` enters block `l`; `resid[n_layers]` is the final residual.
    pub resid: Vec<Array2<f64>>,
    pub resid_mid: Vec<Array2<f64>>,
    pub attn_out: Vec<Array2<f64>>,
    pub mlp_out: Vec<Array2<f64>>,
    /// Post-activation MLP hidden vectors, the keys read by `w_proj`.
    pub mlp_keys: Vec<Array2<f64>>,
}

impl ResidualTrace {
    pub fn n_layers(&self) -> usize {
        self.attn_out.len()
    }

    pub fn embedding(&self) -> &Array2<f64> {
        &self.resid[0]
    }

    pub fn final_resid(&self) -> &Array2<f64> {
        &self.resid[self.n_layers()]
    }
}

pub(crate) fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>, eps: f64) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut rstd = Array1::zeros(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            xhat[[i, j]] = (row[j] - mean) * r;
        }
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

pub(crate) fn softmax_row(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = logits.mapv(|x| (x - max).exp());
    let z = e.sum();
    e /= z;
    e
}

pub(crate) fn log_softmax_row(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.mapv(|x| x - lse)
}

impl TransformerModel {
    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some((position, &token)) =
            tokens.iter().enumerate().find(|(_, &t)| t >= self.config.vocab_size)
        {
            return Err(Error::OutOfVocab {
                token,
                position,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Full forward pass retaining every intermediate needed for backward.
    pub fn run(&self, tokens: &[usize], iv: &Intervention) -> Result<ForwardCache> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let w: &Weights = &self.weights;
        let t = tokens.len();
        let d = cfg.d_model;
        let nh = cfg.n_heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = Array2::zeros((t, d));
        for (i, &tok) in tokens.iter().enumerate() {
            let mut row = x.row_mut(i);
            row += &w.tok_emb.row(tok);
            row += &w.pos_emb.row(i);
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (li, lw) in w.layers.iter().enumerate() {
            let x_in = x;
            let (a1, ln1) = layer_norm(&x_in, &lw.ln1_g, &lw.ln1_b, cfg.ln_eps);
            let q = a1.dot(&lw.w_q);
            let k = a1.dot(&lw.w_k);
            let v = a1.dot(&lw.w_v);
            let mut ctx = Array2::zeros((t, d));
            let mut probs = Vec::with_capacity(nh);
            for h in 0..nh {
                let cols = s![.., h * hd..(h + 1) * hd];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut p = Array2::zeros((t, t));
                for i in 0..t {
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let sc = qh.row(i).dot(&kh.row(j)) * scale;
                        p[[i, j]] = sc;
                        max = max.max(sc);
                    }
                    let mut z = 0.0;
                    for j in 0..=i {
                        let e = (p[[i, j]] - max).exp();
                        p[[i, j]] = e;
                        z += e;
                    }
                    for j in 0..=i {
                        p[[i, j]] /= z;
                    }
                }
                ctx.slice_mut(cols).assign(&p.dot(&vh));
                probs.push(p);
            }
            let attn_out = ctx.dot(&lw.w_o);
            let x_mid = &x_in + &attn_out;
            let (a2, ln2) = layer_norm(&x_mid, &lw.ln2_g, &lw.ln2_b, cfg.ln_eps);
            let h = a2.dot(&lw.w_fc);
            let g = h.mapv(gelu);
            let proj = iv.proj_for(li).unwrap_or(&lw.w_proj);
            let mut mlp_out = g.dot(proj);
            if let Some(vo) = iv.value.filter(|vo| vo.layer == li) {
                if vo.position >= t || vo.value.len() != d {
                    return Err(Error::InvalidArgument(format!(
                        "value override at position {} with dim {} (seq len {t}, d_model {d})",
                        vo.position,
                        vo.value.len()
                    )));
                }
                mlp_out.row_mut(vo.position).assign(&vo.value);
            }
            x = &x_mid + &mlp_out;
            layers.push(LayerCache {
                x_in,
                ln1,
                a1,
                q,
                k,
                v,
                probs,
                ctx,
                attn_out,
                x_mid,
                ln2,
                a2,
                h,
                g,
                mlp_out,
            });
        }
        let (y, lnf) = layer_norm(&x, &w.lnf_g, &w.lnf_b, cfg.ln_eps);
        let logits = y.dot(&w.unembed);
        Ok(ForwardCache {
            tokens: tokens.to_vec(),
            layers,
            final_resid: x,
            lnf,
            logits,
        })
    }

    /// Logits `[T, vocab]`, plus the residual trace when `capture` is set.
    pub fn forward(&self, tokens: &[usize], capture: bool) -> Result<(Array2<f64>, Option<ResidualTrace>)> {
        self.forward_with(tokens, capture, &Intervention::none())
    }

    pub fn forward_with(
        &self,
        tokens: &[usize],
        capture: bool,
        iv: &Intervention,
    ) -> Result<(Array2<f64>, Option<ResidualTrace>)> {
        let cache = self.run(tokens, iv)?;
        let trace = capture.then(|| cache.trace());
        Ok((cache.logits, trace))
    }

    /// Next-token distribution after the last prompt token.
    pub fn next_token_probs(&self, prompt: &[usize], iv: &Intervention) -> Result<Array1<f64>> {
        let cache = self.run(prompt, iv)?;
        Ok(softmax_row(cache.logits.row(prompt.len() - 1)))
    }

    /// Final-position logits.
    pub fn last_logits(&self, prompt: &[usize], iv: &Intervention) -> Result<Array1<f64>> {
        let cache = self.run(prompt, iv)?;
        Ok(cache.logits.row(prompt.len() - 1).to_owned())
    }

    /// `P(token | prompt)`.
    pub fn object_prob(&self, prompt: &[usize], token: usize) -> Result<f64> {
        if token >= self.config.vocab_size {
            return Err(Error::OutOfVocab {
                token,
                position: prompt.len(),
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(self.next_token_probs(prompt, &Intervention::none())?[token])
    }

    /// Argmax next token with lowest-index tie-break.
    pub fn top1(&self, prompt: &[usize]) -> Result<usize> {
        Ok(argmax(self.last_logits(prompt, &Intervention::none())?.view()))
    }

    /// `exp(mean NLL)` with teacher forcing. Windows of `max_seq_len` tokens
    /// advance by `max_seq_len - 1`, so consecutive windows share one token and
    /// every token after the first is predicted exactly once.
    pub fn perplexity(&self, stream: &[usize]) -> Result<f64> {
        let (nll, n) = self.stream_nll(stream)?;
        Ok((nll / n as f64).exp())
    }

    /// Summed negative log-likelihood and number of predicted tokens.
    pub fn stream_nll(&self, stream: &[usize]) -> Result<(f64, usize)> {
        if stream.len() < 2 {
            return Err(Error::Empty("perplexity stream (needs >= 2 tokens)"));
        }
        let win = self.config.max_seq_len;
        let stride = win - 1;
        let mut nll = 0.0;
        let mut n = 0;
        let mut start = 0;
        while start + 1 < stream.len() {
            let end = (start + win).min(stream.len());
            let chunk = &stream[start..end];
            let cache = self.run(chunk, &Intervention::none())?;
            for i in 0..chunk.len() - 1 {
                let lp = log_softmax_row(cache.logits.row(i));
                nll -= lp[chunk[i + 1]];
                n += 1;
            }
            start += stride;
        }
        Ok((nll, n))
    }
}

pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
