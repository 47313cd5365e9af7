use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    binarize, combined_loss, kl_row, masked_matrix, soft_mask, sparsity_loss, LossComponents, MaskState,
    MaskTrainerConfig,
};
use crate::corpus::Vocab;
use crate::editor::EditedLayerWeights;
use crate::error::{Error, Result};
use crate::nanomodel::{softmax_row, AdamW, BackwardOptions, Intervention, TransformerModel};

/// One edit as seen by the mask trainer.
#[derive(Debug, Clone)]
pub struct MaskSample {
    pub edit_id: String,
    pub edited: Array2<f64>,
    pub prompt: Vec<usize>,
    pub o: usize,
    pub o_star: usize,
    /// Neutral window paired with this edit for the KL term.
    pub neutral: Vec<usize>,
    /// Base-model final-position logits for `[prompt, neutral]`.
    pub reference: [Array1<f64>; 2],
}

/// Pairs every edit with its canonical prompt, a neutral window and the
/// frozen base model's reference logits.
pub fn build_samples(
    model: &TransformerModel,
    edits: &[EditedLayerWeights],
    vocab: &Vocab,
    neutral: &[usize],
) -> Result<Vec<MaskSample>> {
    let first = edits.first().ok_or(Error::Empty("mask training edits"))?;
    let win = model.config.max_seq_len;
    if neutral.len() < win {
        return Err(Error::InvalidArgument(format!(
            "neutral text has {} tokens, need at least {win}",
            neutral.len()
        )));
    }
    let span = neutral.len() - win + 1;
    let mut out = Vec::new();
    for e in edits {
        if e.layer != first.layer || e.edited.dim() != first.edited.dim() {
            return Err(Error::EditMismatch {
                edit_id: e.label(),
                message: format!(
                    "layer {} shape {:?} differs from layer {} shape {:?}",
                    e.layer,
                    e.edited.dim(),
                    first.layer,
                    first.edited.dim()
                ),
            });
        }
        for r in &e.records {
            let prompt = r.fact.prompt(vocab)?.tokens;
            let start = (out.len() * 7919 * (win - 1)) % span;
            let window = neutral[start..start + win].to_vec();
            let reference = [
                model.last_logits(&prompt, &Intervention::none())?,
                model.last_logits(&window, &Intervention::none())?,
            ];
            out.push(MaskSample {
                edit_id: r.edit_id.clone(),
                edited: e.edited.clone(),
                prompt,
                o: r.o,
                o_star: r.o_star,
                neutral: window,
                reference,
            });
        }
    }
    Ok(out)
}

/// Mean per-sample penalty objective over a batch, with its gradient in Θ.
pub struct MaskObjective<'a> {
    pub model: &'a TransformerModel,
    pub layer: usize,
    pub cfg: &'a MaskTrainerConfig,
}

#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub loss: f64,
    /// Batch means of the three terms.
    pub components: LossComponents,
    pub grad: Option<Array2<f64>>,
}

impl MaskObjective<'_> {
    pub fn evaluate(
        &self,
        theta: &Array2<f64>,
        tau: f64,
        temperature: f64,
        batch: &[&MaskSample],
        with_grad: bool,
    ) -> Result<ObjectiveValue> {
        if batch.is_empty() {
            return Err(Error::Empty("mask batch"));
        }
        let k = soft_mask(theta.view(), tau)?;
        let sparsity = sparsity_loss(k.view());
        let sparse_active = sparsity > self.cfg.s_max;
        let n = batch.len() as f64;
        let mut grad_k = with_grad.then(|| Array2::<f64>::zeros(k.dim()));
        let mut kl_sum = 0.0;
        let mut rest_sum = 0.0;
        let mut loss = 0.0;
        for s in batch {
            if s.edited.dim() != k.dim() {
                return Err(Error::EditMismatch {
                    edit_id: s.edit_id.clone(),
                    message: format!("matrix {:?} vs mask {:?}", s.edited.dim(), k.dim()),
                });
            }
            let w_eff = &s.edited * &k;
            let ov = [(self.layer, &w_eff)];
            let iv = Intervention { proj: &ov, value: None };
            let mut d_w = with_grad.then(|| Array2::<f64>::zeros(k.dim()));
            let mut kl = 0.0;
            let mut restoration = 0.0;
            let mut dlogit_rows = Vec::with_capacity(2);
            for (j, tokens) in [&s.prompt, &s.neutral].into_iter().enumerate() {
                let cache = self.model.run(tokens, &iv)?;
                let last = tokens.len() - 1;
                let z = cache.logits.row(last);
                let r = &s.reference[j];
                kl += kl_row(r.view(), z, temperature) / 2.0;
                let q_t = softmax_row((&z / temperature).view());
                let p_t = softmax_row((r / temperature).view());
                let mut dz = (&q_t - &p_t) * (self.cfg.beta / (2.0 * temperature));
                if j == 0 {
                    restoration = z[s.o_star] - z[s.o];
                    if restoration + self.cfg.delta > 0.0 {
                        dz[s.o_star] += 1.0;
                        dz[s.o] -= 1.0;
                    }
                }
                if !kl.is_finite() || !restoration.is_finite() {
                    return Err(Error::NonFinite {
                        term: format!("mask objective for {}", s.edit_id),
                    });
                }
                dlogit_rows.push((cache, last, dz));
            }
            if let Some(d_w) = d_w.as_mut() {
                for (cache, last, dz) in dlogit_rows {
                    let mut dl = Array2::zeros(cache.logits.dim());
                    dl.row_mut(last).assign(&dz);
                    let g = self
                        .model
                        .backward(&cache, &dl, &iv, &BackwardOptions::proj_only(self.layer));
                    *d_w += &g.proj.expect("projection gradient requested");
                }
                let gk = grad_k.as_mut().expect("allocated with gradient");
                gk.scaled_add(1.0 / n, &(&*d_w * &s.edited));
            }
            let c = LossComponents {
                kl,
                sparsity,
                restoration,
            };
            loss += combined_loss(&c, self.cfg) / n;
            kl_sum += kl;
            rest_sum += restoration;
        }
        let grad = grad_k.map(|mut gk| {
            if sparse_active {
                gk -= 1.0 / k.len() as f64;
            }
            gk * &k.mapv(|v| v * (1.0 - v) / tau)
        });
        Ok(ObjectiveValue {
            loss,
            components: LossComponents {
                kl: kl_sum / n,
                sparsity,
                restoration: rest_sum / n,
            },
            grad,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingLogRow {
    pub epoch: usize,
    pub l_kl: f64,
    pub l_sparsity: f64,
    pub l_restoration: f64,
    pub total: f64,
    pub tau: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone)]
pub struct MaskTraining {
    pub state: MaskState,
    pub log: Vec<TrainingLogRow>,
    pub layer: usize,
}

impl MaskTraining {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,l_kl,l_sparsity,l_restoration,total,tau,temperature\n");
        for r in &self.log {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch, r.l_kl, r.l_sparsity, r.l_restoration, r.total, r.tau, r.temperature
            )
            .expect("writing to a String");
        }
        s
    }
}

/// Trains one mask across every edit. The base model and edited matrices
/// are only read; Θ is the sole trainable tensor.
pub fn train_shared_mask(
    model: &TransformerModel,
    layer: usize,
    samples: &[MaskSample],
    cfg: &MaskTrainerConfig,
) -> Result<MaskTraining> {
    cfg.validate()?;
    let first = samples.first().ok_or(Error::Empty("mask training samples"))?;
    let shape = first.edited.dim();
    if layer >= model.config.n_layers || model.w_proj(layer).dim() != shape {
        return Err(Error::EditMismatch {
            edit_id: first.edit_id.clone(),
            message: format!("matrix {shape:?} does not fit layer {layer}"),
        });
    }
    if let Some(s) = samples.iter().find(|s| s.edited.dim() != shape) {
        return Err(Error::EditMismatch {
            edit_id: s.edit_id.clone(),
            message: format!("matrix {:?} differs from {:?}", s.edited.dim(), shape),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(cfg.init_mean, cfg.init_std)
        .map_err(|e| Error::InvalidArgument(format!("mask init: {e}")))?;
    let mut theta = Array2::from_shape_simple_fn(shape, || normal.sample(&mut rng));
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let objective = MaskObjective { model, layer, cfg };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let tau = cfg.tau_at(epoch as f64);
        let temperature = cfg.temperature_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = LossComponents {
            kl: 0.0,
            sparsity: 0.0,
            restoration: 0.0,
        };
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch: Vec<&MaskSample> = chunk.iter().map(|&i| &samples[i]).collect();
            batch.sort_by(|a, b| a.edit_id.cmp(&b.edit_id));
            let v = objective.evaluate(&theta, tau, temperature, &batch, true)?;
            let grad = v.grad.expect("gradient requested");
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    term: format!("mask gradient at epoch {epoch}"),
                });
            }
            opt.step(
                [theta.as_slice_mut().expect("contiguous")],
                [grad.as_slice().expect("contiguous")],
            );
            sums.kl += v.components.kl;
            sums.sparsity += v.components.sparsity;
            sums.restoration += v.components.restoration;
            batches += 1.0;
        }
        let mean = LossComponents {
            kl: sums.kl / batches,
            sparsity: sums.sparsity / batches,
            restoration: sums.restoration / batches,
        };
        log.push(TrainingLogRow {
            epoch,
            l_kl: mean.kl,
            l_sparsity: mean.sparsity,
            l_restoration: mean.restoration,
            total: combined_loss(&mean, cfg),
            tau,
            temperature,
        });
    }
    Ok(MaskTraining {
        state: MaskState {
            theta,
            tau: cfg.tau_at(cfg.epochs as f64),
            gamma: cfg.gamma,
        },
        log,
        layer,
    })
}

/// One point of the binarization-threshold trade-off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPoint {
    pub gamma: f64,
    pub pruned_fraction: f64,
    /// Share of samples whose binarized pruned model prefers `o` over `o*`.
    pub rsr: f64,
}

/// Binarizes `soft` at each threshold and scores reversal on `samples`.
pub fn gamma_sweep(
    model: &TransformerModel,
    layer: usize,
    samples: &[MaskSample],
    soft: &Array2<f64>,
    gammas: &[f64],
) -> Result<Vec<GammaPoint>> {
    if samples.is_empty() {
        return Err(Error::Empty("gamma sweep samples"));
    }
    let mut out = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("gamma must lie in (0, 1), got {gamma}")));
        }
        let mask = binarize(soft.view(), gamma);
        let mut reversed = 0;
        for s in samples {
            let w = masked_matrix(&s.edited, &mask)?;
            let ov = [(layer, &w)];
            let z = model.last_logits(&s.prompt, &Intervention { proj: &ov, value: None })?;
            if z[s.o] > z[s.o_star] {
                reversed += 1;
            }
        }
        out.push(GammaPoint {
            gamma,
            pruned_fraction: mask.pruned_fraction(),
            rsr: reversed as f64 / samples.len() as f64,
        });
    }
    Ok(out)
}

/// Highest-RSR point whose pruned fraction fits `budget`; ties go to the
/// sparser mask, then to the larger threshold.
pub fn select_gamma(points: &[GammaPoint], budget: f64) -> Option<GammaPoint> {
    points
        .iter()
        .filter(|p| p.pruned_fraction <= budget)
        .copied()
        .max_by(|a, b| {
            a.rsr
                .total_cmp(&b.rsr)
                .then(b.pruned_fraction.total_cmp(&a.pruned_fraction))
                .then(a.gamma.total_cmp(&b.gamma))
        })
}
