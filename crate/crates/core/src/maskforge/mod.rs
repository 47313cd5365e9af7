//! Shared binary mask over edited weight matrices: soft mask, loss terms,
//! training, binarization and application.

mod train;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2, Ix2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nanomodel::{log_softmax_row, read_tensor_file, softmax_row, write_tensor_file, TransformerModel};

pub use train::{
    build_samples, gamma_sweep, select_gamma, train_shared_mask, GammaPoint, MaskObjective, MaskSample, MaskTraining,
    ObjectiveValue, TrainingLogRow,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskTrainerConfig {
    /// Restoration margin δ.
    pub delta: f64,
    /// Largest tolerated pruned fraction.
    pub s_max: f64,
    /// KL weight β.
    pub beta: f64,
    pub t_start: f64,
    pub t_max: f64,
    pub tau_start: f64,
    /// τ(t) = τ₀ / (1 + rate·t/epochs).
    pub tau_decay: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_mean: f64,
    pub init_std: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for MaskTrainerConfig {
    fn default() -> Self {
        Self {
            delta: 3.0,
            s_max: 0.10,
            beta: 3.26,
            t_start: 1.64,
            t_max: 4.30,
            tau_start: 6.0,
            tau_decay: 3.0,
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 300,
            batch_size: 8,
            init_mean: 0.85,
            init_std: 0.1,
            gamma: 0.7,
            seed: 0,
        }
    }
}

impl MaskTrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: format!("mask.{key}"),
                message: message.to_string(),
            })
        };
        if !(self.s_max > 0.0 && self.s_max < 1.0) {
            return bad("s_max", "must lie in (0, 1)");
        }
        if !(self.delta >= 0.0) {
            return bad("delta", "margin must be >= 0");
        }
        if !(self.beta >= 0.0) {
            return bad("beta", "must be >= 0");
        }
        if !(self.t_start > 0.0 && self.t_start <= self.t_max) {
            return bad("t_start", "need 0 < t_start <= t_max");
        }
        if !(self.tau_start > 0.0) || !(self.tau_decay >= 0.0) {
            return bad("tau_start", "need tau_start > 0 and tau_decay >= 0");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr", "need lr > 0 and weight_decay >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.init_std >= 0.0) {
            return bad("init_std", "must be >= 0");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in (0, 1)");
        }
        Ok(())
    }

    /// Mask temperature at (fractional) epoch `t`.
    pub fn tau_at(&self, t: f64) -> f64 {
        self.tau_start / (1.0 + self.tau_decay * t / self.epochs.max(1) as f64)
    }

    /// KL temperature, linear from `t_start` at the first epoch to `t_max` at the last.
    pub fn temperature_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.t_start;
        }
        self.t_start + (self.t_max - self.t_start) * epoch as f64 / (self.epochs - 1) as f64
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `K = σ(Θ/τ)`.
pub fn soft_mask(theta: ArrayView2<f64>, tau: f64) -> Result<Array2<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("mask temperature must be > 0, got {tau}")));
    }
    Ok(theta.mapv(|t| sigmoid(t / tau)))
}

/// `-(log P(o) - log P(o*))`; negative iff the original object is preferred.
pub fn restoration_loss(p_o: f64, p_o_star: f64) -> Result<f64> {
    if !(p_o > 0.0) || !(p_o_star > 0.0) {
        return Err(Error::ZeroProbability("restoration loss"));
    }
    Ok(-(p_o.ln() - p_o_star.ln()))
}

/// Restoration loss straight from logits.
pub fn restoration_from_logits(logits: ArrayView1<f64>, o: usize, o_star: usize) -> f64 {
    logits[o_star] - logits[o]
}

/// Mean pruned mass `(1/|K|) Σ (1 - k)`.
pub fn sparsity_loss(k: ArrayView2<f64>) -> f64 {
    if k.is_empty() {
        return 0.0;
    }
    k.iter().map(|v| 1.0 - v).sum::<f64>() / k.len() as f64
}

/// Mean over rows of `KL(softmax(a/T) ‖ softmax(b/T))`.
pub fn kl_loss(reference: ArrayView2<f64>, pruned: ArrayView2<f64>, temperature: f64) -> Result<f64> {
    if reference.dim() != pruned.dim() {
        return Err(Error::ShapeMismatch(format!(
            "KL over {:?} vs {:?} logits",
            reference.dim(),
            pruned.dim()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("KL temperature must be > 0, got {temperature}")));
    }
    if reference.nrows() == 0 {
        return Err(Error::Empty("KL positions"));
    }
    let mut total = 0.0;
    for (a, b) in reference.rows().into_iter().zip(pruned.rows()) {
        total += kl_row(a, b, temperature);
    }
    Ok(total / reference.nrows() as f64)
}

pub(crate) fn kl_row(a: ArrayView1<f64>, b: ArrayView1<f64>, temperature: f64) -> f64 {
    let la = log_softmax_row((&a / temperature).view());
    let lb = log_softmax_row((&b / temperature).view());
    let p = softmax_row((&a / temperature).view());
    p.iter()
        .zip(la.iter().zip(lb.iter()))
        .map(|(p, (x, y))| if *p > 0.0 { p * (x - y) } else { 0.0 })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub kl: f64,
    pub sparsity: f64,
    pub restoration: f64,
}

/// `β·KL + max(0, L_sparsity − S_max) + max(0, L_restoration + δ)`.
pub fn combined_loss(c: &LossComponents, cfg: &MaskTrainerConfig) -> f64 {
    cfg.beta * c.kl + (c.sparsity - cfg.s_max).max(0.0) + (c.restoration + cfg.delta).max(0.0)
}

/// Trainable mask parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    pub theta: Array2<f64>,
    pub tau: f64,
    pub gamma: f64,
}

impl MaskState {
    pub fn soft(&self) -> Array2<f64> {
        soft_mask(self.theta.view(), self.tau).expect("tau validated at construction")
    }

    pub fn binarize(&self) -> BinaryMask {
        binarize(self.soft().view(), self.gamma)
    }

    /// Tensor file with Θ plus a JSON sidecar carrying the scalars.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "mask_state",
            "tau": self.tau,
            "gamma": self.gamma,
            "extra": extra,
        });
        write_tensor_file(path, &meta, &[("theta".to_string(), self.theta.view().into_dyn())])?;
        let side = sidecar(path);
        fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = read_tensor_file(path)?;
        let bad = |m: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        let theta = f
            .get("theta")
            .ok_or_else(|| bad("missing theta"))?
            .clone()
            .into_dimensionality::<Ix2>()
            .map_err(|_| bad("theta is not 2-d"))?;
        let tau = f.meta["tau"].as_f64().ok_or_else(|| bad("missing tau"))?;
        let gamma = f.meta["gamma"].as_f64().ok_or_else(|| bad("missing gamma"))?;
        Ok(Self { theta, tau, gamma })
    }
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Hard 0/1 mask; 1 keeps the weight.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub keep: Array2<f64>,
    pub gamma: f64,
}

impl BinaryMask {
    pub fn ones(shape: (usize, usize)) -> Self {
        Self {
            keep: Array2::ones(shape),
            gamma: 0.5,
        }
    }

    pub fn zeros(shape: (usize, usize)) -> Self {
        Self {
            keep: Array2::zeros(shape),
            gamma: 0.5,
        }
    }

    pub fn pruned_fraction(&self) -> f64 {
        sparsity_loss(self.keep.view())
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k == 0.0).count()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.keep.dim()
    }

    /// SHA-256 of the row-major keep bits.
    pub fn checksum(&self) -> String {
        let bytes: Vec<u8> = self.keep.iter().map(|&k| u8::from(k != 0.0)).collect();
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "binary_mask",
            "gamma": self.gamma,
            "pruned_fraction": self.pruned_fraction(),
            "checksum": self.checksum(),
        });
        write_tensor_file(path, &meta, &[("keep".to_string(), self.keep.view().into_dyn())])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = read_tensor_file(path)?;
        let bad = |m: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        let keep = f
            .get("keep")
            .ok_or_else(|| bad("missing keep"))?
            .clone()
            .into_dimensionality::<Ix2>()
            .map_err(|_| bad("keep is not 2-d"))?;
        if keep.iter().any(|&k| k != 0.0 && k != 1.0) {
            return Err(bad("mask entries must be 0 or 1"));
        }
        let gamma = f.meta["gamma"].as_f64().unwrap_or(0.5);
        Ok(Self { keep, gamma })
    }
}

/// Entry kept iff `k ≥ γ`.
pub fn binarize(k: ArrayView2<f64>, gamma: f64) -> BinaryMask {
    BinaryMask {
        keep: k.mapv(|v| if v >= gamma { 1.0 } else { 0.0 }),
        gamma,
    }
}

/// `Ŵ ⊙ K`.
pub fn masked_matrix(edited: &Array2<f64>, mask: &BinaryMask) -> Result<Array2<f64>> {
    if edited.dim() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs matrix {:?}",
            mask.shape(),
            edited.dim()
        )));
    }
    Ok(edited * &mask.keep)
}

/// Pruned model: the edited layer's down-projection multiplied by the mask.
pub fn apply_mask(edited: &TransformerModel, layer: usize, mask: &BinaryMask) -> Result<TransformerModel> {
    if layer >= edited.config.n_layers {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
    }
    Ok(edited.with_proj(layer, masked_matrix(edited.w_proj(layer), mask)?))
}

#[cfg(test)]
mod tests;
