//! Locate-and-edit engine for the MLP down-projection: key covariance,
//! key/value computation, single-layer rank-one edits and batched
//! multi-layer edits.

mod memit;
mod rome;
mod value;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{EditRequest, FactTriple, Prompt, Vocab};
use crate::error::{Error, Result};
use crate::linalg::{asymmetry, Cholesky};
use crate::nanomodel::{read_tensor_file, write_tensor_file, Intervention, TransformerModel};

pub use memit::{memit_edit, memit_layer_update, MemitEdit};
pub use rome::{rome_delta, rome_edit, RomeEdit};
pub use value::{solve_value, ValueConfig, ValueSolution};

/// Threshold below which `(C⁻¹k)ᵀk` is treated as zero.
pub const DEGENERATE_KEY_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditorConfig {
    pub rome_layer: usize,
    pub memit_layers: Vec<usize>,
    /// Ridge as a multiple of the mean diagonal of the key second moment.
    pub ridge_scale: f64,
    /// Neutral tokens used for the key covariance.
    pub covariance_tokens: usize,
    /// Weight of the covariance term in the batched least-squares update.
    pub memit_cov_weight: f64,
    pub value: ValueConfig,
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self {
            rome_layer: 1,
            memit_layers: vec![1, 2],
            ridge_scale: 0.1,
            covariance_tokens: 10_000,
            memit_cov_weight: 1.0,
            value: ValueConfig::default(),
        }
    }
}

impl EditorConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: format!("editor.{key}"),
                message,
            })
        };
        if self.rome_layer >= n_layers {
            return bad("rome_layer", format!("{} is not below n_layers {n_layers}", self.rome_layer));
        }
        if self.memit_layers.is_empty()
            || self.memit_layers.windows(2).any(|w| w[1] != w[0] + 1)
            || *self.memit_layers.last().unwrap() >= n_layers
        {
            return bad("memit_layers", "must be a non-empty run of consecutive valid layers".into());
        }
        if !(self.ridge_scale > 0.0) {
            return bad("ridge_scale", "must be > 0".into());
        }
        if self.covariance_tokens == 0 {
            return bad("covariance_tokens", "must be > 0".into());
        }
        if !(self.memit_cov_weight > 0.0) {
            return bad("memit_cov_weight", "must be > 0".into());
        }
        self.value.validate()
    }
}

/// Paraphrase renderer shared by the editing operations.
#[derive(Debug, Clone, Copy)]
pub struct EditContext<'a> {
    pub vocab: &'a Vocab,
    pub templates: &'a [String],
}

impl EditContext<'_> {
    /// The fact's own prompt first, then every other template once.
    pub fn prompts(&self, fact: &FactTriple) -> Result<Vec<Prompt>> {
        let mut out = vec![fact.prompt(self.vocab)?];
        for t in self.templates {
            if *t != fact.prompt_template {
                out.push(fact.render(t, self.vocab)?);
            }
        }
        Ok(out)
    }
}

/// Ridge-regularized second moment of MLP keys at one layer.
#[derive(Debug, Clone)]
pub struct KeyCovariance {
    pub layer: usize,
    /// `λI + Σ kkᵀ / T`.
    pub c: Array2<f64>,
    pub lambda: f64,
    pub n_tokens: usize,
    chol: Cholesky,
}

impl KeyCovariance {
    pub fn from_moment(layer: usize, moment: Array2<f64>, n_tokens: usize, lambda: f64) -> Result<Self> {
        let mut c = moment;
        for i in 0..c.nrows() {
            c[[i, i]] += lambda;
        }
        let chol = Cholesky::factor(c.view())
            .map_err(|e| Error::Singular(format!("key covariance at layer {layer}: {e}")))?;
        Ok(Self {
            layer,
            c,
            lambda,
            n_tokens,
            chol,
        })
    }

    /// `C⁻¹ x`.
    pub fn solve(&self, x: ndarray::ArrayView1<f64>) -> Array1<f64> {
        self.chol.solve_vec(x)
    }

    pub fn asymmetry(&self) -> f64 {
        asymmetry(self.c.view())
    }
}

/// How the ridge term is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    Absolute(f64),
    /// Multiple of the mean diagonal of the uncorrected second moment.
    MeanDiagonal(f64),
}

/// Post-activation MLP inputs at `layer` for every token of `text`, fed in
/// non-overlapping windows of the model's context length.
pub fn collect_keys(model: &TransformerModel, layer: usize, text: &[usize]) -> Result<Array2<f64>> {
    check_layer(model, layer)?;
    let win = model.config.max_seq_len;
    let mut rows = Array2::zeros((0, model.config.d_mlp));
    for chunk in text.chunks(win) {
        let cache = model.run(chunk, &Intervention::none())?;
        rows.append(Axis(0), cache.layers[layer].g.view())
            .expect("key width is d_mlp");
    }
    Ok(rows)
}

pub fn estimate_key_covariance(
    model: &TransformerModel,
    layer: usize,
    text: &[usize],
    ridge: Ridge,
) -> Result<KeyCovariance> {
    if text.is_empty() {
        return Err(Error::Empty("covariance text"));
    }
    let keys = collect_keys(model, layer, text)?;
    let n = keys.nrows();
    let moment = keys.t().dot(&keys) / n as f64;
    let lambda = match ridge {
        Ridge::Absolute(l) => l,
        Ridge::MeanDiagonal(s) => s * moment.diag().mean().unwrap_or(0.0),
    };
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge must be finite and >= 0, got {lambda}")));
    }
    KeyCovariance::from_moment(layer, moment, n, lambda)
}

/// Mean MLP key at each prompt's last subject token.
pub fn compute_key(model: &TransformerModel, layer: usize, prompts: &[Prompt]) -> Result<Array1<f64>> {
    check_layer(model, layer)?;
    if prompts.is_empty() {
        return Err(Error::Empty("key prompts"));
    }
    let mut k = Array1::zeros(model.config.d_mlp);
    for p in prompts {
        if p.subject_last >= p.tokens.len() {
            return Err(Error::SubjectNotFound(format!(
                "subject position {} outside prompt of length {}",
                p.subject_last,
                p.tokens.len()
            )));
        }
        let cache = model.run(&p.tokens, &Intervention::none())?;
        k += &cache.layers[layer].g.row(p.subject_last);
    }
    Ok(k / prompts.len() as f64)
}

pub fn check_layer(model: &TransformerModel, layer: usize) -> Result<()> {
    if layer >= model.config.n_layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range for {} layers",
            model.config.n_layers
        )));
    }
    Ok(())
}

/// Provenance of one realized edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub edit_id: String,
    pub layer: usize,
    pub fact: FactTriple,
    pub o: usize,
    pub o_star: usize,
    pub achieved_p: f64,
}

/// Original and edited down-projection of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EditedLayerWeights {
    pub layer: usize,
    pub original: Array2<f64>,
    pub edited: Array2<f64>,
    pub records: Vec<EditRecord>,
}

impl EditedLayerWeights {
    pub fn new(layer: usize, original: Array2<f64>, edited: Array2<f64>, records: Vec<EditRecord>) -> Result<Self> {
        if original.dim() != edited.dim() {
            return Err(Error::ShapeMismatch(format!(
                "original {:?} vs edited {:?}",
                original.dim(),
                edited.dim()
            )));
        }
        Ok(Self {
            layer,
            original,
            edited,
            records,
        })
    }

    pub fn delta(&self) -> Array2<f64> {
        &self.edited - &self.original
    }

    pub fn edit_ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.edit_id.as_str()).collect()
    }

    /// Label used in error messages.
    pub fn label(&self) -> String {
        match self.records.as_slice() {
            [] => format!("layer-{}", self.layer),
            [r] => r.edit_id.clone(),
            rs => format!("{}..{}", rs[0].edit_id, rs[rs.len() - 1].edit_id),
        }
    }

    /// Model with this layer's matrix replaced by `matrix`.
    pub fn apply_to(&self, base: &TransformerModel, matrix: Array2<f64>) -> Result<TransformerModel> {
        check_layer(base, self.layer)?;
        if base.w_proj(self.layer).dim() != matrix.dim() {
            return Err(Error::ShapeMismatch(format!(
                "layer {} expects {:?}, got {:?}",
                self.layer,
                base.w_proj(self.layer).dim(),
                matrix.dim()
            )));
        }
        Ok(base.with_proj(self.layer, matrix))
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the tensor file plus a JSON sidecar with the edit records.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "edited_layer",
            "layer": self.layer,
            "records": self.records,
        });
        write_tensor_file(
            path,
            &meta,
            &[
                ("original".to_string(), self.original.view().into_dyn()),
                ("edited".to_string(), self.edited.view().into_dyn()),
            ],
        )?;
        let side = Self::sidecar_path(path);
        let body: Vec<_> = self
            .records
            .iter()
            .map(|r| {
                serde_json::json!({
                    "edit_id": r.edit_id,
                    "layer": r.layer,
                    "fact": r.fact,
                    "o": r.o,
                    "o*": r.o_star,
                    "achieved_p": r.achieved_p,
                })
            })
            .collect();
        fs::write(&side, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = read_tensor_file(path)?;
        let bad = |message: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let layer = file.meta["layer"].as_u64().ok_or_else(|| bad("missing layer"))? as usize;
        let records: Vec<EditRecord> = serde_json::from_value(file.meta["records"].clone())?;
        let take = |name: &str| -> Result<Array2<f64>> {
            file.get(name)
                .ok_or_else(|| bad(&format!("missing tensor {name}")))?
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|_| bad(&format!("tensor {name} is not 2-d")))
        };
        Self::new(layer, take("original")?, take("edited")?, records)
    }
}

/// Outcome of one request on one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessRecord {
    pub edit_id: String,
    pub relation: usize,
    pub p_new: f64,
    pub p_old: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSuccess {
    pub fraction: f64,
    pub per_request: Vec<SuccessRecord>,
}

pub fn success_record(model: &TransformerModel, request: &EditRequest, vocab: &Vocab) -> Result<SuccessRecord> {
    let p = model.next_token_probs(&request.fact.prompt(vocab)?.tokens, &Intervention::none())?;
    let p_new = p[request.new_object];
    let p_old = p[request.fact.object];
    Ok(SuccessRecord {
        edit_id: request.edit_id(),
        relation: request.fact.relation,
        p_new,
        p_old,
        success: p_new > p_old,
    })
}

/// Fraction of requests where the model prefers `o*` over `o`.
pub fn edit_success(model: &TransformerModel, requests: &[EditRequest], vocab: &Vocab) -> Result<EditSuccess> {
    if requests.is_empty() {
        return Err(Error::Empty("edit requests"));
    }
    let per_request = requests
        .iter()
        .map(|r| success_record(model, r, vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok(EditSuccess::from_records(per_request))
}

impl EditSuccess {
    pub fn from_records(per_request: Vec<SuccessRecord>) -> Self {
        let fraction = per_request.iter().filter(|r| r.success).count() as f64 / per_request.len().max(1) as f64;
        Self { fraction, per_request }
    }
}
