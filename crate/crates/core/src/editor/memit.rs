use ndarray::{Array1, Array2};

use super::{
    check_layer, compute_key, edit_success, solve_value, EditContext, EditRecord, EditSuccess, EditedLayerWeights,
    KeyCovariance, ValueConfig, ValueSolution,
};
use crate::corpus::{EditRequest, Prompt};
use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::nanomodel::{Intervention, TransformerModel};

/// Ridge least-squares update `ΔW = (w·C + K Kᵀ)⁻¹ K Rᵀ` for keys `K`
/// (`[d_mlp, n]`) and residuals `R` (`[d_model, n]`).
pub fn memit_layer_update(
    keys: &Array2<f64>,
    residuals: &Array2<f64>,
    cov: &Array2<f64>,
    cov_weight: f64,
) -> Result<Array2<f64>> {
    if keys.ncols() != residuals.ncols() || cov.nrows() != keys.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "keys {:?}, residuals {:?}, covariance {:?}",
            keys.dim(),
            residuals.dim(),
            cov.dim()
        )));
    }
    let a = cov * cov_weight + keys.dot(&keys.t());
    let chol = Cholesky::factor(a.view())
        .map_err(|e| Error::Singular(format!("batched key system: {e}")))?;
    Ok(chol.solve(keys.view()).dot(&residuals.t()))
}

#[derive(Debug, Clone)]
pub struct MemitEdit {
    pub model: TransformerModel,
    /// One entry per edited layer, shallow to deep.
    pub layers: Vec<EditedLayerWeights>,
    pub values: Vec<ValueSolution>,
    pub success: EditSuccess,
}

/// Mean residual after `layer` at each prompt's last subject token, with the
/// layer's MLP output optionally replaced by `value`.
fn mean_resid(
    model: &TransformerModel,
    layer: usize,
    prompts: &[Prompt],
    value: Option<&Array1<f64>>,
) -> Result<Array1<f64>> {
    let mut acc = Array1::zeros(model.config.d_model);
    for p in prompts {
        let cache = model.run(&p.tokens, &Intervention::none())?;
        let lc = &cache.layers[layer];
        acc += &lc.x_mid.row(p.subject_last);
        match value {
            Some(v) => acc += v,
            None => acc += &lc.mlp_out.row(p.subject_last),
        }
    }
    Ok(acc / prompts.len() as f64)
}

/// Batched edit over consecutive layers. Target values are solved at the
/// deepest layer; each layer in turn absorbs the remaining residual divided
/// by the number of layers still to be updated, with keys recomputed on the
/// partially edited model.
pub fn memit_edit(
    model: &TransformerModel,
    requests: &[EditRequest],
    covs: &[KeyCovariance],
    ctx: EditContext,
    cfg: &ValueConfig,
    cov_weight: f64,
) -> Result<MemitEdit> {
    if requests.is_empty() {
        return Err(Error::Empty("edit requests"));
    }
    if covs.is_empty() || covs.windows(2).any(|w| w[1].layer != w[0].layer + 1) {
        return Err(Error::InvalidArgument("layer range must be non-empty and consecutive".into()));
    }
    for c in covs {
        check_layer(model, c.layer)?;
    }
    let last = covs[covs.len() - 1].layer;
    let prompts = requests
        .iter()
        .map(|r| ctx.prompts(&r.fact))
        .collect::<Result<Vec<_>>>()?;

    let mut values = Vec::with_capacity(requests.len());
    let mut targets = Vec::with_capacity(requests.len());
    for (r, ps) in requests.iter().zip(&prompts) {
        let key = compute_key(model, last, ps)?;
        let sol = solve_value(model, last, ps, &key, r.new_object, cfg)?;
        targets.push(mean_resid(model, last, ps, Some(&sol.v_star))?);
        values.push(sol);
    }

    let n = requests.len();
    let mut current = model.clone();
    let mut layers = Vec::with_capacity(covs.len());
    for (i, cov) in covs.iter().enumerate() {
        let remaining = (covs.len() - i) as f64;
        let d_mlp = current.config.d_mlp;
        let d_model = current.config.d_model;
        let mut keys = Array2::zeros((d_mlp, n));
        let mut resid = Array2::zeros((d_model, n));
        for (j, ps) in prompts.iter().enumerate() {
            keys.column_mut(j).assign(&compute_key(&current, cov.layer, ps)?);
            let now = mean_resid(&current, last, ps, None)?;
            resid.column_mut(j).assign(&((&targets[j] - &now) / remaining));
        }
        let delta = memit_layer_update(&keys, &resid, &cov.c, cov_weight)?;
        let edited = current.w_proj(cov.layer) + &delta;
        let records = requests
            .iter()
            .zip(&values)
            .map(|(r, v)| EditRecord {
                edit_id: r.edit_id(),
                layer: cov.layer,
                fact: r.fact.clone(),
                o: r.fact.object,
                o_star: r.new_object,
                achieved_p: v.achieved_p,
            })
            .collect();
        current = current.with_proj(cov.layer, edited.clone());
        // Record against the pre-edit model so ΔŴ reflects the whole batch.
        layers.push(EditedLayerWeights::new(
            cov.layer,
            model.w_proj(cov.layer).clone(),
            edited,
            records,
        )?);
    }
    let success = edit_success(&current, requests, ctx.vocab)?;
    Ok(MemitEdit {
        model: current,
        layers,
        values,
        success,
    })
}
