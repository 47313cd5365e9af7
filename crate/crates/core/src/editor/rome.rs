use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::{
    check_layer, compute_key, solve_value, EditContext, EditRecord, EditedLayerWeights, KeyCovariance, ValueConfig,
    ValueSolution, DEGENERATE_KEY_EPS,
};
use crate::corpus::EditRequest;
use crate::error::{Error, Result};
use crate::nanomodel::TransformerModel;

/// Rank-one update `ΔW = u Λᵀ` with `u = C⁻¹k` and
/// `Λ = (v - Wᵀk) / (uᵀk)`, so that `(W + ΔW)ᵀ k = v`.
pub fn rome_delta(
    w: &Array2<f64>,
    cov: &KeyCovariance,
    key: ArrayView1<f64>,
    value: ArrayView1<f64>,
) -> Result<Array2<f64>> {
    if key.len() != w.nrows() || value.len() != w.ncols() || cov.c.nrows() != w.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "W {:?}, key {}, value {}, covariance {}",
            w.dim(),
            key.len(),
            value.len(),
            cov.c.nrows()
        )));
    }
    let u = cov.solve(key);
    let denom = u.dot(&key);
    if !(denom.abs() > DEGENERATE_KEY_EPS) {
        return Err(Error::DegenerateKey(denom));
    }
    let lambda: Array1<f64> = (&value - &key.dot(w)) / denom;
    Ok(u.insert_axis(Axis(1)).dot(&lambda.insert_axis(Axis(0))))
}

#[derive(Debug, Clone)]
pub struct RomeEdit {
    pub model: TransformerModel,
    pub weights: EditedLayerWeights,
    pub key: Array1<f64>,
    pub value: ValueSolution,
    /// `‖Ŵᵀk* - v*‖ / ‖v*‖`.
    pub identity_residual: f64,
}

pub fn rome_edit(
    model: &TransformerModel,
    request: &EditRequest,
    cov: &KeyCovariance,
    ctx: EditContext,
    cfg: &ValueConfig,
) -> Result<RomeEdit> {
    let layer = cov.layer;
    check_layer(model, layer)?;
    let prompts = ctx.prompts(&request.fact)?;
    let key = compute_key(model, layer, &prompts)?;
    let value = solve_value(model, layer, &prompts, &key, request.new_object, cfg)?;
    let original = model.w_proj(layer).clone();
    let delta = rome_delta(&original, cov, key.view(), value.v_star.view())?;
    let edited = &original + &delta;
    let identity_residual = l2(&(&key.dot(&edited) - &value.v_star)) / l2(&value.v_star).max(f64::MIN_POSITIVE);
    let record = EditRecord {
        edit_id: request.edit_id(),
        layer,
        fact: request.fact.clone(),
        o: request.fact.object,
        o_star: request.new_object,
        achieved_p: value.achieved_p,
    };
    let weights = EditedLayerWeights::new(layer, original, edited, vec![record])?;
    Ok(RomeEdit {
        model: model.with_proj(layer, weights.edited.clone()),
        weights,
        key,
        value,
        identity_residual,
    })
}

pub(crate) fn l2(x: &Array1<f64>) -> f64 {
    x.dot(x).sqrt()
}
