//! Classical pruning baselines on an edited down-projection, and editing
//! with a learned mask injected into the forward pass.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{EditRequest, Vocab};
use crate::editor::{
    check_layer, collect_keys, compute_key, rome_delta, rome_edit, solve_value, success_record, EditContext,
    EditRecord, EditedLayerWeights, KeyCovariance, ValueConfig,
};
use crate::error::{Error, Result};
use crate::evaluator::{reversal_record, rsr, ReversalRecord};
use crate::maskforge::{masked_matrix, BinaryMask};
use crate::nanomodel::TransformerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneCriterion {
    /// Individual entries with the largest `|Ŵ - W|`.
    UnstructuredDelta,
    /// Individual entries with the largest `|Ŵ|`.
    UnstructuredEdited,
    /// Whole output-dimension columns with the largest L2 norm of `Ŵ`.
    StructuredColumnNorm,
    /// Whole hidden-unit rows with the largest mean absolute activation.
    StructuredActivation,
}

impl PruneCriterion {
    pub const ALL: [PruneCriterion; 4] = [
        PruneCriterion::UnstructuredDelta,
        PruneCriterion::UnstructuredEdited,
        PruneCriterion::StructuredColumnNorm,
        PruneCriterion::StructuredActivation,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            PruneCriterion::UnstructuredDelta => "unstructured-delta",
            PruneCriterion::UnstructuredEdited => "unstructured-edited",
            PruneCriterion::StructuredColumnNorm => "structured-column-norm",
            PruneCriterion::StructuredActivation => "structured-activation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMode {
    Zero,
    /// Restore the pre-edit value.
    Original,
}

impl PruneMode {
    pub fn tag(self) -> &'static str {
        match self {
            PruneMode::Zero => "zero",
            PruneMode::Original => "original",
        }
    }

    /// Plot convention: restored curves solid, zeroed curves dashed.
    pub fn line_style(self) -> &'static str {
        match self {
            PruneMode::Zero => "dashed",
            PruneMode::Original => "solid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub criterion: PruneCriterion,
    pub pct: f64,
    pub mode: PruneMode,
}

impl PruneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pct) {
            return Err(Error::InvalidArgument(format!("pct must lie in [0, 1], got {}", self.pct)));
        }
        Ok(())
    }
}

/// Mean absolute post-activation value of every hidden unit at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub layer: usize,
    pub mean_abs: Array1<f64>,
}

pub fn activation_stats(model: &TransformerModel, layer: usize, text: &[usize]) -> Result<ActivationStats> {
    if text.is_empty() {
        return Err(Error::Empty("activation text"));
    }
    let keys = collect_keys(model, layer, text)?;
    let mean_abs = keys.mapv(f64::abs).mean_axis(Axis(0)).expect("non-empty keys");
    Ok(ActivationStats { layer, mean_abs })
}

/// Entries chosen for pruning, as sorted row-major flat indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub shape: (usize, usize),
    pub indices: Vec<usize>,
}

/// Indices of the `n` largest scores, ties to the lower index.
fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

fn count(pct: f64, n: usize) -> usize {
    ((pct * n as f64).round() as usize).min(n)
}

pub fn select(
    edit: &EditedLayerWeights,
    criterion: PruneCriterion,
    pct: f64,
    stats: Option<&ActivationStats>,
) -> Result<Selection> {
    PruneSpec { criterion, pct, mode: PruneMode::Zero }.validate()?;
    let shape = edit.edited.dim();
    let (rows, cols) = shape;
    let mut indices = match criterion {
        PruneCriterion::UnstructuredDelta => {
            let s: Vec<f64> = edit.delta().iter().map(|v| v.abs()).collect();
            top_n(&s, count(pct, s.len()))
        }
        PruneCriterion::UnstructuredEdited => {
            let s: Vec<f64> = edit.edited.iter().map(|v| v.abs()).collect();
            top_n(&s, count(pct, s.len()))
        }
        PruneCriterion::StructuredColumnNorm => {
            let norms: Vec<f64> = edit.edited.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
            top_n(&norms, count(pct, cols))
                .into_iter()
                .flat_map(|j| (0..rows).map(move |i| i * cols + j))
                .collect()
        }
        PruneCriterion::StructuredActivation => {
            let stats = stats.ok_or(Error::MissingActivationStats)?;
            if stats.mean_abs.len() != rows {
                return Err(Error::ShapeMismatch(format!(
                    "activation stats cover {} hidden units, matrix has {rows} rows",
                    stats.mean_abs.len()
                )));
            }
            top_n(stats.mean_abs.as_slice().expect("contiguous"), count(pct, rows))
                .into_iter()
                .flat_map(|i| (0..cols).map(move |j| i * cols + j))
                .collect()
        }
    };
    indices.sort_unstable();
    Ok(Selection { shape, indices })
}

/// Writes zeros or pre-edit values at the selected entries of `Ŵ`.
pub fn apply_selection(edit: &EditedLayerWeights, selection: &Selection, mode: PruneMode) -> Result<Array2<f64>> {
    if edit.edited.dim() != selection.shape {
        return Err(Error::ShapeMismatch(format!(
            "selection {:?} vs matrix {:?}",
            selection.shape,
            edit.edited.dim()
        )));
    }
    let mut out = edit.edited.clone();
    let cols = selection.shape.1;
    for &k in &selection.indices {
        let (i, j) = (k / cols, k % cols);
        out[[i, j]] = match mode {
            PruneMode::Zero => 0.0,
            PruneMode::Original => edit.original[[i, j]],
        };
    }
    Ok(out)
}

pub fn prune(edit: &EditedLayerWeights, spec: &PruneSpec, stats: Option<&ActivationStats>) -> Result<Array2<f64>> {
    let sel = select(edit, spec.criterion, spec.pct, stats)?;
    apply_selection(edit, &sel, spec.mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub criterion: PruneCriterion,
    pub mode: PruneMode,
    pub pct: f64,
    pub rsr: f64,
    pub line_style: String,
}

/// RSR of per-edit pruning over a percentage grid. `edits[i]` must be the
/// single edit realizing `requests[i]` on `base`.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    base: &TransformerModel,
    requests: &[EditRequest],
    edits: &[EditedLayerWeights],
    vocab: &Vocab,
    criteria: &[PruneCriterion],
    pcts: &[f64],
    modes: &[PruneMode],
    stats: Option<&ActivationStats>,
) -> Result<Vec<SweepPoint>> {
    if requests.is_empty() || requests.len() != edits.len() {
        return Err(Error::InvalidArgument(format!(
            "{} requests vs {} edits",
            requests.len(),
            edits.len()
        )));
    }
    if pcts.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("pct grid must be sorted ascending".into()));
    }
    let edited_models = edits
        .iter()
        .map(|e| e.apply_to(base, e.edited.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for &criterion in criteria {
        let selections = edits
            .iter()
            .map(|e| {
                pcts.iter()
                    .map(|&p| select(e, criterion, p, stats))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for &mode in modes {
            for (pi, &pct) in pcts.iter().enumerate() {
                let mut records = Vec::with_capacity(edits.len());
                for (k, e) in edits.iter().enumerate() {
                    let mp = e.apply_to(base, apply_selection(e, &selections[k][pi], mode)?)?;
                    records.push(reversal_record(base, &edited_models[k], &mp, &requests[k], vocab)?);
                }
                out.push(SweepPoint {
                    criterion,
                    mode,
                    pct,
                    rsr: rsr(&records)?,
                    line_style: mode.line_style().to_string(),
                });
            }
        }
    }
    Ok(out)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("criterion,mode,pct,rsr,line_style\n");
    for p in points {
        writeln!(s, "{},{},{},{},{}", p.criterion.tag(), p.mode.tag(), p.pct, p.rsr, p.line_style)
            .expect("writing to a String");
    }
    s
}

/// Smallest pct in a criterion/mode curve reaching `target` RSR.
pub fn pct_to_reach(points: &[SweepPoint], criterion: PruneCriterion, mode: PruneMode, target: f64) -> Option<f64> {
    points
        .iter()
        .filter(|p| p.criterion == criterion && p.mode == mode && p.rsr >= target)
        .map(|p| p.pct)
        .min_by(f64::total_cmp)
}

#[derive(Debug, Clone)]
pub struct BlockedEdit {
    pub edit_id: String,
    pub relation: usize,
    pub p_new: f64,
    pub p_old: f64,
    pub success: bool,
    /// `P(o*)` reached by the value optimization inside the masked model.
    pub achieved_p: f64,
    /// `W` and the unmasked `Ŵ`; the evaluated model uses `Ŵ ⊙ K`.
    pub weights: EditedLayerWeights,
    pub model: TransformerModel,
}

/// Rank-one edit with the mask active: the value vector is optimized in the
/// model whose edit layer computes with `W ⊙ K`, the update is solved
/// against the unmasked `W`, and success is judged with `Ŵ ⊙ K`.
pub fn blocked_edit(
    model: &TransformerModel,
    request: &EditRequest,
    mask: &BinaryMask,
    cov: &KeyCovariance,
    ctx: EditContext,
    cfg: &ValueConfig,
) -> Result<BlockedEdit> {
    let layer = cov.layer;
    check_layer(model, layer)?;
    let original = model.w_proj(layer).clone();
    let masked_base = model.with_proj(layer, masked_matrix(&original, mask)?);
    let prompts = ctx.prompts(&request.fact)?;
    let key = compute_key(model, layer, &prompts)?;
    let value = solve_value(&masked_base, layer, &prompts, &key, request.new_object, cfg)?;
    let delta = rome_delta(&original, cov, key.view(), value.v_star.view())?;
    let edited = &original + &delta;
    let blocked = model.with_proj(layer, masked_matrix(&edited, mask)?);
    let s = success_record(&blocked, request, ctx.vocab)?;
    let record = EditRecord {
        edit_id: request.edit_id(),
        layer,
        fact: request.fact.clone(),
        o: request.fact.object,
        o_star: request.new_object,
        achieved_p: value.achieved_p,
    };
    Ok(BlockedEdit {
        edit_id: s.edit_id,
        relation: s.relation,
        p_new: s.p_new,
        p_old: s.p_old,
        success: s.success,
        achieved_p: value.achieved_p,
        weights: EditedLayerWeights::new(layer, original, edited, vec![record])?,
        model: blocked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockingRow {
    /// Relation token id, `None` for the overall total.
    pub relation: Option<usize>,
    pub n: usize,
    pub standard_success: usize,
    pub blocked_success: usize,
}

impl BlockingRow {
    pub fn standard_rate(&self) -> f64 {
        self.standard_success as f64 / self.n.max(1) as f64
    }

    pub fn blocked_rate(&self) -> f64 {
        self.blocked_success as f64 / self.n.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockingOutcome {
    pub edit_id: String,
    pub relation: usize,
    pub standard: bool,
    pub blocked: bool,
    pub standard_p_new: f64,
    pub blocked_p_new: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockingReport {
    pub per_relation: Vec<BlockingRow>,
    pub total: BlockingRow,
    pub outcomes: Vec<BlockingOutcome>,
}

impl BlockingReport {
    pub fn to_csv(&self, vocab: &Vocab) -> String {
        let mut s = String::from("relation,n,standard_success,blocked_success,standard_rate,blocked_rate\n");
        for r in self.per_relation.iter().chain(std::iter::once(&self.total)) {
            let name = r.relation.map(|id| vocab.token(id).to_string()).unwrap_or_else(|| "all".into());
            writeln!(
                s,
                "{name},{},{},{},{},{}",
                r.n,
                r.standard_success,
                r.blocked_success,
                r.standard_rate(),
                r.blocked_rate()
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn drop(&self) -> f64 {
        self.total.standard_rate() - self.total.blocked_rate()
    }
}

/// Standard versus mask-blocked edit success for every request, aggregated
/// per relation.
pub fn blocking_report(
    model: &TransformerModel,
    requests: &[EditRequest],
    mask: &BinaryMask,
    cov: &KeyCovariance,
    ctx: EditContext,
    cfg: &ValueConfig,
) -> Result<BlockingReport> {
    if requests.is_empty() {
        return Err(Error::Empty("blocking requests"));
    }
    let mut outcomes = Vec::with_capacity(requests.len());
    for r in requests {
        let std_edit = rome_edit(model, r, cov, ctx, cfg)?;
        let standard = success_record(&std_edit.model, r, ctx.vocab)?;
        let blocked = blocked_edit(model, r, mask, cov, ctx, cfg)?;
        outcomes.push(BlockingOutcome {
            edit_id: r.edit_id(),
            relation: r.fact.relation,
            standard: standard.success,
            blocked: blocked.success,
            standard_p_new: standard.p_new,
            blocked_p_new: blocked.p_new,
        });
    }
    let mut groups: BTreeMap<usize, BlockingRow> = BTreeMap::new();
    let mut total = BlockingRow {
        relation: None,
        n: 0,
        standard_success: 0,
        blocked_success: 0,
    };
    for o in &outcomes {
        let row = groups.entry(o.relation).or_insert(BlockingRow {
            relation: Some(o.relation),
            n: 0,
            standard_success: 0,
            blocked_success: 0,
        });
        for r in [row, &mut total] {
            r.n += 1;
            r.standard_success += usize::from(o.standard);
            r.blocked_success += usize::from(o.blocked);
        }
    }
    Ok(BlockingReport {
        per_relation: groups.into_values().collect(),
        total,
        outcomes,
    })
}

/// Reversal records of one shared-mask application over many single edits.
pub fn mask_reversals(
    base: &TransformerModel,
    requests: &[EditRequest],
    edits: &[EditedLayerWeights],
    mask: &BinaryMask,
    vocab: &Vocab,
) -> Result<Vec<ReversalRecord>> {
    if requests.len() != edits.len() {
        return Err(Error::InvalidArgument(format!(
            "{} requests vs {} edits",
            requests.len(),
            edits.len()
        )));
    }
    requests
        .iter()
        .zip(edits)
        .map(|(r, e)| {
            let me = e.apply_to(base, e.edited.clone())?;
            let mp = e.apply_to(base, masked_matrix(&e.edited, mask)?)?;
            reversal_record(base, &me, &mp, r, vocab)
        })
        .collect()
}

#[cfg(test)]
mod tests;
