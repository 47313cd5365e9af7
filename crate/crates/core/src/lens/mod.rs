//! Residual-stream decomposition of the target logit, plus structure
//! statistics for masks and edit deltas.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::editor::EditedLayerWeights;
use crate::error::{Error, Result};
use crate::maskforge::BinaryMask;
use crate::nanomodel::{Intervention, TransformerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// Increments projected straight onto the unembedding column.
    RawAdditive,
    /// Increments centred and scaled by the final layer norm evaluated once
    /// on the complete final residual; the LN bias is kept as its own term.
    FrozenLn,
}

impl Convention {
    pub fn tag(self) -> &'static str {
        match self {
            Convention::RawAdditive => "raw-additive",
            Convention::FrozenLn => "frozen-ln",
        }
    }
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw-additive" => Ok(Convention::RawAdditive),
            "frozen-ln" => Ok(Convention::FrozenLn),
            other => Err(Error::UnknownConvention(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionTrace {
    pub target: usize,
    pub convention: Convention,
    pub embedding: f64,
    pub attn: Vec<f64>,
    pub mlp: Vec<f64>,
    /// Final-LN bias projected on the target (always 0 for raw-additive).
    pub bias: f64,
    /// Running sum: embedding, then attn/mlp of each layer in order (`2L + 1` entries).
    pub cumulative: Vec<f64>,
    /// Directly computed reference: the raw target projection of the final
    /// residual, or the model's actual target logit under frozen-LN.
    pub direct: f64,
}

impl DecompositionTrace {
    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0) + self.bias
    }

    pub fn residue(&self) -> f64 {
        (self.total() - self.direct).abs()
    }
}

pub fn decompose(
    model: &TransformerModel,
    prompt: &[usize],
    target: usize,
    convention: Convention,
) -> Result<DecompositionTrace> {
    let v = model.config.vocab_size;
    if target >= v {
        return Err(Error::OutOfVocab {
            token: target,
            position: prompt.len(),
            vocab_size: v,
        });
    }
    let cache = model.run(prompt, &Intervention::none())?;
    let trace = cache.trace();
    let last = prompt.len() - 1;
    let w = &model.weights;
    let u = w.unembed.column(target);
    let final_row = trace.final_resid().row(last).to_owned();

    let (dir, bias, direct): (Array1<f64>, f64, f64) = match convention {
        Convention::RawAdditive => (u.to_owned(), 0.0, u.dot(&final_row)),
        Convention::FrozenLn => {
            let d = final_row.len() as f64;
            let mean = final_row.sum() / d;
            let var = final_row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d;
            let rstd = 1.0 / (var + model.config.ln_eps).sqrt();
            // Centring is linear, so projecting every increment on the centred
            // gain-weighted column reproduces the frozen normalization exactly.
            let gu = &w.lnf_g * &u;
            let centred = &gu - gu.sum() / d;
            (centred * rstd, w.lnf_b.dot(&u), cache.logits[[last, target]])
        }
    };
    let proj = |x: ArrayView1<f64>| dir.dot(&x);

    let embedding = proj(trace.embedding().row(last));
    let attn: Vec<f64> = trace.attn_out.iter().map(|a| proj(a.row(last))).collect();
    let mlp: Vec<f64> = trace.mlp_out.iter().map(|m| proj(m.row(last))).collect();
    let mut cumulative = Vec::with_capacity(2 * attn.len() + 1);
    let mut acc = embedding;
    cumulative.push(acc);
    for (a, m) in attn.iter().zip(&mlp) {
        acc += a;
        cumulative.push(acc);
        acc += m;
        cumulative.push(acc);
    }
    Ok(DecompositionTrace {
        target,
        convention,
        embedding,
        attn,
        mlp,
        bias,
        cumulative,
        direct,
    })
}

/// Mean and standard error (`sample std / √n`); the error is `None` for a
/// single value.
pub fn mean_se(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

/// A prompt with both candidate answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceQuery {
    pub tokens: Vec<usize>,
    pub o: usize,
    pub o_star: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub model: String,
    pub target: String,
    pub layer: usize,
    pub component: String,
    pub n: usize,
    pub mean: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceComparison {
    pub convention: Convention,
    pub rows: Vec<TraceRow>,
}

fn opt_csv(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl TraceComparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("convention,model,target,layer,component,n,mean,se\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                self.convention.tag(),
                r.model,
                r.target,
                r.layer,
                r.component,
                r.n,
                r.mean,
                opt_csv(r.se)
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn get(&self, model: &str, target: &str, layer: usize, component: &str) -> Option<&TraceRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.target == target && r.layer == layer && r.component == component)
    }
}

/// A labelled model, either shared by every query or one model per query
/// (for example one edited model per single edit).
#[derive(Debug, Clone)]
pub struct ModelSet<'a> {
    pub label: &'a str,
    pub models: Vec<&'a TransformerModel>,
}

impl<'a> ModelSet<'a> {
    pub fn shared(label: &'a str, model: &'a TransformerModel) -> Self {
        Self {
            label,
            models: vec![model],
        }
    }

    pub fn paired(label: &'a str, models: Vec<&'a TransformerModel>) -> Self {
        Self { label, models }
    }

    fn for_query(&self, i: usize, n: usize) -> Result<&'a TransformerModel> {
        match self.models.len() {
            1 => Ok(self.models[0]),
            m if m == n => Ok(self.models[i]),
            m => Err(Error::InvalidArgument(format!(
                "model set {:?} has {m} models for {n} queries",
                self.label
            ))),
        }
    }
}

/// Decomposes every query toward `o` (or `o*` when `star`) with its model.
pub fn decompose_set(
    set: &ModelSet,
    queries: &[TraceQuery],
    star: bool,
    convention: Convention,
) -> Result<Vec<DecompositionTrace>> {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let m = set.for_query(i, queries.len())?;
            decompose(m, &q.tokens, if star { q.o_star } else { q.o }, convention)
        })
        .collect()
}

/// Per-layer attention and MLP contribution means for each model set and
/// each of the two targets.
pub fn compare_traces(sets: &[ModelSet], queries: &[TraceQuery], convention: Convention) -> Result<TraceComparison> {
    if queries.is_empty() {
        return Err(Error::Empty("trace queries"));
    }
    let mut rows = Vec::new();
    for set in sets {
        for (star, target) in [(false, "o"), (true, "o*")] {
            let traces = decompose_set(set, queries, star, convention)?;
            let n_layers = traces[0].attn.len();
            for layer in 0..n_layers {
                for (component, pick) in [("attn", 0), ("mlp", 1)] {
                    let vals: Vec<f64> = traces
                        .iter()
                        .map(|t| if pick == 0 { t.attn[layer] } else { t.mlp[layer] })
                        .collect();
                    let (mean, se) = mean_se(&vals);
                    rows.push(TraceRow {
                        model: set.label.to_string(),
                        target: target.to_string(),
                        layer,
                        component: component.to_string(),
                        n: vals.len(),
                        mean,
                        se,
                    });
                }
            }
        }
    }
    Ok(TraceComparison { convention, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Amplification {
    pub layer: usize,
    pub baseline: f64,
    pub edited: f64,
    /// `edited / baseline`; infinite when the baseline is 0.
    pub ratio: f64,
    pub infinite: bool,
}

impl Amplification {
    pub fn from_means(layer: usize, baseline: f64, edited: f64) -> Self {
        let infinite = baseline == 0.0;
        Self {
            layer,
            baseline,
            edited,
            ratio: if infinite { f64::INFINITY } else { edited / baseline },
            infinite,
        }
    }
}

/// Ratio of the mean absolute MLP contribution at `layer`, edited over original.
pub fn edited_layer_amplification(
    original: &[DecompositionTrace],
    edited: &[DecompositionTrace],
    layer: usize,
) -> Result<Amplification> {
    if original.is_empty() || original.len() != edited.len() {
        return Err(Error::InvalidArgument(format!(
            "need matched non-empty trace sets, got {} and {}",
            original.len(),
            edited.len()
        )));
    }
    let mean_abs = |ts: &[DecompositionTrace]| -> Result<f64> {
        let mut s = 0.0;
        for t in ts {
            s += t
                .mlp
                .get(layer)
                .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} not in trace")))?
                .abs();
        }
        Ok(s / ts.len() as f64)
    };
    Ok(Amplification::from_means(layer, mean_abs(original)?, mean_abs(edited)?))
}

/// Mean over traces of the summed attention contributions above `layer`.
pub fn downstream_attention(traces: &[DecompositionTrace], layer: usize) -> f64 {
    let sum: f64 = traces.iter().map(|t| t.attn.iter().skip(layer + 1).sum::<f64>()).sum();
    sum / traces.len().max(1) as f64
}

/// Final-position residual entering each layer plus the final residual:
/// `[n_layers + 1, d_model]`.
pub fn activation_heatmap(model: &TransformerModel, prompt: &[usize]) -> Result<Array2<f64>> {
    let (_, trace) = model.forward(prompt, true)?;
    let trace = trace.expect("capture requested");
    let last = prompt.len() - 1;
    let mut grid = Array2::zeros((trace.resid.len(), model.config.d_model));
    for (l, r) in trace.resid.iter().enumerate() {
        grid.row_mut(l).assign(&r.row(last));
    }
    Ok(grid)
}

pub fn grid_csv(grid: &Array2<f64>) -> String {
    let mut s = String::from("layer");
    for j in 0..grid.ncols() {
        write!(s, ",d{j}").expect("writing to a String");
    }
    s.push('\n');
    for (l, row) in grid.rows().into_iter().enumerate() {
        write!(s, "{l}").expect("writing to a String");
        for v in row {
            write!(s, ",{v}").expect("writing to a String");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStat {
    pub column: usize,
    pub pruned_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStructure {
    pub total_pruned: usize,
    /// Percentage of pruned entries in each output-dimension column.
    pub per_column_pct: Vec<f64>,
    pub per_column_count: Vec<usize>,
    /// `per_column_pct` sorted descending.
    pub sorted_pct: Vec<f64>,
    /// Highest pruned share first, ties by lower column index.
    pub top: Vec<ColumnStat>,
}

pub fn mask_structure(mask: &BinaryMask, top_k: usize) -> MaskStructure {
    let (rows, cols) = mask.shape();
    let per_column_count: Vec<usize> = (0..cols)
        .map(|j| mask.keep.column(j).iter().filter(|&&k| k == 0.0).count())
        .collect();
    let per_column_pct: Vec<f64> = per_column_count
        .iter()
        .map(|&c| 100.0 * c as f64 / rows.max(1) as f64)
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| per_column_pct[b].total_cmp(&per_column_pct[a]).then(a.cmp(&b)));
    MaskStructure {
        total_pruned: per_column_count.iter().sum(),
        sorted_pct: order.iter().map(|&j| per_column_pct[j]).collect(),
        top: order
            .iter()
            .take(top_k)
            .map(|&j| ColumnStat {
                column: j,
                pruned_pct: per_column_pct[j],
            })
            .collect(),
        per_column_pct,
        per_column_count,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub mean_abs_delta: f64,
    /// `None` when the mask prunes nothing.
    pub masked_mean_abs_delta: Option<f64>,
    /// Share of pruned positions that fall in the equally sized top-|ΔŴ| set.
    pub top_delta_overlap: Option<f64>,
    pub pruned_count: usize,
}

/// Flat indices of the `n` largest `|x|`, ties by lower flat index.
pub fn top_abs_indices(x: &Array2<f64>, n: usize) -> Vec<usize> {
    let flat: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    let mut idx: Vec<usize> = (0..flat.len()).collect();
    idx.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

pub fn delta_magnitude_stats(edit: &EditedLayerWeights, mask: &BinaryMask) -> Result<DeltaStats> {
    if edit.edited.dim() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs edited matrix {:?}",
            mask.shape(),
            edit.edited.dim()
        )));
    }
    let delta = edit.delta();
    let abs: Vec<f64> = delta.iter().map(|v| v.abs()).collect();
    let pruned: Vec<usize> = mask
        .keep
        .iter()
        .enumerate()
        .filter(|(_, &k)| k == 0.0)
        .map(|(i, _)| i)
        .collect();
    let mean_abs_delta = abs.iter().sum::<f64>() / abs.len().max(1) as f64;
    if pruned.is_empty() {
        return Ok(DeltaStats {
            mean_abs_delta,
            masked_mean_abs_delta: None,
            top_delta_overlap: None,
            pruned_count: 0,
        });
    }
    let masked = pruned.iter().map(|&i| abs[i]).sum::<f64>() / pruned.len() as f64;
    let mut top = top_abs_indices(&delta, pruned.len());
    top.sort_unstable();
    let hits = pruned.iter().filter(|i| top.binary_search(i).is_ok()).count();
    Ok(DeltaStats {
        mean_abs_delta,
        masked_mean_abs_delta: Some(masked),
        top_delta_overlap: Some(hits as f64 / pruned.len() as f64),
        pruned_count: pruned.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub model: String,
    pub dim: usize,
    pub layer: usize,
    pub mean: f64,
    pub se: Option<f64>,
}

/// Final-position residual value of each dimension at every depth, averaged
/// over prompts. `dims` are kept in the given order.
pub fn dimension_trajectories(sets: &[ModelSet], dims: &[usize], prompts: &[Vec<usize>]) -> Result<Vec<TrajectoryRow>> {
    if prompts.is_empty() {
        return Err(Error::Empty("trajectory prompts"));
    }
    let mut rows = Vec::new();
    for set in sets {
        let mut grids = Vec::with_capacity(prompts.len());
        for (i, p) in prompts.iter().enumerate() {
            let model = set.for_query(i, prompts.len())?;
            if let Some(&d) = dims.iter().find(|&&d| d >= model.config.d_model) {
                return Err(Error::InvalidArgument(format!(
                    "dimension {d} out of range for d_model {}",
                    model.config.d_model
                )));
            }
            grids.push(activation_heatmap(model, p)?);
        }
        for &dim in dims {
            for layer in 0..grids[0].nrows() {
                let vals: Vec<f64> = grids.iter().map(|g| g[[layer, dim]]).collect();
                let (mean, se) = mean_se(&vals);
                rows.push(TrajectoryRow {
                    model: set.label.to_string(),
                    dim,
                    layer,
                    mean,
                    se,
                });
            }
        }
    }
    Ok(rows)
}

pub fn trajectories_csv(rows: &[TrajectoryRow]) -> String {
    let mut s = String::from("model,dim,layer,mean,se\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.model, r.dim, r.layer, r.mean, opt_csv(r.se)).expect("writing to a String");
    }
    s
}

/// Euclidean distance between two models' mean curves for one dimension.
pub fn curve_distance(rows: &[TrajectoryRow], a: &str, b: &str, dim: usize) -> f64 {
    let curve = |m: &str| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.model == m && r.dim == dim)
            .map(|r| r.mean)
            .collect()
    };
    let (x, y) = (curve(a), curve(b));
    x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}
