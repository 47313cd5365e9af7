//! Reversal and edit metrics.
//!
//! Tie rules: a reversal needs `Δr > 0` strictly, and argmax ties go to the
//! lowest token index. Group comparisons use Welch's unequal-variance t-test
//! with a pooled-SD Cohen's d.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{EditRequest, Vocab};
use crate::error::{Error, Result};
use crate::maskforge::kl_row;
use crate::nanomodel::{argmax, Intervention, TransformerModel};

/// Outcome of one edit under the pruned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReversalRecord {
    pub edit_id: String,
    pub relation: usize,
    /// `P_{M_p}(o | x)`.
    pub p_o: f64,
    /// `P_{M_p}(o* | x)`.
    pub p_o_star: f64,
    /// `p_o - p_o_star`.
    pub delta_r: f64,
    pub top1_m: usize,
    pub top1_me: usize,
    pub top1_mp: usize,
}

impl ReversalRecord {
    pub fn reversed(&self) -> bool {
        self.delta_r > 0.0
    }
}

/// Scores one request on the original, edited and pruned models.
pub fn reversal_record(
    m: &TransformerModel,
    me: &TransformerModel,
    mp: &TransformerModel,
    request: &EditRequest,
    vocab: &Vocab,
) -> Result<ReversalRecord> {
    let prompt = request.fact.prompt(vocab)?.tokens;
    let p = mp.next_token_probs(&prompt, &Intervention::none())?;
    let (p_o, p_o_star) = (p[request.fact.object], p[request.new_object]);
    if p_o <= 0.0 || p_o_star <= 0.0 {
        return Err(Error::ZeroProbability("reversal record"));
    }
    Ok(ReversalRecord {
        edit_id: request.edit_id(),
        relation: request.fact.relation,
        p_o,
        p_o_star,
        delta_r: p_o - p_o_star,
        top1_m: m.top1(&prompt)?,
        top1_me: me.top1(&prompt)?,
        top1_mp: argmax(p.view()),
    })
}

/// Fraction of records with `Δr > 0`.
pub fn rsr(records: &[ReversalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("reversal records"));
    }
    Ok(records.iter().filter(|r| r.reversed()).count() as f64 / records.len() as f64)
}

pub fn records_csv(records: &[ReversalRecord]) -> String {
    let mut s = String::from("edit_id,relation,p_o,p_o_star,delta_r,top1_m,top1_me,top1_mp,reversed\n");
    for r in records {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.edit_id,
            r.relation,
            r.p_o,
            r.p_o_star,
            r.delta_r,
            r.top1_m,
            r.top1_me,
            r.top1_mp,
            r.reversed()
        )
        .expect("writing to a String");
    }
    s
}

/// Fraction of prompts on which both models share the argmax next token.
pub fn top1_overlap(a: &TransformerModel, b: &TransformerModel, prompts: &[Vec<usize>]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Empty("overlap prompts"));
    }
    let mut hits = 0;
    for p in prompts {
        if a.top1(p)? == b.top1(p)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / prompts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerplexityTriple {
    pub ppl_m: f64,
    pub ppl_me: f64,
    pub ppl_mp: f64,
}

pub fn perplexity_triple(
    m: &TransformerModel,
    me: &TransformerModel,
    mp: &TransformerModel,
    text: &[usize],
) -> Result<PerplexityTriple> {
    Ok(PerplexityTriple {
        ppl_m: m.perplexity(text)?,
        ppl_me: me.perplexity(text)?,
        ppl_mp: mp.perplexity(text)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let i = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub histogram: Histogram,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlPair {
    /// `KL(M ‖ M_e)`.
    pub edited: f64,
    /// `KL(M ‖ M_p)`.
    pub pruned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlPairs {
    pub temperature: f64,
    pub pairs: Vec<KlPair>,
    pub edited: Summary,
    pub pruned: Summary,
}

pub const KL_HISTOGRAM_BINS: usize = 10;

/// Final-position divergences of one prompt's edited and pruned outputs
/// from the original.
pub fn kl_pair(
    m: &TransformerModel,
    me: &TransformerModel,
    mp: &TransformerModel,
    prompt: &[usize],
    temperature: f64,
) -> Result<KlPair> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
    }
    let none = Intervention::none();
    let a = m.last_logits(prompt, &none)?;
    let e = me.last_logits(prompt, &none)?;
    let q = mp.last_logits(prompt, &none)?;
    Ok(KlPair {
        edited: kl_row(a.view(), e.view(), temperature),
        pruned: kl_row(a.view(), q.view(), temperature),
    })
}

/// Mean, median and histogram of both series; the histograms share edges
/// spanning `[0, max]`.
pub fn summarize_kl(pairs: Vec<KlPair>, temperature: f64) -> Result<KlPairs> {
    if pairs.is_empty() {
        return Err(Error::Empty("KL pairs"));
    }
    let ed: Vec<f64> = pairs.iter().map(|p| p.edited).collect();
    let pr: Vec<f64> = pairs.iter().map(|p| p.pruned).collect();
    let hi = ed.iter().chain(&pr).copied().fold(0.0, f64::max);
    let summary = |v: &[f64]| Summary {
        n: v.len(),
        mean: mean(v),
        median: median(v),
        histogram: Histogram::new(v, 0.0, hi, KL_HISTOGRAM_BINS),
    };
    Ok(KlPairs {
        temperature,
        edited: summary(&ed),
        pruned: summary(&pr),
        pairs,
    })
}

pub fn kl_pairs(
    m: &TransformerModel,
    me: &TransformerModel,
    mp: &TransformerModel,
    prompts: &[Vec<usize>],
    temperature: f64,
) -> Result<KlPairs> {
    let pairs = prompts
        .iter()
        .map(|p| kl_pair(m, me, mp, p, temperature))
        .collect::<Result<Vec<_>>>()?;
    summarize_kl(pairs, temperature)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalStats {
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Sample standard deviations (`n - 1` denominator).
    pub std_a: f64,
    pub std_b: f64,
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-sided p-value from Student's t with `df` degrees of freedom.
    pub p_value: f64,
    /// `(mean_b - mean_a) / pooled_sd`.
    pub cohens_d: f64,
    pub test: String,
}

pub fn signal_stats(a: &[f64], b: &[f64]) -> Result<SignalStats> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "both samples need at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let var = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0);
    let (va, vb) = (var(a, ma), var(b, mb));
    if va == 0.0 && vb == 0.0 {
        return Err(Error::UndefinedEffectSize);
    }
    let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    let (sa, sb) = (va / na, vb / nb);
    let t = (mb - ma) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(format!("t distribution: {e}")))?;
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(SignalStats {
        n_a: a.len(),
        n_b: b.len(),
        mean_a: ma,
        mean_b: mb,
        std_a: va.sqrt(),
        std_b: vb.sqrt(),
        t,
        df,
        p_value,
        cohens_d: (mb - ma) / pooled,
        test: "welch-t".into(),
    })
}

/// `P(token | prompt)` for every `(prompt, token)` pair, the samples fed to
/// [`signal_stats`].
pub fn output_probs(model: &TransformerModel, queries: &[(Vec<usize>, usize)]) -> Result<Vec<f64>> {
    queries.iter().map(|(p, t)| model.object_prob(p, *t)).collect()
}
