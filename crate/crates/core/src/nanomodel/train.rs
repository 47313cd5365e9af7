//! Fact pretraining.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::Example;
use super::optim::AdamW;
use super::TransformerModel;
use crate::corpus::Corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Share of batch slots filled with neutral-text windows.
    pub neutral_fraction: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 3e-3,
            batch_size: 16,
            weight_decay: 0.0,
            warmup_steps: 100,
            neutral_fraction: 0.25,
            log_every: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactRecall {
    pub fact_id: usize,
    pub object: usize,
    pub predicted: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall: f64,
    pub per_fact: Vec<FactRecall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub curve: Vec<CurvePoint>,
    pub recall: RecallReport,
}

/// Argmax next token after each canonical prompt.
pub fn fact_recall(model: &TransformerModel, corpus: &Corpus) -> Result<RecallReport> {
    let mut per_fact = Vec::with_capacity(corpus.facts.len());
    for f in &corpus.facts {
        let p = f.prompt(&corpus.vocab)?;
        let predicted = model.top1(&p.tokens)?;
        per_fact.push(FactRecall {
            fact_id: f.id,
            object: f.object,
            predicted,
            correct: predicted == f.object,
        });
    }
    let recall = per_fact.iter().filter(|r| r.correct).count() as f64 / per_fact.len().max(1) as f64;
    Ok(RecallReport { recall, per_fact })
}

fn lr_at(cfg: &PretrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    // Cosine decay to a tenth of the peak rate.
    cfg.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Trains on every fact under every template plus neutral-text windows.
/// Weights are snapped to the f32 grid at the end so that checkpoints are
/// lossless.
pub fn pretrain(
    mut model: TransformerModel,
    corpus: &Corpus,
    cfg: &PretrainConfig,
) -> Result<(TransformerModel, PretrainReport)> {
    if corpus.facts.is_empty() {
        return Err(Error::Empty("corpus facts"));
    }
    model.config.check_prompt_fits(corpus.longest_prompt())?;
    let mut fact_examples = Vec::new();
    for f in &corpus.facts {
        for t in &corpus.templates {
            let p = f.render(t, &corpus.vocab)?;
            fact_examples.push(Example::last_only(&p.tokens, f.object));
        }
    }
    let win = model.config.max_seq_len + 1;
    let neutral = &corpus.neutral_train;
    let use_neutral = cfg.neutral_fraction > 0.0 && neutral.len() > win;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        let batch: Vec<Example> = (0..cfg.batch_size.max(1))
            .map(|_| {
                if use_neutral && rng.random::<f64>() < cfg.neutral_fraction {
                    let start = rng.random_range(0..neutral.len() - win);
                    Example::language_model(&neutral[start..start + win])
                } else {
                    fact_examples[rng.random_range(0..fact_examples.len())].clone()
                }
            })
            .collect();
        let (loss, grads) = model.loss_and_grads(&batch).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { step },
            e => e,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            curve.push(CurvePoint { step, loss });
        }
        opt.lr = lr_at(cfg, step);
        let mut params = model.weights.tensors_mut();
        let grads_t = grads.tensors();
        opt.step(
            params.iter_mut().map(|(_, p)| p.as_slice_mut().expect("contiguous")),
            grads_t.iter().map(|(_, g)| g.as_slice().expect("contiguous")),
        );
    }
    model.weights.snap_to_f32();
    if !model.weights.all_finite() {
        return Err(Error::Diverged { step: cfg.steps });
    }
    let recall = fact_recall(&model, corpus)?;
    Ok((model, PretrainReport { curve, recall }))
}
