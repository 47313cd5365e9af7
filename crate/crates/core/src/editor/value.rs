use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::check_layer;
use crate::corpus::Prompt;
use crate::error::{Error, Result};
use crate::nanomodel::{cross_entropy, softmax_row, BackwardOptions, Intervention, TransformerModel, ValueOverride};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueConfig {
    pub steps: usize,
    pub lr: f64,
    /// Stop once every paraphrase assigns at least this probability to `o*`.
    pub target_prob: f64,
    /// Coefficient of `‖v - v₀‖²` in the objective.
    pub weight_decay: f64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1.0,
            target_prob: 0.9,
            weight_decay: 1e-3,
        }
    }
}

impl ValueConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: format!("editor.value.{key}"),
                message: message.to_string(),
            })
        };
        if !(self.lr > 0.0) {
            return bad("lr", "must be > 0");
        }
        if !(self.target_prob > 0.0 && self.target_prob < 1.0) {
            return bad("target_prob", "must lie in (0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueSolution {
    pub v_star: Array1<f64>,
    /// The layer's output at the key before optimization, `Wᵀk*`.
    pub v0: Array1<f64>,
    /// Smallest `P(o*)` across paraphrases with `v*` substituted.
    pub achieved_p: f64,
    pub steps: usize,
    pub converged: bool,
}

/// Gradient ascent on the mean paraphrase log-probability of `target` when
/// the layer's MLP output at the last subject token is replaced by `v`,
/// with a quadratic pull towards `v0`.
pub fn solve_value(
    model: &TransformerModel,
    layer: usize,
    prompts: &[Prompt],
    key: &Array1<f64>,
    target: usize,
    cfg: &ValueConfig,
) -> Result<ValueSolution> {
    check_layer(model, layer)?;
    if prompts.is_empty() {
        return Err(Error::Empty("value prompts"));
    }
    if target >= model.config.vocab_size {
        return Err(Error::OutOfVocab {
            token: target,
            position: 0,
            vocab_size: model.config.vocab_size,
        });
    }
    let v0 = key.dot(model.w_proj(layer));
    let mut v = v0.clone();
    let n = prompts.len() as f64;
    let mut steps = 0;
    loop {
        let mut grad = Array1::zeros(v.len());
        let mut min_p = f64::INFINITY;
        for p in prompts {
            let iv = Intervention {
                proj: &[],
                value: Some(ValueOverride {
                    layer,
                    position: p.subject_last,
                    value: v.view(),
                }),
            };
            let cache = model.run(&p.tokens, &iv)?;
            let last = p.tokens.len() - 1;
            min_p = min_p.min(softmax_row(cache.logits.row(last))[target]);
            if steps == cfg.steps {
                continue;
            }
            let mut targets = vec![None; p.tokens.len()];
            targets[last] = Some(target);
            let (_, dl) = cross_entropy(&cache.logits, &targets);
            let g = model.backward(&cache, &dl, &iv, &BackwardOptions::activations_to(layer));
            let d = g.d_mlp_out[layer].as_ref().expect("layer visited");
            grad -= &(&d.row(p.subject_last) / n);
        }
        if !min_p.is_finite() || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                term: "value optimization".into(),
            });
        }
        if min_p >= cfg.target_prob || steps == cfg.steps {
            return Ok(ValueSolution {
                v_star: v,
                v0,
                achieved_p: min_p,
                steps,
                converged: min_p >= cfg.target_prob,
            });
        }
        grad -= &((&v - &v0) * (2.0 * cfg.weight_decay));
        v.scaled_add(cfg.lr, &grad);
        steps += 1;
    }
}
