use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub ln_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            d_mlp: 128,
            vocab_size: 160,
            max_seq_len: 16,
            ln_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.max_seq_len < 2 {
            return bad("d_model, n_heads, vocab_size must be positive and max_seq_len >= 2".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_mlp < self.d_model {
            return bad(format!("d_mlp {} must be >= d_model {}", self.d_mlp, self.d_model));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Checks that prompts of `longest_prompt` tokens plus the answer fit.
    pub fn check_prompt_fits(&self, longest_prompt: usize) -> Result<()> {
        if self.max_seq_len < longest_prompt + 1 {
            return Err(Error::InvalidConfig(format!(
                "max_seq_len {} < longest prompt {} + 1",
                self.max_seq_len, longest_prompt
            )));
        }
        Ok(())
    }
}
