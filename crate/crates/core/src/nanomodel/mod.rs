//! Tiny pre-norm decoder-only transformer with manual backpropagation,
//! residual-stream capture and forward-time interventions.

mod backward;
mod checkpoint;
mod config;
mod forward;
mod optim;
mod train;
mod weights;

pub use backward::{cross_entropy, BackwardOptions, Example, Gradients};
pub use checkpoint::{
    decode_tensors, encode_tensors, read_tensor_file, write_tensor_file, TensorEntry, TensorFile, MAGIC,
};
pub use config::ModelConfig;
pub use forward::{argmax, ForwardCache, Intervention, ResidualTrace, ValueOverride};
pub use optim::AdamW;
pub use train::{fact_recall, pretrain, CurvePoint, FactRecall, PretrainConfig, PretrainReport, RecallReport};
pub use weights::{LayerWeights, Weights};

pub(crate) use forward::{log_softmax_row, softmax_row};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub weights: Weights,
}

impl TransformerModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config);
        Ok(Self { config, weights })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let weights = Weights::zeros(&config);
        Ok(Self { config, weights })
    }

    pub fn w_proj(&self, layer: usize) -> &ndarray::Array2<f64> {
        &self.weights.layers[layer].w_proj
    }

    /// Copy of the model with one layer's down-projection replaced.
    pub fn with_proj(&self, layer: usize, w: ndarray::Array2<f64>) -> Self {
        let mut m = self.clone();
        m.weights.layers[layer].w_proj = w;
        m
    }
}
