//! Input packing and the transformer classifier.
//!
//! Two formulations: N binary classifiers over `[CLS] q_y [SEP] x`, and one
//! N-class classifier over `[CLS1] q_1 ... [CLSN] q_N [SEP] x`. A
//! description-free head with the same encoder serves as the ablation
//! baseline.

mod heads;
mod pack;
mod transformer;

pub use heads::{
    decide, BaselineModel, BinaryOut, ClassProbs, ClassifierModel, Formulation, MulticlassOut,
};
pub use pack::{pack_binary, pack_multiclass, pack_plain, PackLayout, PackedInput};
pub use transformer::TransformerEncoder;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("description of {desc} tokens cannot fit in max_len {max_len}")]
    DescriptionTooLong { desc: usize, max_len: usize },
    #[error("{n} descriptions cannot fit in max_len {max_len} even at 1 token each")]
    DescriptionsDontFit { n: usize, max_len: usize },
    #[error("packed input of {len} tokens exceeds max_len {max_len}")]
    OverLength { len: usize, max_len: usize },
    #[error("the one-N-class formulation cannot handle multi-label tasks")]
    MulticlassMultiLabel,
}

/// Encoder hyperparameters. Desk-scale defaults stand in for the full-size
/// pretrained backbone the method is usually run with.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub segment_count: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 4,
            d_model: 128,
            d_ff: 256,
            max_len: 256,
            dropout: 0.0,
            vocab_size: 0,
            segment_count: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d_model % self.heads != 0 {
            return Err(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.vocab_size == 0 {
            return Err("vocab_size must be set before building a model".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0,1)", self.dropout));
        }
        Ok(())
    }
}
