//! Neural approximate parser: an autoregressive model of `p(trace | text)`.
//!
//! A stacked recurrent encoder reads the tokenized production; a recurrent
//! decoder then predicts one decision per step. Its input at step `t` is the
//! value embedding of the previous decision (a learned start vector at
//! `t = 0`), the name embedding of the node being decided, and the text
//! encoding. Node identities always come from replaying the grammar, and
//! values the grammar does not admit at that point are masked out.

mod checkpoint;
mod decode;
mod gru;
mod model;
mod params;
mod train;
mod vocab;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simulator::{ExecError, Trace};

pub use checkpoint::{load_model, read_model, save_model, write_model, CHECKPOINT_VERSION};
pub use decode::{parse, posterior_eval, step_log_probs, DecodeMode, ParseResult, MAX_BEAM_WIDTH};
pub use model::{build_model, InferenceModel};
pub use params::{Params, TensorInfo};
pub use train::{constant_baseline_accuracy, grad_check, step_accuracy, train, TrainReport, Trainer, DIVERGENCE_NATS};
pub use vocab::{Vocabulary, PAD, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed: usize,
    pub encoder_layers: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 256,
            embed: 32,
            encoder_layers: 4,
            batch_size: 64,
            epochs: 20,
            lr: 5e-4,
            weight_decay: 1e-7,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NapError> {
        let sizes = [
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("encoder_layers", self.encoder_layers),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(NapError::BadConfig(format!("{name} must be positive")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(NapError::BadConfig("lr must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(NapError::BadConfig("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum NapError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("grammar hash mismatch: expected {expected}, got {found}")]
    HashMismatch { expected: String, found: String },
    #[error("node '{0}' is not in the vocabulary")]
    UnknownNode(String),
    #[error("value '{value}' of node '{node}' is not in the vocabulary")]
    UnknownValue { node: String, value: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("record {record}: {source}")]
    InvalidTrace { record: usize, source: ExecError },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss} nats/step")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("record has an empty trace; nothing to differentiate")]
    EmptyTrace,
    #[error("dead decode at step {step}: no admissible value for {node} after {prefix}")]
    DeadDecode { step: usize, node: String, prefix: Trace },
    #[error("decode failed: {0}")]
    Decode(ExecError),
    #[error("invalid beam width {0}")]
    BadBeamWidth(usize),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
