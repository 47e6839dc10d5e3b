//! Layers and classifier architectures for diagnosis-sequence modeling.
//!
//! Four architectures share one substrate: token embeddings (frozen) feed a
//! stack of LSTM layers, optionally preceded by a convolution unit or followed
//! by a self-attention pool, and a linear head emits two class logits.

mod attention;
mod checkpoint;
mod conv_unit;
mod init;
mod lstm;
mod model;

pub use attention::{attention, AttentionParams};
pub use conv_unit::{conv_unit_forward, ConvUnitParams};
pub use lstm::{bilstm_forward, lstm_cell, lstm_direction_param_count, LstmDirParams, LstmLayer};
pub use model::{BatchForward, Model, TrainStep};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {token} outside vocabulary of size {vocab}")]
    UnknownToken { token: u32, vocab: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("operation requires the {expected} architecture, model is {got}")]
    WrongArchitecture { expected: Architecture, got: Architecture },
    #[error("model misuse: {0}")]
    Usage(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The four classifier variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    UniLstm,
    BiLstm,
    BiLstmAttn,
    BiLstmCnn,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::UniLstm,
        Architecture::BiLstm,
        Architecture::BiLstmAttn,
        Architecture::BiLstmCnn,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::UniLstm => "uni-lstm",
            Architecture::BiLstm => "bi-lstm",
            Architecture::BiLstmAttn => "bi-lstm-attn",
            Architecture::BiLstmCnn => "bi-lstm-cnn",
        }
    }

    pub fn is_bidirectional(&self) -> bool {
        !matches!(self, Architecture::UniLstm)
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uni-lstm" => Ok(Architecture::UniLstm),
            "bi-lstm" => Ok(Architecture::BiLstm),
            "bi-lstm-attn" => Ok(Architecture::BiLstmAttn),
            "bi-lstm-cnn" => Ok(Architecture::BiLstmCnn),
            other => Err(format!(
                "unknown architecture '{other}'; valid: uni-lstm, bi-lstm, bi-lstm-attn, bi-lstm-cnn"
            )),
        }
    }
}

/// Declarative model configuration. The defaults reproduce the reference
/// sizes: 200-d embeddings, 2 LSTM layers of hidden size 128, 256 convolution
/// channels with kernel 3 and pool 2, attention width 128, two classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub pool: usize,
    pub attn_width: usize,
    pub classes: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(arch: Architecture, embed_dim: usize, max_len: usize, seed: u64) -> Self {
        ModelSpec {
            arch,
            embed_dim,
            hidden: 128,
            layers: 2,
            conv_channels: 256,
            kernel: 3,
            pool: 2,
            attn_width: 128,
            classes: 2,
            max_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let extents = [
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("conv_channels", self.conv_channels),
            ("kernel", self.kernel),
            ("pool", self.pool),
            ("attn_width", self.attn_width),
            ("classes", self.classes),
            ("max_len", self.max_len),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(ModelError::Usage(format!("{name} must be positive")));
            }
        }
        if self.classes != 2 {
            return Err(ModelError::Usage("binary classification only".into()));
        }
        Ok(())
    }
}

/// Whether batch normalization uses batch statistics (train) or running
/// statistics (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
