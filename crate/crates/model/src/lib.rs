//! Networks, losses and training loop for scene text removal.

pub mod checkpoint;
pub mod config;
pub mod discriminator;
pub mod extractor;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use config::{Ablation, FlatConfig, LossWeights, NetConfig, TrainConfig, TransformerConfig};
pub use extractor::{FeatureExtractor, TextureNet};
pub use losses::LossBreakdown;
pub use generator::{Generator, GeneratorOutput};
pub use train::Trainer;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Data(#[from] textwipe_core::data::DataError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("input shape: {0}")]
    Shape(String),
    #[error("target context is train-only; it needs the ground-truth image")]
    TrainOnly,
    #[error("token grid {side}x{side} exceeds max_token_side {max}; reduce the input size or raise max_token_side")]
    TokenLimit { side: usize, max: usize },
    #[error("non-finite loss in {component} at step {step}")]
    NonFinite { component: &'static str, step: u64 },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
