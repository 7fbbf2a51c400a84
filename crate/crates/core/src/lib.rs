//! Unsupervised cross-modal contrastive hashing.
//!
//! Image and text hash networks are trained over pre-extracted embeddings with
//! inter- and intra-modal contrastive losses, an adversarial modality
//! discriminator, and quantization / bit-balance penalties. Trained networks
//! produce bit-packed codes that are searched by Hamming distance and scored
//! with mAP@K and precision@K.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod matrix;
pub mod models;
pub mod retrieval;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use autodiff::{BatchNormState, Mode, Param, Tape, Var};
pub use dataset::{EmbeddingDataset, Split, SyntheticConfig, TrainingData};
pub use error::{Error, Result};
pub use eval::{Direction, EvalConfig, EvalReport};
pub use losses::{BatchCodes, LossWeights};
pub use matrix::Matrix;
pub use models::{DiscriminatorNet, HashNetwork, ModelBundle};
pub use retrieval::{PackedCodes, RetrievalIndex};
pub use trainer::{AblationSwitch, TrainConfig, TrainReport};
