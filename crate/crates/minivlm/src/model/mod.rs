//! Dual-encoder vision-language model: a patch-transformer vision tower, a
//! token-transformer text tower, an attention-pooling head, projections into
//! a shared embedding space, and the sigmoid contrastive loss that ties the
//! two sides together.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tokenizer;
pub mod train;

pub use config::ModelConfig;
pub use forward::{attention_pool, encode_image, encode_text, EncodeOutput, ParamVars};
pub use loss::sigmoid_contrastive_loss;
pub use optim::{AdamHyper, AdamState};
pub use params::ModelParams;
pub use tokenizer::Vocab;
pub use train::{curriculum_train, train_step, TrainPhase};
