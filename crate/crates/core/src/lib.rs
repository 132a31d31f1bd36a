//! Image caption generation with a gated deep-transition recurrent network
//! over precomputed CNN image features.
//!
//! The model reads a caption one word at a time. At each step the first hidden
//! layer combines the word vector, its own previous state and the projected
//! image scaled by a memory gate; further layers transform that state within
//! the same step before the softmax over the vocabulary.

pub mod bleu;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod fsio;
pub mod grad;
pub mod model;
pub mod optim;
pub mod seed;
pub mod settings;
pub mod tensor;

pub use bleu::{corpus_bleu, BleuReport};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use decode::{evaluate_model, greedy_decode, Decoded};
pub use error::{Error, Result};
pub use grad::{gradient_check, GradCheckOptions, GradCheckReport, Gradients};
pub use model::{FeedMode, ModelConfig, ModelParams};
pub use optim::{train, TrainConfig, TrainOutcome, TrainSession};
pub use settings::{DataConfig, Settings};
pub use tensor::{Activation, Matrix, Vector};
