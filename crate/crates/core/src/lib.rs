//! Discrete alignment of fMRI, video and caption features.
//!
//! The pipeline encodes each modality into a shared width, trains with a
//! predictive contrastive objective plus HRF-aware matching and commitment
//! terms, and discretizes through one shared codebook refreshed by a
//! synchronized multi-modal EMA. [`eval`] measures cross-modal retrieval.

pub mod autograd;
pub mod codebook;
pub mod config;
pub mod container;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod hrf;
pub mod matching;
pub mod predictive;
pub mod par;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autograd::{cosine_similarity, forward_backward, Graph, ParamStore, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
