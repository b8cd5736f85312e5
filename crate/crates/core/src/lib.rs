//! Transformer encoder-decoder conversational models built from scratch:
//! a small reverse-mode autograd engine, the encoder-decoder itself, dialog
//! corpus preparation, training, decoding, evaluation metrics and an
//! interactive chat service.

pub mod autograd;
pub mod chat;
pub mod checkpoint;
pub mod data;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod scoring;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use autograd::{AttentionSpec, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub use transformer::{Transformer, TransformerConfig};
