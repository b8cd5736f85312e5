//! The Transformer encoder-decoder.

mod config;
pub mod layers;
mod model;
mod params;

pub use config::TransformerConfig;
pub use layers::{causal_mask, positional_encoding, scaled_dot_product_attention};
pub(crate) use model::NoRng;
pub use model::{log_softmax, EncoderOutput, SeqBatch, Transformer};
pub(crate) use params::{layout, sample_init};
pub use params::{BoundParams, ModelParameters};
