//! Teacher-forced training, validation and vocabulary-extending finetuning.

mod finetune;
mod optim;
mod trainer;

pub use finetune::extend_vocabulary;
pub use optim::{clip_global_norm, global_norm, lr_schedule, Adam, AdamSettings};
pub use trainer::{
    fit_examples, validate, validate_batches, MetricsRecord, RunOutput, TrainSettings, Trainer,
    Validation, BEST, LATEST, METRICS,
};

use crate::autograd::Graph;
use crate::error::Result;
use crate::tensor::Tensor;

/// Mean `-log softmax(logits)[target]` over non-pad positions.
pub fn cross_entropy_loss(logits: &Tensor, targets: &[u32], pad: u32) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, targets, pad, 0.0)?;
    Ok(g.value(loss).data()[0])
}
