use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pairs::DialogExample;
use crate::error::{Error, Result};
use crate::transformer::SeqBatch;

/// Padded source and target sequences of a group of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Positions of the examples in the input slice, in row order.
    pub indices: Vec<usize>,
    pub source: SeqBatch,
    pub target: SeqBatch,
}

impl Batch {
    pub fn from_examples(examples: &[DialogExample], indices: Vec<usize>) -> Result<Self> {
        let src: Vec<&[u32]> = indices
            .iter()
            .map(|&i| examples[i].source.as_slice())
            .collect();
        let tgt: Vec<&[u32]> = indices
            .iter()
            .map(|&i| examples[i].target.as_slice())
            .collect();
        Ok(Self {
            source: SeqBatch::from_sequences(&src)?,
            target: SeqBatch::from_sequences(&tgt)?,
            indices,
        })
    }

    pub fn rows(&self) -> usize {
        self.indices.len()
    }

    /// Non-pad target tokens, the count the loss is averaged over.
    pub fn target_tokens(&self) -> usize {
        self.target
            .ids
            .iter()
            .filter(|&&t| t != super::vocab::PAD_ID)
            .count()
    }
}

/// Groups examples of similar length so that `rows * padded_len` stays
/// within `budget` for sources and targets separately. The grouping and
/// the order of the groups both depend on `seed`.
pub fn batch_by_tokens(examples: &[DialogExample], budget: usize, seed: u64) -> Result<Vec<Batch>> {
    for (i, e) in examples.iter().enumerate() {
        if e.max_len() > budget {
            return Err(Error::Length(format!(
                "example {i} has {} tokens, more than the batch budget of {budget}",
                e.max_len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (examples[i].source.len(), examples[i].target.len()));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let (mut src_max, mut tgt_max) = (0, 0);
    for i in order {
        let (s, t) = (
            src_max.max(examples[i].source.len()),
            tgt_max.max(examples[i].target.len()),
        );
        let rows = current.len() + 1;
        if !current.is_empty() && (rows * s > budget || rows * t > budget) {
            groups.push(std::mem::take(&mut current));
            (src_max, tgt_max) = (examples[i].source.len(), examples[i].target.len());
        } else {
            (src_max, tgt_max) = (s, t);
        }
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut rng);
    groups
        .into_iter()
        .map(|g| Batch::from_examples(examples, g))
        .collect()
}
