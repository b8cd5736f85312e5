//! Small analytic models for checking decoders against enumeration.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SequenceModel;
use crate::error::{Error, Result};

fn check_prefixes(vocab: usize, prefixes: &[Vec<u32>]) -> Result<()> {
    match prefixes.iter().flatten().find(|&&t| t as usize >= vocab) {
        Some(t) => Err(Error::Contract(format!(
            "token {t} outside vocabulary of {vocab}"
        ))),
        None => Ok(()),
    }
}

fn fnv(seed: u64, parts: &[&[u32]]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for part in parts {
        for &t in part.iter() {
            h = (h ^ u64::from(t)).wrapping_mul(0x0100_0000_01b3);
        }
        h = (h ^ 0xff).wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Each (source, prefix) pair gets its own pseudo-random distribution:
/// Gaussian logits scaled by `sharpness`, derived from a hash of the pair.
#[derive(Clone, Debug)]
pub struct HashedToyModel {
    pub vocab: usize,
    pub seed: u64,
    pub sharpness: f64,
}

impl HashedToyModel {
    pub fn new(vocab: usize, seed: u64, sharpness: f64) -> Self {
        Self {
            vocab,
            seed,
            sharpness,
        }
    }

    pub fn distribution(&self, source: &[u32], prefix: &[u32]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv(self.seed, &[source, prefix]));
        let logits: Vec<f64> = (0..self.vocab)
            .map(|_| {
                let n: f64 = (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0;
                self.sharpness * n
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - lse).collect()
    }
}

impl SequenceModel for HashedToyModel {
    type Encoded = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn encode_source(&self, source: &[u32]) -> Result<Vec<u32>> {
        Ok(source.to_vec())
    }

    fn next_log_probs(&self, encoded: &Vec<u32>, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        check_prefixes(self.vocab, prefixes)?;
        Ok(prefixes
            .iter()
            .map(|p| self.distribution(encoded, p))
            .collect())
    }
}

/// Explicit next-token tables keyed by prefix, ignoring the source.
/// Unlisted prefixes are uniform; unlisted tokens in a listed prefix have
/// probability zero.
#[derive(Clone, Debug, Default)]
pub struct TableModel {
    vocab: usize,
    table: HashMap<Vec<u32>, Vec<f64>>,
}

impl TableModel {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            table: HashMap::new(),
        }
    }

    pub fn set(&mut self, prefix: &[u32], probs: &[(u32, f64)]) {
        let mut lp = vec![f64::NEG_INFINITY; self.vocab];
        for &(t, p) in probs {
            lp[t as usize] = p.ln();
        }
        self.table.insert(prefix.to_vec(), lp);
    }
}

impl SequenceModel for TableModel {
    type Encoded = ();

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn encode_source(&self, _: &[u32]) -> Result<()> {
        Ok(())
    }

    fn next_log_probs(&self, _: &(), prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        check_prefixes(self.vocab, prefixes)?;
        let uniform = vec![-(self.vocab as f64).ln(); self.vocab];
        Ok(prefixes
            .iter()
            .map(|p| self.table.get(p).unwrap_or(&uniform).clone())
            .collect())
    }
}
