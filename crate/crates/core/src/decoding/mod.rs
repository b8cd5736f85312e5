//! Response generation: greedy, roulette-wheel sampling, beam search and
//! bidirectional mutual-information reranking.

mod search;
pub mod toy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::{EncoderOutput, Transformer};

pub use search::{beam_search, decode, greedy_decode, mmi_rerank, sample_decode, Reranked};

/// Anything that yields next-token log-probabilities for prefixes of a
/// target given an encoded source.
pub trait SequenceModel {
    type Encoded;

    fn vocab_size(&self) -> usize;

    /// Longest target the model can condition on, if bounded.
    fn max_target_len(&self) -> Option<usize> {
        None
    }

    fn encode_source(&self, source: &[u32]) -> Result<Self::Encoded>;

    /// Natural-log next-token distributions, one per prefix.
    fn next_log_probs(
        &self,
        encoded: &Self::Encoded,
        prefixes: &[Vec<u32>],
    ) -> Result<Vec<Vec<f64>>>;

    /// `log p(target | source)` under teacher forcing.
    fn score(&self, source: &[u32], target: &[u32]) -> Result<f64> {
        let enc = self.encode_source(source)?;
        let prefixes: Vec<Vec<u32>> = (0..target.len()).map(|i| target[..i].to_vec()).collect();
        let lps = self.next_log_probs(&enc, &prefixes)?;
        Ok(target.iter().zip(&lps).map(|(&t, lp)| lp[t as usize]).sum())
    }
}

impl SequenceModel for Transformer {
    type Encoded = EncoderOutput;

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_target_len(&self) -> Option<usize> {
        Some(self.config().max_sequence_length)
    }

    fn encode_source(&self, source: &[u32]) -> Result<EncoderOutput> {
        self.encode(source)
    }

    fn next_log_probs(
        &self,
        encoded: &EncoderOutput,
        prefixes: &[Vec<u32>],
    ) -> Result<Vec<Vec<f64>>> {
        self.next_token_log_probs(encoded, prefixes)
    }

    fn score(&self, source: &[u32], target: &[u32]) -> Result<f64> {
        Ok(self.target_log_probs(source, target)?.iter().sum())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
    Beam,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "sample" => Ok(Self::Sample),
            "beam" => Ok(Self::Beam),
            other => Err(Error::Config(format!("unknown decoding mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSettings {
    pub mode: DecodeMode,
    pub beam_width: usize,
    /// Generated tokens, `<EOS>` included.
    pub max_len: usize,
    pub seed: u64,
    /// Weight of the backward model when reranking.
    pub mmi_lambda: Option<f64>,
    /// Rank beam hypotheses by mean rather than total log-probability.
    pub length_normalize: bool,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam_width: 5,
            max_len: 30,
            seed: 0,
            mmi_lambda: None,
            length_normalize: false,
        }
    }
}

impl DecodeSettings {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if self.max_len < 1 {
            return Err(Error::Config("maximum length must be at least 1".into()));
        }
        if let Some(l) = self.mmi_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("MMI weight {l} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// A generated sequence with its cumulative natural-log probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub score: f64,
    /// Ends with `<EOS>`.
    pub finished: bool,
}

impl Hypothesis {
    /// Score used for ranking.
    pub fn rank_score(&self, length_normalize: bool) -> f64 {
        if length_normalize && !self.tokens.is_empty() {
            self.score / self.tokens.len() as f64
        } else {
            self.score
        }
    }
}
