use serde::{Deserialize, Serialize};

use super::text::normalize;
use super::vocab::{Vocabulary, EOS_ID, UNK_NAME};
use crate::error::{Error, Result};

/// One turn of a conversation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub text: String,
    pub tokens: Vec<String>,
    /// Character name token, e.g. `BIANCA_m0`.
    pub speaker: Option<String>,
    pub movie: Option<String>,
}

impl Utterance {
    pub fn new(text: &str) -> Self {
        Self {
            text: text.to_string(),
            tokens: normalize(text),
            speaker: None,
            movie: None,
        }
    }

    pub fn with_speaker(text: &str, speaker: Option<String>, movie: Option<String>) -> Self {
        Self {
            speaker,
            movie,
            ..Self::new(text)
        }
    }
}

/// Builds a character name token from a display name and a movie id:
/// `("MRS. ROBINSON", "m77")` gives `MRS._ROBINSON_m77`.
pub fn name_token(name: &str, movie: &str) -> Option<String> {
    let name = name.split_whitespace().collect::<Vec<_>>().join("_");
    let movie = movie.trim();
    if name.is_empty() || movie.is_empty() {
        return None;
    }
    Some(format!("{name}_{movie}"))
}

/// Speaker and addressee tokens placed around a source utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub speaker: String,
    pub addressee: String,
}

/// A source/target pair of token lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    /// Speaker labels of the source and target utterances, as given by the
    /// corpus.
    pub source_speaker: Option<String>,
    pub target_speaker: Option<String>,
    pub persona: Option<Persona>,
}

impl TextPair {
    pub fn new(source: Vec<String>, target: Vec<String>) -> Self {
        Self {
            source,
            target,
            source_speaker: None,
            target_speaker: None,
            persona: None,
        }
    }

    /// Source tokens as the model sees them, persona tokens included.
    pub fn source_tokens(&self) -> Vec<String> {
        match &self.persona {
            Some(p) => {
                let mut out = Vec::with_capacity(self.source.len() + 2);
                out.push(p.speaker.clone());
                out.extend(self.source.iter().cloned());
                out.push(p.addressee.clone());
                out
            }
            None => self.source.clone(),
        }
    }
}

/// Pairs each utterance with the next one. Pairs touching an utterance that
/// is empty after cleaning are dropped; a conversation shorter than two
/// turns yields nothing.
pub fn build_pairs(conversation: &[Utterance]) -> Vec<TextPair> {
    conversation
        .windows(2)
        .filter(|w| !w[0].tokens.is_empty() && !w[1].tokens.is_empty())
        .map(|w| TextPair {
            source_speaker: w[0].speaker.clone(),
            target_speaker: w[1].speaker.clone(),
            ..TextPair::new(w[0].tokens.clone(), w[1].tokens.clone())
        })
        .collect()
}

/// Every sentence is the target of the line before it and the source of
/// the line after it.
pub fn pair_opensubtitles<S: AsRef<str>>(lines: &[S]) -> Vec<TextPair> {
    let utterances: Vec<Utterance> = lines.iter().map(|l| Utterance::new(l.as_ref())).collect();
    build_pairs(&utterances)
}

/// Wraps the source in speaker and addressee tokens. Names missing from
/// `names` become `<UNK_NAME>`. Returns the pair unchanged and `false` when
/// either label is missing.
pub fn annotate_speakers(
    pair: &TextPair,
    speaker: Option<&str>,
    addressee: Option<&str>,
    names: &Vocabulary,
) -> (TextPair, bool) {
    let known = |n: &str| {
        if names.contains(n) {
            n.to_string()
        } else {
            UNK_NAME.to_string()
        }
    };
    match (speaker, addressee) {
        (Some(s), Some(a)) => {
            let persona = Persona {
                speaker: known(s),
                addressee: known(a),
            };
            (
                TextPair {
                    persona: Some(persona),
                    ..pair.clone()
                },
                true,
            )
        }
        _ => (
            TextPair {
                persona: None,
                ..pair.clone()
            },
            false,
        ),
    }
}

/// A pair in id form, both sides terminated by `<EOS>`. When `persona` is
/// set the first and the second-to-last source ids are persona tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogExample {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub persona: bool,
}

impl DialogExample {
    pub fn from_pair(pair: &TextPair, vocab: &Vocabulary) -> Self {
        Self {
            source: vocab.encode(&pair.source_tokens()),
            target: vocab.encode(&pair.target),
            persona: pair.persona.is_some(),
        }
    }

    pub fn check(&self, vocab_size: usize) -> Result<()> {
        let ok = |ids: &[u32]| !ids.is_empty() && ids.iter().all(|&i| (i as usize) < vocab_size);
        if !ok(&self.source) || !ok(&self.target) {
            return Err(Error::Vocabulary(format!(
                "example has ids outside a vocabulary of {vocab_size}"
            )));
        }
        Ok(())
    }

    /// Limits both sides to `max_len` ids, `<EOS>` included. Sources lose
    /// their oldest words, keeping persona tokens; targets lose their tail.
    pub fn truncated(&self, max_len: usize) -> Self {
        let max_len = max_len.max(if self.persona { 3 } else { 1 });
        let mut out = self.clone();
        if self.source.len() > max_len {
            let body = &self.source[..self.source.len() - 1];
            let mut src = Vec::with_capacity(max_len);
            if self.persona {
                let keep = max_len - 3;
                src.push(body[0]);
                src.extend_from_slice(&body[body.len() - 1 - keep..]);
            } else {
                src.extend_from_slice(&body[body.len() - (max_len - 1)..]);
            }
            src.push(EOS_ID);
            out.source = src;
        }
        if self.target.len() > max_len {
            out.target.truncate(max_len - 1);
            out.target.push(EOS_ID);
        }
        out
    }

    /// Longer of the two sides.
    pub fn max_len(&self) -> usize {
        self.source.len().max(self.target.len())
    }
}
