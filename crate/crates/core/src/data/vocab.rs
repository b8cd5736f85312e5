use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<EOS>";
pub const UNK: &str = "<UNK>";
pub const UNK_NAME: &str = "<UNK_NAME>";

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

const RESERVED: [&str; 3] = [PAD, EOS, UNK];

/// Character name tokens look like `MRS._ROBINSON_m77`: a name (never a
/// cleaned word, which is lowercase) followed by `_m` and a movie number.
pub fn is_name_token(token: &str) -> bool {
    if token == UNK_NAME {
        return true;
    }
    match token.rsplit_once("_m") {
        Some((name, movie)) => {
            !name.is_empty() && !movie.is_empty() && movie.bytes().all(|b| b.is_ascii_digit())
        }
        None => false,
    }
}

/// Bidirectional token/id mapping. Ids 0, 1 and 2 are always `<pad>`,
/// `<EOS>` and `<UNK>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Tokens ordered by descending count, ties broken by first occurrence.
fn by_frequency<'a>(items: impl IntoIterator<Item = &'a str>) -> Vec<&'a str> {
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (pos, tok) in items.into_iter().enumerate() {
        counts.entry(tok).or_insert((0, pos)).0 += 1;
    }
    let mut ranked: Vec<_> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    ranked.into_iter().map(|(t, _)| t).collect()
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit token list, which must start
    /// with the three reserved tokens and contain no duplicates.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::Vocabulary(format!(
                "vocabulary must begin with {RESERVED:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// The `max_words` most frequent tokens of `corpus` after the reserved
    /// tokens.
    pub fn build<'a, I, U>(corpus: I, max_words: usize) -> Result<Self>
    where
        I: IntoIterator<Item = U>,
        U: IntoIterator<Item = &'a String>,
    {
        Self::build_with_names(corpus, max_words, std::iter::empty::<&String>(), 0)
    }

    /// Like [`build`](Self::build), then `<UNK_NAME>` and the `max_names`
    /// most frequent entries of `name_occurrences` when `max_names > 0`.
    pub fn build_with_names<'a, 'b, I, U, N>(
        corpus: I,
        max_words: usize,
        name_occurrences: N,
        max_names: usize,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = U>,
        U: IntoIterator<Item = &'a String>,
        N: IntoIterator<Item = &'b String>,
    {
        if max_words < 1 {
            return Err(Error::Config(
                "vocabulary needs room for at least one word".into(),
            ));
        }
        let words: Vec<&String> = corpus.into_iter().flatten().collect();
        if words.is_empty() {
            return Err(Error::Contract(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let reserved = |t: &str| RESERVED.contains(&t) || t == UNK_NAME;
        tokens.extend(
            by_frequency(words.iter().map(|s| s.as_str()))
                .into_iter()
                .filter(|t| !reserved(t))
                .take(max_words)
                .map(str::to_string),
        );
        if max_names > 0 {
            tokens.push(UNK_NAME.to_string());
            let names: Vec<&String> = name_occurrences.into_iter().collect();
            tokens.extend(
                by_frequency(names.iter().map(|s| s.as_str()))
                    .into_iter()
                    .filter(|t| !reserved(t) && !tokens.iter().any(|k| k == t))
                    .take(max_names)
                    .map(str::to_string)
                    .collect::<Vec<_>>(),
            );
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Ids of `tokens` (unknown ones become `<UNK>`) followed by `<EOS>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        let mut ids: Vec<u32> = tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID))
            .collect();
        ids.push(EOS_ID);
        ids
    }

    /// Tokens of `ids` up to the first `<EOS>`, with reserved and
    /// `<UNK_NAME>` tokens removed.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or_else(|| {
                Error::Vocabulary(format!("id {id} outside vocabulary of {}", self.len()))
            })?;
            if id == EOS_ID {
                break;
            }
            if RESERVED.contains(&tok) || tok == UNK_NAME {
                continue;
            }
            out.push(tok.to_string());
        }
        Ok(out)
    }

    /// Character name tokens, `<UNK_NAME>` included, in id order.
    pub fn name_tokens(&self) -> Vec<&str> {
        self.tokens
            .iter()
            .map(String::as_str)
            .filter(|t| is_name_token(t))
            .collect()
    }

    /// Appends new tokens; every one must be absent from the vocabulary.
    pub fn extend<S: AsRef<str>>(&mut self, added: &[S]) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for t in added {
            let t = t.as_ref();
            if self.contains(t) || !seen.insert(t) {
                return Err(Error::Vocabulary(format!(
                    "token {t:?} is already in the vocabulary"
                )));
            }
        }
        let mut tokens = self.tokens.clone();
        tokens.extend(added.iter().map(|t| t.as_ref().to_string()));
        *self = Self::from_tokens(tokens)?;
        Ok(())
    }

    /// One token per line; the id is the line number.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
