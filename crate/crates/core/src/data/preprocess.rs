//! End-to-end corpus preparation: split, vocabulary, speaker annotation and
//! the on-disk artifacts consumed by training.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cornell::CornellCorpus;
use super::pairs::{annotate_speakers, build_pairs, DialogExample, TextPair, Utterance};
use super::shards::write_shard;
use super::vocab::{is_name_token, Vocabulary};
use crate::error::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    /// Annotate sources with speaker and addressee tokens.
    pub speakers: bool,
    pub max_words: usize,
    /// Name tokens kept when `speakers` is set.
    pub max_names: usize,
    pub seed: u64,
    /// Share of conversations (Cornell) or lines (subtitles) held out.
    pub valid_fraction: f64,
    /// Subtitle line counts; override `valid_fraction` when given.
    pub train_lines: Option<usize>,
    pub valid_lines: Option<usize>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            speakers: false,
            max_words: 32765,
            max_names: 8000,
            seed: 0,
            valid_fraction: 1.0 / 11.0,
            train_lines: None,
            valid_lines: None,
        }
    }
}

impl PreprocessOptions {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {} outside [0, 1)",
                self.valid_fraction
            )));
        }
        if self.max_words < 1 {
            return Err(Error::Config(
                "vocabulary needs room for at least one word".into(),
            ));
        }
        Ok(())
    }
}

/// Counts of everything filtered or transformed along the way.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub conversations: usize,
    pub short_conversations_skipped: usize,
    pub empty_utterances_dropped: usize,
    pub pairs_dropped_for_empty_side: usize,
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub unannotated_pairs: usize,
    pub unknown_name_tokens: usize,
    pub vocab_size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub corpus: String,
    pub options: PreprocessOptions,
    pub report: PreprocessReport,
    /// Cornell: indices of held-out conversations, in input order.
    /// Subtitles: the held-out line range.
    pub validation: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    pub vocab: Vocabulary,
    pub train: Vec<TextPair>,
    pub valid: Vec<TextPair>,
    pub manifest: Manifest,
}

fn utterance_tokens<'a>(convs: impl Iterator<Item = &'a Vec<Utterance>>) -> Vec<&'a Vec<String>> {
    convs
        .flatten()
        .map(|u| &u.tokens)
        .filter(|t| !t.is_empty())
        .collect()
}

fn pair_stats(convs: &[Vec<Utterance>], report: &mut PreprocessReport) {
    for c in convs {
        report.empty_utterances_dropped += c.iter().filter(|u| u.tokens.is_empty()).count();
        if c.len() < 2 {
            report.short_conversations_skipped += 1;
        } else {
            report.pairs_dropped_for_empty_side += c.len() - 1 - build_pairs(c).len();
        }
    }
}

/// Builds the vocabulary from the training side, then annotates both
/// splits when speakers are requested.
fn finish(
    corpus: &str,
    options: &PreprocessOptions,
    train_convs: &[&Vec<Utterance>],
    mut train: Vec<TextPair>,
    mut valid: Vec<TextPair>,
    mut report: PreprocessReport,
    validation: Vec<usize>,
) -> Result<PreparedCorpus> {
    let words = utterance_tokens(train_convs.iter().copied());
    let vocab = if options.speakers {
        let names: Vec<&String> = train
            .iter()
            .flat_map(|p| [&p.source_speaker, &p.target_speaker])
            .flatten()
            .collect();
        Vocabulary::build_with_names(words, options.max_words, names, options.max_names.max(1))?
    } else {
        Vocabulary::build(words, options.max_words)?
    };
    if options.speakers {
        for split in [&mut train, &mut valid] {
            for pair in split.iter_mut() {
                let (annotated, ok) = annotate_speakers(
                    pair,
                    pair.source_speaker.as_deref(),
                    pair.target_speaker.as_deref(),
                    &vocab,
                );
                if !ok {
                    report.unannotated_pairs += 1;
                }
                if let Some(p) = &annotated.persona {
                    report.unknown_name_tokens += [&p.speaker, &p.addressee]
                        .iter()
                        .filter(|t| t.as_str() == super::vocab::UNK_NAME)
                        .count();
                }
                *pair = annotated;
            }
        }
    }
    report.train_pairs = train.len();
    report.valid_pairs = valid.len();
    report.vocab_size = vocab.len();
    let manifest = Manifest {
        corpus: corpus.into(),
        options: options.clone(),
        report,
        validation,
    };
    Ok(PreparedCorpus {
        vocab,
        train,
        valid,
        manifest,
    })
}

/// Splits by conversation: globally for the plain setup, within each movie
/// for the speaker setup.
pub fn prepare_cornell(
    corpus: &CornellCorpus,
    options: &PreprocessOptions,
) -> Result<PreparedCorpus> {
    options.validate()?;
    let convs: Vec<Vec<Utterance>> = (0..corpus.conversations.len())
        .map(|i| corpus.utterances(i))
        .collect::<Result<_>>()?;
    let mut report = PreprocessReport {
        conversations: convs.len(),
        ..Default::default()
    };
    pair_stats(&convs, &mut report);

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut held_out = vec![false; convs.len()];
    let groups: Vec<Vec<usize>> = if options.speakers {
        let mut by_movie: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, c) in corpus.conversations.iter().enumerate() {
            by_movie.entry(c.movie_id.as_str()).or_default().push(i);
        }
        by_movie.into_values().collect()
    } else {
        vec![(0..convs.len()).collect()]
    };
    for mut group in groups {
        group.shuffle(&mut rng);
        let n = (group.len() as f64 * options.valid_fraction).round() as usize;
        for &i in &group[..n] {
            held_out[i] = true;
        }
    }

    let (mut train, mut valid, mut train_convs) = (Vec::new(), Vec::new(), Vec::new());
    for (i, c) in convs.iter().enumerate() {
        if held_out[i] {
            valid.extend(build_pairs(c));
        } else {
            train.extend(build_pairs(c));
            train_convs.push(c);
        }
    }
    let validation = (0..convs.len()).filter(|&i| held_out[i]).collect();
    finish(
        "cornell",
        options,
        &train_convs,
        train,
        valid,
        report,
        validation,
    )
}

/// Splits the line stream into a leading training block and the following
/// validation block, then pairs consecutive lines within each block.
pub fn prepare_opensubtitles<S: AsRef<str>>(
    lines: &[S],
    options: &PreprocessOptions,
) -> Result<PreparedCorpus> {
    options.validate()?;
    let n = lines.len();
    let (train_n, valid_n) = match (options.train_lines, options.valid_lines) {
        (Some(t), Some(v)) => (t, v),
        (Some(t), None) => (t, n.saturating_sub(t)),
        (None, Some(v)) => (n.saturating_sub(v), v),
        (None, None) => {
            let v = (n as f64 * options.valid_fraction).round() as usize;
            (n - v, v)
        }
    };
    if train_n + valid_n > n {
        return Err(Error::Config(format!(
            "{train_n} training and {valid_n} validation lines requested from {n}"
        )));
    }
    let utter = |r: std::ops::Range<usize>| {
        lines[r]
            .iter()
            .map(|l| Utterance::new(l.as_ref()))
            .collect::<Vec<_>>()
    };
    let blocks = [utter(0..train_n), utter(train_n..train_n + valid_n)];
    let mut report = PreprocessReport {
        conversations: 2,
        ..Default::default()
    };
    pair_stats(&blocks, &mut report);
    let train = build_pairs(&blocks[0]);
    let valid = build_pairs(&blocks[1]);
    let validation = vec![train_n, train_n + valid_n];
    let options = PreprocessOptions {
        speakers: false,
        ..options.clone()
    };
    finish(
        "opensubtitles",
        &options,
        &[&blocks[0]],
        train,
        valid,
        report,
        validation,
    )
}

fn join_lines<'a>(rows: impl Iterator<Item = Vec<String>> + 'a) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&r.join(" "));
        out.push('\n');
    }
    out
}

impl PreparedCorpus {
    pub fn examples(&self, split: Split) -> Vec<DialogExample> {
        let pairs = match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
        };
        pairs
            .iter()
            .map(|p| DialogExample::from_pair(p, &self.vocab))
            .collect()
    }

    /// Writes `{train,valid}.{src,tgt}` token files, `{train,valid}.ids`
    /// shards, the vocabulary and the manifest into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, pairs, split) in [
            ("train", &self.train, Split::Train),
            ("valid", &self.valid, Split::Valid),
        ] {
            fs::write(
                dir.join(format!("{name}.src")),
                join_lines(pairs.iter().map(TextPair::source_tokens)),
            )?;
            fs::write(
                dir.join(format!("{name}.tgt")),
                join_lines(pairs.iter().map(|p| p.target.clone())),
            )?;
            write_shard(&dir.join(format!("{name}.ids")), &self.examples(split))?;
        }
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let manifest = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

/// A preprocessed data directory as read back by training and evaluation.
#[derive(Clone, Debug)]
pub struct DataDir {
    pub vocab: Vocabulary,
    pub train: Vec<DialogExample>,
    pub valid: Vec<DialogExample>,
}

impl DataDir {
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let train = super::shards::read_shard(&dir.join("train.ids"))?;
        let valid = super::shards::read_shard(&dir.join("valid.ids"))?;
        for e in train.iter().chain(&valid) {
            e.check(vocab.len())?;
        }
        Ok(Self {
            vocab,
            train,
            valid,
        })
    }

    /// Re-encodes the token files of `dir` with another vocabulary, such as
    /// one extended with name tokens for finetuning.
    pub fn reencode(dir: &Path, vocab: Vocabulary) -> Result<Self> {
        let split = |name: &str| -> Result<Vec<DialogExample>> {
            let read = |ext: &str| {
                let path = dir.join(format!("{name}.{ext}"));
                fs::read_to_string(&path)
                    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
            };
            let (src, tgt) = (read("src")?, read("tgt")?);
            if src.lines().count() != tgt.lines().count() {
                return Err(Error::Format(format!(
                    "{name}.src and {name}.tgt differ in line count"
                )));
            }
            Ok(src
                .lines()
                .zip(tgt.lines())
                .map(|(s, t)| {
                    let s: Vec<&str> = s.split_whitespace().collect();
                    let t: Vec<&str> = t.split_whitespace().collect();
                    let persona =
                        s.len() >= 2 && is_name_token(s[0]) && is_name_token(s[s.len() - 1]);
                    DialogExample {
                        source: vocab.encode(&s),
                        target: vocab.encode(&t),
                        persona,
                    }
                })
                .collect())
        };
        let (train, valid) = (split("train")?, split("valid")?);
        Ok(Self {
            vocab,
            train,
            valid,
        })
    }
}
