//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;
use std::path::PathBuf;

use colloquy::data::{
    prepare_cornell, synthetic, CornellCorpus, DialogExample, PreprocessOptions, TextPair,
    Vocabulary,
};
use colloquy::training::{TrainSettings, Trainer};
use colloquy::{Transformer, TransformerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> colloquy::Tensor {
    let n = shape.iter().product();
    colloquy::Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Synthetic Cornell-format corpus run through the real pipeline.
pub fn synthetic_pairs(
    conversations: usize,
    seed: u64,
    speakers: bool,
) -> (Vec<TextPair>, Vec<TextPair>) {
    let s = synthetic::generate(conversations, seed);
    let corpus = CornellCorpus::parse(&s.movie_lines, &s.movie_conversations).unwrap();
    let opts = PreprocessOptions {
        speakers,
        max_words: 5000,
        ..PreprocessOptions::default()
    };
    let p = prepare_cornell(&corpus, &opts).unwrap();
    (p.train, p.valid)
}

/// Pairs with pairwise distinct sources, so a memorizing model has one
/// right answer per source.
pub fn distinct_source_pairs(pairs: &[TextPair], n: usize) -> Vec<TextPair> {
    let mut seen = HashSet::new();
    pairs
        .iter()
        .filter(|p| seen.insert(p.source_tokens()))
        .take(n)
        .cloned()
        .collect()
}

pub fn vocab_for(pairs: &[TextPair]) -> Vocabulary {
    let utterances: Vec<Vec<String>> = pairs
        .iter()
        .flat_map(|p| [p.source_tokens(), p.target.clone()])
        .collect();
    Vocabulary::build(&utterances, 100_000).unwrap()
}

pub fn encode(pairs: &[TextPair], vocab: &Vocabulary) -> Vec<DialogExample> {
    pairs
        .iter()
        .map(|p| DialogExample::from_pair(p, vocab))
        .collect()
}

pub fn tiny_config(vocab: usize) -> TransformerConfig {
    TransformerConfig {
        d_model: 64,
        num_heads: 2,
        num_layers: 2,
        d_ff: 128,
        max_sequence_length: 32,
        ..TransformerConfig::tiny(vocab)
    }
}

pub fn trainer(config: TransformerConfig, vocab: Vocabulary, settings: TrainSettings) -> Trainer {
    let model =
        Transformer::initialize(config, &mut ChaCha8Rng::seed_from_u64(settings.seed)).unwrap();
    Trainer::new(model, vocab, settings).unwrap()
}

/// Clipped n-gram matches and hypothesis n-gram totals by direct scanning.
pub fn brute_force_ngram_counts(hyp: &[String], reference: &[String], n: usize) -> (usize, usize) {
    if hyp.len() < n {
        return (0, 0);
    }
    let grams = |s: &[String]| -> Vec<Vec<String>> {
        if s.len() < n {
            return Vec::new();
        }
        (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
    };
    let h = grams(hyp);
    let r = grams(reference);
    let mut distinct: Vec<Vec<String>> = Vec::new();
    for g in &h {
        if !distinct.contains(g) {
            distinct.push(g.clone());
        }
    }
    let mut matches = 0;
    for g in &distinct {
        let in_h = h.iter().filter(|x| *x == g).count();
        let in_r = r.iter().filter(|x| *x == g).count();
        matches += in_h.min(in_r);
    }
    (matches, h.len())
}

/// Full-matrix Levenshtein distance.
pub fn dp_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}
