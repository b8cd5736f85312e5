//! Fixtures shared by the benchmarks.

use colloquy::data::{
    prepare_cornell, synthetic, CornellCorpus, DialogExample, PreprocessOptions, Split, Vocabulary,
};
use colloquy::{Tensor, Transformer, TransformerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches data")
}

/// A randomly initialised model of the given width and depth.
pub fn model(d_model: usize, layers: usize, vocab: usize) -> Transformer {
    let config = TransformerConfig {
        d_model,
        num_heads: 2,
        num_layers: layers,
        d_ff: 2 * d_model,
        max_sequence_length: 32,
        ..TransformerConfig::tiny(vocab)
    };
    Transformer::initialize(config, &mut ChaCha8Rng::seed_from_u64(0)).expect("valid config")
}

/// Training examples from a synthetic Cornell-format corpus.
pub fn examples(conversations: usize) -> (Vocabulary, Vec<DialogExample>) {
    let s = synthetic::generate(conversations, 1);
    let corpus =
        CornellCorpus::parse(&s.movie_lines, &s.movie_conversations).expect("synthetic corpus");
    let options = PreprocessOptions {
        max_words: 5000,
        ..PreprocessOptions::default()
    };
    let p = prepare_cornell(&corpus, &options).expect("preprocessing");
    let ex = p.examples(Split::Train);
    (p.vocab, ex)
}
