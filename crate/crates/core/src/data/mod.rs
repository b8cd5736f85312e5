//! Corpus parsing, vocabulary construction, pairing and batching.

pub mod batch;
pub mod cornell;
pub mod pairs;
pub mod preprocess;
pub mod shards;
pub mod synthetic;
pub mod text;
pub mod vocab;

pub use batch::{batch_by_tokens, Batch};
pub use cornell::CornellCorpus;
pub use pairs::{
    annotate_speakers, build_pairs, name_token, pair_opensubtitles, DialogExample, Persona,
    TextPair, Utterance,
};
pub use preprocess::{
    prepare_cornell, prepare_opensubtitles, DataDir, PreparedCorpus, PreprocessOptions, Split,
};
pub use text::{clean_text, normalize, tokenize};
pub use vocab::{is_name_token, Vocabulary, EOS, EOS_ID, PAD, PAD_ID, UNK, UNK_ID, UNK_NAME};
