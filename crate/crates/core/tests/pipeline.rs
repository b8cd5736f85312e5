mod common;

use colloquy::data::{
    prepare_cornell, CornellCorpus, DataDir, PreprocessOptions, Split, Vocabulary,
};
use common::fixture;

fn prepared(speakers: bool) -> colloquy::data::PreparedCorpus {
    let corpus = CornellCorpus::load(&fixture("cornell100")).unwrap();
    prepare_cornell(
        &corpus,
        &PreprocessOptions {
            speakers,
            ..PreprocessOptions::default()
        },
    )
    .unwrap()
}

#[test]
fn written_directory_loads_back_as_the_same_examples() {
    for speakers in [false, true] {
        let p = prepared(speakers);
        let dir = tempfile::tempdir().unwrap();
        p.write(dir.path()).unwrap();
        let d = DataDir::load(dir.path()).unwrap();
        assert_eq!(d.vocab, p.vocab);
        assert_eq!(d.train, p.examples(Split::Train));
        assert_eq!(d.valid, p.examples(Split::Valid));
        assert!(d.train.iter().all(|e| e.persona == speakers));
    }
}

#[test]
fn golden_directories_load_and_reencode_consistently() {
    for name in ["golden_plain", "golden_speakers"] {
        let dir = fixture(name);
        let d = DataDir::load(&dir).unwrap();
        let again = DataDir::reencode(&dir, d.vocab.clone()).unwrap();
        assert_eq!(again.train, d.train, "{name}");
        assert_eq!(again.valid, d.valid, "{name}");
    }
}

#[test]
fn reencoding_with_an_extended_vocabulary_keeps_ids() {
    let dir = fixture("golden_speakers");
    let d = DataDir::load(&dir).unwrap();
    let mut bigger = Vocabulary::load(&dir.join("vocab.txt")).unwrap();
    bigger.extend(&["ZED_m42"]).unwrap();
    let e = DataDir::reencode(&dir, bigger).unwrap();
    assert_eq!(e.train, d.train);
    assert_eq!(e.vocab.len(), d.vocab.len() + 1);
}

#[test]
fn speaker_annotation_only_adds_name_tokens() {
    // The splits differ (speaker runs stratify by movie), so compare
    // against every word of the plain run.
    let (plain, named) = (prepared(false), prepared(true));
    let words: std::collections::HashSet<&String> = plain
        .train
        .iter()
        .chain(&plain.valid)
        .flat_map(|p| p.source.iter().chain(&p.target))
        .chain(plain.vocab.tokens())
        .collect();
    for t in named.vocab.tokens() {
        assert!(
            words.contains(t) || colloquy::data::is_name_token(t),
            "{t} appears only with speakers"
        );
    }
    let names = named.vocab.name_tokens();
    assert!(names.contains(&"MRS._ROBINSON_m9"), "{names:?}");
}
