//! Perplexity, corpus BLEU-4 and word error rate.

use std::collections::HashMap;
use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::data::{DialogExample, Vocabulary};
use crate::decoding::{decode, DecodeSettings, SequenceModel};
use crate::error::{Error, Result};

/// Perplexity from a mean per-token loss in nats, written as
/// `2^(loss / ln 2)`.
pub fn perplexity_from_loss(mean_nats: f64) -> f64 {
    2f64.powf(mean_nats / LN_2)
}

/// `2^(-(1/N) sum log2 p)` over per-token natural-log probabilities.
/// A zero-probability token gives `+inf`.
pub fn perplexity_from_log_probs(log_probs: &[f64]) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::Contract("perplexity of zero tokens".into()));
    }
    let mean_log2 = log_probs.iter().map(|l| l / LN_2).sum::<f64>() / log_probs.len() as f64;
    Ok(2f64.powf(-mean_log2))
}

/// Teacher-forced perplexity of `model` on the target side of `examples`.
pub fn perplexity<M: SequenceModel>(model: &M, examples: &[DialogExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for ex in examples {
        total += model.score(&ex.source, &ex.target)?;
        n += ex.target.len();
    }
    if n == 0 {
        return Err(Error::Contract("perplexity of zero tokens".into()));
    }
    Ok(2f64.powf(-(total / LN_2) / n as f64))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Sufficient statistics for corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hypothesis_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn add(&mut self, hypothesis: &[String], reference: &[String]) {
        for n in 1..=4 {
            let refs = ngram_counts(reference, n);
            for (g, c) in ngram_counts(hypothesis, n) {
                self.matches[n - 1] += c.min(refs.get(g).copied().unwrap_or(0));
            }
            self.totals[n - 1] += hypothesis.len().saturating_sub(n - 1);
        }
        self.hypothesis_len += hypothesis.len();
        self.reference_len += reference.len();
    }

    /// Geometric mean of modified precisions times the brevity penalty.
    /// Precisions for `n >= 2` are add-one smoothed.
    pub fn score(&self) -> f64 {
        if self.hypothesis_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_p = (self.matches[0] as f64 / self.totals[0] as f64).ln();
        for n in 1..4 {
            log_p += ((self.matches[n] + 1) as f64 / (self.totals[n] + 1) as f64).ln();
        }
        let (c, r) = (self.hypothesis_len as f64, self.reference_len as f64);
        let bp = if c > r { 0.0 } else { 1.0 - r / c };
        (bp + log_p / 4.0).exp()
    }
}

/// Corpus-level BLEU-4 in `[0, 1]`, one reference per hypothesis.
pub fn corpus_bleu<S: AsRef<[String]>>(hypotheses: &[S], references: &[S]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add(h.as_ref(), r.as_ref());
    }
    Ok(stats.score())
}

/// Levenshtein distance over tokens.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `(S + D + I) / N` against a non-empty reference.
pub fn word_error_rate<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract(
            "word error rate needs a non-empty reference".into(),
        ));
    }
    Ok(edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

/// Corpus WER: total edits over total reference words.
pub fn corpus_wer<S: AsRef<[String]>>(hypotheses: &[S], references: &[S]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(
            "hypothesis and reference counts differ".into(),
        ));
    }
    let edits: usize = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| edit_distance(h.as_ref(), r.as_ref()))
        .sum();
    let words: usize = references.iter().map(|r| r.as_ref().len()).sum();
    if words == 0 {
        return Err(Error::Contract(
            "word error rate needs a non-empty reference".into(),
        ));
    }
    Ok(edits as f64 / words as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub target_tokens: usize,
    /// `None` when some target token had zero probability.
    pub perplexity: Option<f64>,
    pub bleu: f64,
    pub bleu_percent: f64,
    pub wer: f64,
    pub decoding: DecodeSettings,
}

/// One decoded response next to its reference.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub source: String,
    pub reference: String,
    pub hypothesis: String,
}

/// Perplexity by teacher forcing, then BLEU and WER of decoded responses
/// against the references. Specials are stripped before comparison.
pub fn evaluate<M: SequenceModel>(
    model: &M,
    vocab: &Vocabulary,
    examples: &[DialogExample],
    settings: &DecodeSettings,
) -> Result<(EvalReport, Vec<Sample>)> {
    if examples.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let ppl = perplexity(model, examples)?;
    let mut hyps = Vec::with_capacity(examples.len());
    let mut refs = Vec::with_capacity(examples.len());
    let mut samples = Vec::with_capacity(examples.len());
    for ex in examples {
        let h = decode(model, &ex.source, settings)?;
        let hyp = vocab.decode(&h.tokens)?;
        let reference = vocab.decode(&ex.target)?;
        samples.push(Sample {
            source: vocab.decode(&ex.source)?.join(" "),
            reference: reference.join(" "),
            hypothesis: hyp.join(" "),
        });
        hyps.push(hyp);
        refs.push(reference);
    }
    let bleu = corpus_bleu(&hyps, &refs)?;
    // Responses whose reference strips to nothing carry no words to score.
    let scored: Vec<usize> = (0..refs.len()).filter(|&i| !refs[i].is_empty()).collect();
    let wer = corpus_wer(
        &scored.iter().map(|&i| hyps[i].clone()).collect::<Vec<_>>(),
        &scored.iter().map(|&i| refs[i].clone()).collect::<Vec<_>>(),
    )?;
    let report = EvalReport {
        examples: examples.len(),
        target_tokens: examples.iter().map(|e| e.target.len()).sum(),
        perplexity: ppl.is_finite().then_some(ppl),
        bleu,
        bleu_percent: bleu * 100.0,
        wer,
        decoding: settings.clone(),
    };
    Ok((report, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::toy::TableModel;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn perplexity_examples() {
        assert!((perplexity_from_loss(0.0) - 1.0).abs() < 1e-12);
        assert!((perplexity_from_loss(10f64.ln()) - 10.0).abs() < 1e-9);
        let uniform = vec![-(7f64).ln(); 5];
        assert!((perplexity_from_log_probs(&uniform).unwrap() - 7.0).abs() < 1e-9);
        assert_eq!(
            perplexity_from_log_probs(&[-1.0, f64::NEG_INFINITY]).unwrap(),
            f64::INFINITY
        );
        assert!(perplexity_from_log_probs(&[]).is_err());
    }

    #[test]
    fn model_perplexity_of_a_uniform_table_is_the_vocabulary_size() {
        let m = TableModel::new(6);
        let ex = vec![DialogExample {
            source: vec![3, 1],
            target: vec![4, 5, 1],
            persona: false,
        }];
        assert!((perplexity(&m, &ex).unwrap() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_examples() {
        let r = toks("the cat sat on the mat today");
        assert!(
            (corpus_bleu(std::slice::from_ref(&r), std::slice::from_ref(&r)).unwrap() - 1.0).abs()
                < 1e-12
        );
        assert_eq!(
            corpus_bleu(&[toks("dog runs fast")], std::slice::from_ref(&r)).unwrap(),
            0.0
        );
        assert_eq!(
            corpus_bleu(&[Vec::new()], std::slice::from_ref(&r)).unwrap(),
            0.0
        );
        assert!(corpus_bleu(std::slice::from_ref(&r), &[]).is_err());
    }

    /// Hand-computed: hypothesis "the cat sat" against "the cat sat on the mat".
    #[test]
    fn bleu_hand_computed_with_brevity_penalty() {
        let b = corpus_bleu(&[toks("the cat sat")], &[toks("the cat sat on the mat")]).unwrap();
        // p1 = 3/3, p2 = (2+1)/(2+1), p3 = (1+1)/(1+1), p4 = (0+1)/(0+1); BP = e^(1-2).
        assert!((b - (-1f64).exp()).abs() < 1e-12, "{b}");
        let b = corpus_bleu(&[toks("a b c d e")], &[toks("a b x d e")]).unwrap();
        let expected =
            ((4.0f64 / 5.0).ln() + (3.0f64 / 5.0).ln() + (1.0f64 / 4.0).ln() + (1.0f64 / 3.0).ln())
                / 4.0;
        assert!((b - expected.exp()).abs() < 1e-12);
    }

    #[test]
    fn clipped_counts() {
        let mut s = BleuStats::default();
        s.add(&toks("the the the the"), &toks("the cat the"));
        assert_eq!(s.matches[0], 2);
        assert_eq!(s.totals, [4, 3, 2, 1]);
    }

    #[test]
    fn wer_examples() {
        let r = toks("a b c d");
        assert_eq!(word_error_rate(&r, &r).unwrap(), 0.0);
        assert_eq!(word_error_rate(&toks("a x c"), &r).unwrap(), 0.5);
        assert_eq!(word_error_rate(&toks(""), &r).unwrap(), 1.0);
        assert_eq!(word_error_rate(&toks("a b c d e f"), &r).unwrap(), 0.5);
        assert!(matches!(word_error_rate(&r, &[]), Err(Error::Contract(_))));
    }

    fn naive_distance(a: &[u8], b: &[u8]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = naive_distance(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
        sub.min(naive_distance(&a[1..], b) + 1)
            .min(naive_distance(a, &b[1..]) + 1)
    }

    proptest! {
        #[test]
        fn edit_distance_matches_recursion(a in prop::collection::vec(0u8..3, 0..7), b in prop::collection::vec(0u8..3, 0..7)) {
            prop_assert_eq!(edit_distance(&a, &b), naive_distance(&a, &b));
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        }

        #[test]
        fn bleu_is_bounded(h in prop::collection::vec(0u8..5, 0..12), r in prop::collection::vec(0u8..5, 1..12)) {
            let s = |v: &Vec<u8>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
            let b = corpus_bleu(&[s(&h)], &[s(&r)]).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
        }
    }
}
