use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DecodeMode, DecodeSettings, Hypothesis, SequenceModel};
use crate::data::EOS_ID;
use crate::error::{Error, Result};

fn step_limit<M: SequenceModel>(model: &M, settings: &DecodeSettings) -> usize {
    match model.max_target_len() {
        Some(cap) => settings.max_len.min(cap),
        None => settings.max_len,
    }
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn extend<M: SequenceModel>(
    model: &M,
    source: &[u32],
    settings: &DecodeSettings,
    mut pick: impl FnMut(&[f64]) -> usize,
) -> Result<Hypothesis> {
    let enc = model.encode_source(source)?;
    let mut h = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    };
    for _ in 0..step_limit(model, settings) {
        let lp = model
            .next_log_probs(&enc, std::slice::from_ref(&h.tokens))?
            .remove(0);
        let w = pick(&lp);
        h.score += lp[w];
        h.tokens.push(w as u32);
        if w as u32 == EOS_ID {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Appends the most probable token until `<EOS>` or the length limit.
pub fn greedy_decode<M: SequenceModel>(
    model: &M,
    source: &[u32],
    settings: &DecodeSettings,
) -> Result<Hypothesis> {
    settings.validate()?;
    extend(model, source, settings, argmax)
}

/// Draws each token from the model distribution with a generator seeded
/// by `settings.seed`.
pub fn sample_decode<M: SequenceModel>(
    model: &M,
    source: &[u32],
    settings: &DecodeSettings,
) -> Result<Hypothesis> {
    settings.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    extend(model, source, settings, |lp| roulette(lp, &mut rng))
}

/// Roulette-wheel selection over `exp(log_probs)`.
pub(crate) fn roulette<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
    let total: f64 = probs.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    // Rounding left a sliver past the last bucket.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Left-to-right beam search. Hypotheses that emit `<EOS>` move to a result
/// pool and free their slot, so every step extends `beam_width` live
/// prefixes. Returns the pool plus any live hypotheses left at the length
/// limit, best first.
pub fn beam_search<M: SequenceModel>(
    model: &M,
    source: &[u32],
    settings: &DecodeSettings,
) -> Result<Vec<Hypothesis>> {
    settings.validate()?;
    let k = settings.beam_width;
    let norm = settings.length_normalize;
    let enc = model.encode_source(source)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for _ in 0..step_limit(model, settings) {
        let prefixes: Vec<Vec<u32>> = live.iter().map(|h| h.tokens.clone()).collect();
        let lps = model.next_log_probs(&enc, &prefixes)?;
        let mut candidates: Vec<(f64, usize, usize)> =
            Vec::with_capacity(live.len() * model.vocab_size());
        for (parent, lp) in lps.iter().enumerate() {
            for (w, &l) in lp.iter().enumerate() {
                let score = live[parent].score + l;
                if score > f64::NEG_INFINITY {
                    candidates.push((score, parent, w));
                }
            }
        }
        let rank = |&(s, p, w): &(f64, usize, usize)| {
            let len = live[p].tokens.len() + 1;
            (if norm { s / len as f64 } else { s }, p, w)
        };
        candidates.sort_by(|a, b| {
            let (sa, pa, wa) = rank(a);
            let (sb, pb, wb) = rank(b);
            sb.partial_cmp(&sa)
                .unwrap_or(Ordering::Equal)
                .then(wa.cmp(&wb))
                .then(pa.cmp(&pb))
        });
        let mut next = Vec::with_capacity(k);
        for (score, parent, w) in candidates {
            if next.len() == k {
                break;
            }
            let mut tokens = live[parent].tokens.clone();
            tokens.push(w as u32);
            let finished = w as u32 == EOS_ID;
            let h = Hypothesis {
                tokens,
                score,
                finished,
            };
            if finished {
                pool.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        // Log-probabilities only fall, so no live prefix can overtake.
        if !norm {
            let best_pool = pool
                .iter()
                .map(|h| h.score)
                .fold(f64::NEG_INFINITY, f64::max);
            let best_live = live
                .iter()
                .map(|h| h.score)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_pool >= best_live {
                break;
            }
        }
    }
    pool.extend(live);
    pool.sort_by(|a, b| {
        b.rank_score(norm)
            .partial_cmp(&a.rank_score(norm))
            .unwrap_or(Ordering::Equal)
            .then(b.finished.cmp(&a.finished))
            .then(a.tokens.cmp(&b.tokens))
    });
    Ok(pool)
}

/// Runs the decoder selected by `settings.mode`; beam search returns its
/// top hypothesis.
pub fn decode<M: SequenceModel>(
    model: &M,
    source: &[u32],
    settings: &DecodeSettings,
) -> Result<Hypothesis> {
    match settings.mode {
        DecodeMode::Greedy => greedy_decode(model, source, settings),
        DecodeMode::Sample => sample_decode(model, source, settings),
        DecodeMode::Beam => beam_search(model, source, settings)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Contract("beam search produced no hypotheses".into())),
    }
}

/// A candidate with its forward, backward and mixed scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reranked {
    pub hypothesis: Hypothesis,
    pub forward: f64,
    pub backward: f64,
    pub combined: f64,
}

fn mix(lambda: f64, forward: f64, backward: f64) -> f64 {
    if lambda == 0.0 {
        forward
    } else if lambda == 1.0 {
        backward
    } else {
        (1.0 - lambda) * forward + lambda * backward
    }
}

fn with_eos(tokens: &[u32]) -> Vec<u32> {
    let mut t = tokens.to_vec();
    if t.last() != Some(&EOS_ID) {
        t.push(EOS_ID);
    }
    t
}

/// Rescores candidates by `(1 - lambda) log p(T|S) + lambda log p(S|T)`,
/// where the backward model was trained on swapped pairs, and sorts them
/// by the mixed score. The sort is stable.
pub fn mmi_rerank<F: SequenceModel, B: SequenceModel>(
    forward: &F,
    backward: &B,
    source: &[u32],
    candidates: &[Hypothesis],
    lambda: f64,
) -> Result<Vec<Reranked>> {
    if forward.vocab_size() != backward.vocab_size() {
        return Err(Error::Config(format!(
            "forward vocabulary of {} and backward vocabulary of {} differ",
            forward.vocab_size(),
            backward.vocab_size()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("MMI weight {lambda} outside [0, 1]")));
    }
    if candidates.is_empty() {
        return Err(Error::Contract("nothing to rerank".into()));
    }
    let mut out = candidates
        .iter()
        .map(|h| {
            let f = forward.score(source, &h.tokens)?;
            let b = backward.score(&with_eos(&h.tokens), source)?;
            Ok(Reranked {
                hypothesis: h.clone(),
                forward: f,
                backward: b,
                combined: mix(lambda, f, b),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| {
        b.combined
            .partial_cmp(&a.combined)
            .unwrap_or(Ordering::Equal)
    });
    Ok(out)
}
