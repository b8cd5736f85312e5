//! Standalone attention scoring functions and the weighted-sum context
//! vector, in plain form and as differentiable graph operations.
//!
//! | variant | score                    |
//! |---------|--------------------------|
//! | MLP     | `w2ᵀ tanh(W1 [q; k])`    |
//! | BL      | `qᵀ W k`                 |
//! | DP      | `qᵀ k`                   |
//! | SDP     | `qᵀ k / sqrt(|k|)`       |

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoringVariant {
    Mlp,
    Bilinear,
    Dot,
    ScaledDot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScoringParams {
    /// `w1` is `[hidden, |q| + |k| (+ |history|)]`, `w2` is `[hidden]`.
    Mlp {
        w1: Tensor,
        w2: Tensor,
    },
    /// `w` is `[|q|, |k|]`.
    Bilinear {
        w: Tensor,
    },
    Dot,
    ScaledDot,
}

impl ScoringParams {
    pub fn variant(&self) -> ScoringVariant {
        match self {
            Self::Mlp { .. } => ScoringVariant::Mlp,
            Self::Bilinear { .. } => ScoringVariant::Bilinear,
            Self::Dot => ScoringVariant::Dot,
            Self::ScaledDot => ScoringVariant::ScaledDot,
        }
    }

    /// Uniform `±sqrt(6 / (fan_in + fan_out))` parameters. `history_dim`
    /// widens the MLP input and is rejected by the other variants.
    pub fn initialize<R: Rng + ?Sized>(
        variant: ScoringVariant,
        q_dim: usize,
        k_dim: usize,
        hidden: usize,
        history_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut uniform = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            Tensor::new(vec![rows, cols], data)
        };
        if history_dim > 0 && variant != ScoringVariant::Mlp {
            return Err(Error::Config(
                "only the MLP scorer takes a history input".into(),
            ));
        }
        Ok(match variant {
            ScoringVariant::Mlp => {
                let w1 = uniform(hidden, q_dim + k_dim + history_dim)?;
                let w2 = uniform(hidden, 1)?.reshape(vec![hidden])?;
                Self::Mlp { w1, w2 }
            }
            ScoringVariant::Bilinear => Self::Bilinear {
                w: uniform(q_dim, k_dim)?,
            },
            ScoringVariant::Dot => Self::Dot,
            ScoringVariant::ScaledDot => Self::ScaledDot,
        })
    }

    pub fn is_parameter_free(&self) -> bool {
        matches!(self, Self::Dot | Self::ScaledDot)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn same_len(q: &[f64], k: &[f64]) -> Result<()> {
    if q.len() != k.len() {
        return Err(Error::Shape(format!(
            "query of size {} against key of size {}",
            q.len(),
            k.len()
        )));
    }
    Ok(())
}

pub fn score(q: &[f64], k: &[f64], params: &ScoringParams) -> Result<f64> {
    score_with_history(q, k, None, params)
}

/// Score with an optional decoder-history vector appended to the MLP input.
pub fn score_with_history(
    q: &[f64],
    k: &[f64],
    history: Option<&[f64]>,
    params: &ScoringParams,
) -> Result<f64> {
    if history.is_some() && !matches!(params, ScoringParams::Mlp { .. }) {
        return Err(Error::Config(
            "only the MLP scorer takes a history input".into(),
        ));
    }
    match params {
        ScoringParams::Dot => {
            same_len(q, k)?;
            Ok(dot(q, k))
        }
        ScoringParams::ScaledDot => {
            same_len(q, k)?;
            Ok(dot(q, k) / (k.len() as f64).sqrt())
        }
        ScoringParams::Bilinear { w } => {
            let (r, c) = w.dims2()?;
            if r != q.len() || c != k.len() {
                return Err(Error::Shape(format!(
                    "bilinear weight {r}x{c} for |q|={} |k|={}",
                    q.len(),
                    k.len()
                )));
            }
            Ok((0..r).map(|i| q[i] * dot(w.row(i), k)).sum())
        }
        ScoringParams::Mlp { w1, w2 } => {
            let x: Vec<f64> = q
                .iter()
                .chain(k)
                .chain(history.unwrap_or(&[]))
                .copied()
                .collect();
            let (hidden, width) = w1.dims2()?;
            if width != x.len() || w2.numel() != hidden {
                return Err(Error::Shape(format!(
                    "MLP weights {:?}, {:?} for an input of size {}",
                    w1.shape(),
                    w2.shape(),
                    x.len()
                )));
            }
            Ok((0..hidden)
                .map(|h| w2.data()[h] * dot(w1.row(h), &x).tanh())
                .sum())
        }
    }
}

/// Max-stabilised softmax of a score vector.
pub fn weights_from_scores(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// Softmax over the scores of `query` against every key.
pub fn attention_weights<K: AsRef<[f64]>>(
    query: &[f64],
    keys: &[K],
    params: &ScoringParams,
) -> Result<Vec<f64>> {
    attention_weights_with_history(query, keys, None, params)
}

pub fn attention_weights_with_history<K: AsRef<[f64]>>(
    query: &[f64],
    keys: &[K],
    history: Option<&[f64]>,
    params: &ScoringParams,
) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::Contract("attention over an empty key set".into()));
    }
    let scores = keys
        .iter()
        .map(|k| score_with_history(query, k.as_ref(), history, params))
        .collect::<Result<Vec<_>>>()?;
    Ok(weights_from_scores(&scores))
}

/// `sum_j weights[j] * values[j]`.
pub fn context_vector<V: AsRef<[f64]>>(weights: &[f64], values: &[V]) -> Result<Vec<f64>> {
    if weights.len() != values.len() || values.is_empty() {
        return Err(Error::Shape(format!(
            "{} weights for {} values",
            weights.len(),
            values.len()
        )));
    }
    let width = values[0].as_ref().len();
    let mut out = vec![0.0; width];
    for (a, v) in weights.iter().zip(values) {
        let v = v.as_ref();
        if v.len() != width {
            return Err(Error::Shape(format!(
                "value of size {} among values of size {width}",
                v.len()
            )));
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += a * x;
        }
    }
    Ok(out)
}

/// Graph leaves for the trainable parts of a [`ScoringParams`].
#[derive(Clone, Copy, Debug)]
pub enum BoundScoring {
    /// `w2` is bound as a `[hidden, 1]` column.
    Mlp {
        w1: Var,
        w2: Var,
    },
    Bilinear {
        w: Var,
    },
    Dot,
    ScaledDot,
}

impl ScoringParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundScoring> {
        Ok(match self {
            Self::Mlp { w1, w2 } => BoundScoring::Mlp {
                w1: g.leaf(w1.clone(), trainable),
                w2: g.leaf(w2.clone().reshape(vec![w2.numel(), 1])?, trainable),
            },
            Self::Bilinear { w } => BoundScoring::Bilinear {
                w: g.leaf(w.clone(), trainable),
            },
            Self::Dot => BoundScoring::Dot,
            Self::ScaledDot => BoundScoring::ScaledDot,
        })
    }
}

/// Scores `[1, n]` of a `[1, dq]` query against `[n, dk]` keys, with an
/// optional `[1, dh]` history row for the MLP scorer.
pub fn score_graph(
    g: &mut Graph,
    query: Var,
    keys: Var,
    history: Option<Var>,
    params: BoundScoring,
) -> Result<Var> {
    let (n, dk) = g.value(keys).dims2()?;
    let (_, dq) = g.value(query).dims2()?;
    if history.is_some() && !matches!(params, BoundScoring::Mlp { .. }) {
        return Err(Error::Config(
            "only the MLP scorer takes a history input".into(),
        ));
    }
    match params {
        BoundScoring::Dot | BoundScoring::ScaledDot => {
            if dq != dk {
                return Err(Error::Shape(format!(
                    "query of size {dq} against keys of size {dk}"
                )));
            }
            let kt = g.transpose(keys)?;
            let s = g.matmul(query, kt)?;
            Ok(if matches!(params, BoundScoring::ScaledDot) {
                g.scale(s, 1.0 / (dk as f64).sqrt())
            } else {
                s
            })
        }
        BoundScoring::Bilinear { w } => {
            let qw = g.matmul(query, w)?;
            let kt = g.transpose(keys)?;
            g.matmul(qw, kt)
        }
        BoundScoring::Mlp { w1, w2 } => {
            let ones = g.constant(Tensor::filled(&[n, 1], 1.0));
            let mut parts = vec![g.matmul(ones, query)?, keys];
            if let Some(h) = history {
                parts.push(g.matmul(ones, h)?);
            }
            let x = g.concat_cols(&parts)?;
            let w1t = g.transpose(w1)?;
            let hidden = g.matmul(x, w1t)?;
            let hidden = g.tanh(hidden);
            let s = g.matmul(hidden, w2)?;
            g.transpose(s)
        }
    }
}

/// Returns `(context [1, dv], weights [1, n])`.
pub fn attend_graph(
    g: &mut Graph,
    query: Var,
    keys: Var,
    values: Var,
    history: Option<Var>,
    params: BoundScoring,
) -> Result<(Var, Var)> {
    let scores = score_graph(g, query, keys, history, params)?;
    let weights = g.softmax(scores, 1)?;
    let context = g.matmul(weights, values)?;
    Ok((context, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradient_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const ALL: [ScoringVariant; 4] = [
        ScoringVariant::Mlp,
        ScoringVariant::Bilinear,
        ScoringVariant::Dot,
        ScoringVariant::ScaledDot,
    ];

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| rand::Rng::gen_range(rng, -1.0..1.0))
            .collect()
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(
            score(&[1.0, 0.0], &[0.0, 3.0], &ScoringParams::Dot).unwrap(),
            0.0
        );
        let (q, k) = ([0.5, -1.0, 2.0, 0.25], [1.5, 0.5, -0.75, 2.0]);
        let dp = score(&q, &k, &ScoringParams::Dot).unwrap();
        assert!((score(&q, &k, &ScoringParams::ScaledDot).unwrap() - dp / 2.0).abs() < 1e-15);
        let bl = ScoringParams::Bilinear { w: Tensor::eye(4) };
        assert!((score(&q, &k, &bl).unwrap() - dp).abs() < 1e-15);
        assert!(matches!(
            score(&q, &k[..3], &ScoringParams::Dot),
            Err(Error::Shape(_))
        ));
        assert!(
            ScoringParams::Dot.is_parameter_free() && ScoringParams::ScaledDot.is_parameter_free()
        );
    }

    #[test]
    fn mlp_matches_its_definition() {
        let w1 = Tensor::from_rows(&[vec![1.0, 0.0, 0.5, 0.0], vec![0.0, -1.0, 0.0, 2.0]]).unwrap();
        let w2 = Tensor::vector(vec![2.0, 1.0]);
        let p = ScoringParams::Mlp { w1, w2 };
        let got = score(&[0.2, 0.4], &[0.6, -0.1], &p).unwrap();
        let want = 2.0 * (0.2f64 + 0.3).tanh() + (-0.4f64 - 0.2).tanh();
        assert!((got - want).abs() < 1e-15);
        assert!(matches!(
            score(&[0.2], &[0.6, -0.1], &p),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            score_with_history(&[1.0], &[1.0], Some(&[1.0]), &ScoringParams::Dot),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn weight_examples() {
        let keys = vec![vec![0.3, 0.1]; 4];
        for w in attention_weights(&[1.0, -2.0], &keys, &ScoringParams::Dot).unwrap() {
            assert!((w - 0.25).abs() < 1e-15);
        }
        // DP scores [0, 1600, 400]: the runner-up weight is exp(-1200).
        let q = [1.0, 2.0];
        let keys = [vec![2.0, -1.0], vec![320.0, 640.0], vec![0.0, 200.0]];
        let w = attention_weights(&q, &keys, &ScoringParams::Dot).unwrap();
        assert_eq!(w[1], 1.0);
        let shifted = weights_from_scores(&[1.0 + 7.5, 2.0 + 7.5, -0.5 + 7.5]);
        for (a, b) in shifted.iter().zip(weights_from_scores(&[1.0, 2.0, -0.5])) {
            assert!((a - b).abs() < 1e-15);
        }
        let empty: [Vec<f64>; 0] = [];
        assert!(matches!(
            attention_weights(&q, &empty, &ScoringParams::Dot),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn context_examples() {
        let values = [vec![1.0, 2.0], vec![3.0, 5.0], vec![-1.0, 0.5]];
        assert_eq!(
            context_vector(&[0.0, 1.0, 0.0], &values).unwrap(),
            vec![3.0, 5.0]
        );
        let mean = context_vector(&[1.0 / 3.0; 3], &values).unwrap();
        assert!((mean[0] - 1.0).abs() < 1e-15 && (mean[1] - 2.5).abs() < 1e-15);
        assert!(matches!(
            context_vector(&[1.0], &values),
            Err(Error::Shape(_))
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<Vec<f64>> = (0..7).map(|_| random(&mut rng, 5)).collect();
        let w = weights_from_scores(&random(&mut rng, 7));
        let got = context_vector(&w, &values).unwrap();
        for (d, g) in got.iter().enumerate() {
            let mut naive = 0.0;
            for j in 0..7 {
                naive += w[j] * values[j][d];
            }
            assert!((g - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn sdp_matches_transformer_attention_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random(&mut rng, 6);
        let keys: Vec<Vec<f64>> = (0..5).map(|_| random(&mut rng, 6)).collect();
        let plain = attention_weights(&q, &keys, &ScoringParams::ScaledDot).unwrap();
        let mut g = Graph::new();
        let qv = g.constant(Tensor::from_rows(&[q]).unwrap());
        let kv = g.constant(Tensor::from_rows(&keys).unwrap());
        let (_, w) = crate::transformer::scaled_dot_product_attention(
            &mut g,
            qv,
            kv,
            kv,
            None,
            0.0,
            false,
            &mut crate::transformer::NoRng,
        )
        .unwrap();
        for (a, b) in plain.iter().zip(g.value(w).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_form_matches_plain_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for variant in ALL {
            let hist = if variant == ScoringVariant::Mlp { 3 } else { 0 };
            let p = ScoringParams::initialize(variant, 4, 4, 5, hist, &mut rng).unwrap();
            let q = random(&mut rng, 4);
            let h = random(&mut rng, hist);
            let keys: Vec<Vec<f64>> = (0..6).map(|_| random(&mut rng, 4)).collect();
            let values: Vec<Vec<f64>> = (0..6).map(|_| random(&mut rng, 3)).collect();
            let history = (hist > 0).then_some(h.as_slice());
            let w = attention_weights_with_history(&q, &keys, history, &p).unwrap();
            let c = context_vector(&w, &values).unwrap();

            let mut g = Graph::new();
            let b = p.bind(&mut g, false).unwrap();
            let qv = g.constant(Tensor::from_rows(std::slice::from_ref(&q)).unwrap());
            let kv = g.constant(Tensor::from_rows(&keys).unwrap());
            let vv = g.constant(Tensor::from_rows(&values).unwrap());
            let hv = history.map(|h| g.constant(Tensor::from_rows(&[h.to_vec()]).unwrap()));
            let (cv, wv) = attend_graph(&mut g, qv, kv, vv, hv, b).unwrap();
            for (a, b) in w.iter().zip(g.value(wv).data()) {
                assert!((a - b).abs() < 1e-12, "{variant:?}");
            }
            for (a, b) in c.iter().zip(g.value(cv).data()) {
                assert!((a - b).abs() < 1e-12, "{variant:?}");
            }
        }
    }

    #[test]
    fn every_variant_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for variant in ALL {
            let hist = if variant == ScoringVariant::Mlp { 2 } else { 0 };
            let p = ScoringParams::initialize(variant, 3, 3, 4, hist, &mut rng).unwrap();
            let mut inputs = vec![
                Tensor::new(vec![1, 3], random(&mut rng, 3)).unwrap(),
                Tensor::new(vec![5, 3], random(&mut rng, 15)).unwrap(),
                Tensor::new(vec![5, 2], random(&mut rng, 10)).unwrap(),
                Tensor::new(vec![2, 1], random(&mut rng, 2)).unwrap(),
            ];
            match &p {
                ScoringParams::Mlp { w1, w2 } => {
                    inputs.push(w1.clone());
                    inputs.push(w2.clone().reshape(vec![4, 1]).unwrap());
                    inputs.push(Tensor::new(vec![1, 2], random(&mut rng, 2)).unwrap());
                }
                ScoringParams::Bilinear { w } => inputs.push(w.clone()),
                _ => {}
            }
            let err = gradient_check(&inputs, 1e-5, |g, v| {
                let params = match variant {
                    ScoringVariant::Mlp => BoundScoring::Mlp { w1: v[4], w2: v[5] },
                    ScoringVariant::Bilinear => BoundScoring::Bilinear { w: v[4] },
                    ScoringVariant::Dot => BoundScoring::Dot,
                    ScoringVariant::ScaledDot => BoundScoring::ScaledDot,
                };
                let history = (variant == ScoringVariant::Mlp).then(|| v[6]);
                let (c, _) = attend_graph(g, v[0], v[1], v[2], history, params)?;
                let y = g.matmul(c, v[3])?;
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(err < 1e-4, "{variant:?}: {err}");
        }
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution_with_stable_argmax(
            scores in proptest::collection::vec(-20.0f64..20.0, 1..12),
            a in 0.1f64..10.0,
            c in -50.0f64..50.0,
        ) {
            let w = weights_from_scores(&scores);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
            let moved: Vec<f64> = scores.iter().map(|s| a * s + c).collect();
            prop_assert_eq!(argmax(&w), argmax(&weights_from_scores(&moved)));
        }
    }
}
