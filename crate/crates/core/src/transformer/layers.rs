//! Building blocks of the encoder and decoder stacks.

use rand::Rng;

use crate::autograd::{AttentionSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sinusoidal position table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))` and
/// `PE[pos, 2i+1] = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encodings need an even width, got {d_model}"
        )));
    }
    if max_len == 0 {
        return Err(Error::Config(
            "positional encodings need at least one position".into(),
        ));
    }
    let mut data = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![max_len, d_model], data)
}

/// `n x n` additive mask: `0` where `j <= i`, `-inf` above the diagonal.
pub fn causal_mask(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n.max(1), n.max(1)]);
    for i in 0..n {
        for j in i + 1..n {
            t.set(&[i, j], f64::NEG_INFINITY);
        }
    }
    t
}

/// `softmax(Q K^T / sqrt(d_k) + mask) V` for a single sequence, composed from
/// primitive graph operations. Returns `(output, weights)`; dropout, when
/// active, is applied to the weights before they multiply `V`.
#[allow(clippy::too_many_arguments)]
pub fn scaled_dot_product_attention<R: Rng + ?Sized>(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor>,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let (nq, dk) = g.value(q).dims2()?;
    let (nk, dk2) = g.value(k).dims2()?;
    if dk != dk2 {
        return Err(Error::Shape(format!(
            "query width {dk} differs from key width {dk2}"
        )));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    if let Some(m) = mask {
        let m = broadcast_mask(m, nq, nk)?;
        let mv = g.constant(m);
        scores = g.add(scores, mv)?;
    }
    let weights = g.softmax(scores, 1).map_err(|e| {
        if let Error::Mask(_) = e {
            Error::Mask("attention row is fully masked".into())
        } else {
            e
        }
    })?;
    let dropped = g.dropout(weights, dropout, training, rng)?;
    let out = g.matmul(dropped, v)?;
    Ok((out, weights))
}

fn broadcast_mask(mask: &Tensor, nq: usize, nk: usize) -> Result<Tensor> {
    match mask.shape() {
        [r, c] if *r == nq && *c == nk => Ok(mask.clone()),
        [1, c] | [c] if *c == nk => {
            let row = mask.data().to_vec();
            Tensor::new(vec![nq, nk], row.repeat(nq))
        }
        s => Err(Error::Shape(format!(
            "mask {s:?} does not broadcast to {nq}x{nk}"
        ))),
    }
}

/// Projection matrices of one multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
}

/// Projects the inputs, runs per-head scaled dot-product attention,
/// concatenates the heads and applies the output projection. The column
/// block `h * d_k .. (h + 1) * d_k` of each projection matrix is head `h`'s
/// own projection.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<R: Rng + ?Sized>(
    g: &mut Graph,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    weights: &AttentionWeights,
    spec: AttentionSpec,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let q = g.matmul(q_in, weights.query)?;
    let k = g.matmul(k_in, weights.key)?;
    let v = g.matmul(v_in, weights.value)?;
    let heads = g.attention(q, k, v, spec, training, rng)?;
    g.matmul(heads, weights.output)
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Position-wise `max(0, x W1 + b1) W2 + b2`.
pub fn feed_forward(g: &mut Graph, x: Var, w: &FeedForwardWeights) -> Result<Var> {
    let h = g.matmul(x, w.w1)?;
    let h = g.add_row(h, w.b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w.w2)?;
    g.add_row(o, w.b2)
}

/// `LayerNorm(x + Dropout(sublayer))`.
#[allow(clippy::too_many_arguments)]
pub fn residual_norm<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    sublayer: Var,
    gain: Var,
    bias: Var,
    epsilon: f64,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let s = g.dropout(sublayer, dropout, training, rng)?;
    let sum = g.add(x, s)?;
    g.layer_norm(sum, gain, bias, epsilon)
}
