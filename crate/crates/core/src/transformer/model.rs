use rand::Rng;

use super::layers::{feed_forward, multi_head_attention, positional_encoding, residual_norm};
use super::layers::{AttentionWeights, FeedForwardWeights};
use super::params::{BoundParams, ModelParameters};
use super::TransformerConfig;
use crate::autograd::{AttentionSpec, Graph, Var};
use crate::data::vocab::PAD_ID;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Equal-length, `<pad>`-filled id sequences stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqBatch {
    pub ids: Vec<u32>,
    pub rows: usize,
    pub len: usize,
}

impl SeqBatch {
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S]) -> Result<Self> {
        let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if seqs.is_empty() || len == 0 {
            return Err(Error::Contract("batch of empty sequences".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s.as_ref());
            ids.resize(ids.len() + len - s.as_ref().len(), PAD_ID);
        }
        Ok(Self {
            ids,
            rows: seqs.len(),
            len,
        })
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.len..(r + 1) * self.len]
    }

    /// Teacher-forcing decoder input: each row shifted right by one with
    /// `<pad>` as the start token.
    pub fn shifted_right(&self) -> Self {
        let mut ids = Vec::with_capacity(self.ids.len());
        for r in 0..self.rows {
            ids.push(PAD_ID);
            ids.extend_from_slice(&self.row(r)[..self.len - 1]);
        }
        Self {
            ids,
            rows: self.rows,
            len: self.len,
        }
    }

    fn valid(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD_ID).collect()
    }
}

/// Final-layer encoder states of one sequence with its key validity.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub states: Tensor,
    pub key_valid: Vec<bool>,
}

/// The encoder-decoder: configuration, parameters and the fixed position
/// table.
#[derive(Clone, Debug)]
pub struct Transformer {
    config: TransformerConfig,
    params: ModelParameters,
    positions: Tensor,
}

impl Transformer {
    pub fn new(config: TransformerConfig, params: ModelParameters) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        let positions = positional_encoding(config.max_sequence_length, config.d_model)?;
        Ok(Self {
            config,
            params,
            positions,
        })
    }

    pub fn initialize<R: Rng + ?Sized>(config: TransformerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = ModelParameters::initialize(&config, rng);
        Self::new(config, params)
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParameters {
        &mut self.params
    }

    pub fn into_parts(self) -> (TransformerConfig, ModelParameters) {
        (self.config, self.params)
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len > self.config.max_sequence_length {
            return Err(Error::Length(format!(
                "{what} of length {len} exceeds the maximum of {}",
                self.config.max_sequence_length
            )));
        }
        Ok(())
    }

    /// Token embeddings (optionally scaled) plus positional encodings.
    fn embed<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        batch: &SeqBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let mut x = g.embedding(p.var("embedding"), &batch.ids)?;
        if self.config.scale_embeddings {
            x = g.scale(x, (d as f64).sqrt());
        }
        let pe = &self.positions.data()[..batch.len * d];
        let pe = g.constant(Tensor::new(
            vec![batch.rows * batch.len, d],
            pe.repeat(batch.rows),
        )?);
        let x = g.add(x, pe)?;
        g.dropout(x, self.config.dropout_rate, training, rng)
    }

    fn attention_weights(p: &BoundParams, prefix: &str) -> AttentionWeights {
        AttentionWeights {
            query: p.var(&format!("{prefix}.query")),
            key: p.var(&format!("{prefix}.key")),
            value: p.var(&format!("{prefix}.value")),
            output: p.var(&format!("{prefix}.output")),
        }
    }

    fn ffn_weights(p: &BoundParams, prefix: &str) -> FeedForwardWeights {
        FeedForwardWeights {
            w1: p.var(&format!("{prefix}.w1")),
            b1: p.var(&format!("{prefix}.b1")),
            w2: p.var(&format!("{prefix}.w2")),
            b2: p.var(&format!("{prefix}.b2")),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        prefix: &str,
        x: Var,
        sub: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let gain = p.var(&format!("{prefix}.gain"));
        let bias = p.var(&format!("{prefix}.bias"));
        let c = &self.config;
        residual_norm(
            g,
            x,
            sub,
            gain,
            bias,
            c.layer_norm_epsilon,
            c.dropout_rate,
            training,
            rng,
        )
    }

    /// Runs the encoder stack over a padded batch; returns
    /// `[rows * len, d_model]` states. `<pad>` positions are masked out of
    /// every attention.
    pub fn encode_batch<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        src: &SeqBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_len(src.len, "source")?;
        let mut x = self.embed(g, p, src, training, rng)?;
        let valid = src.valid();
        for l in 0..self.config.num_layers {
            let prefix = format!("encoder.{l}");
            let mut spec = AttentionSpec::new(src.rows, src.len, src.len, self.config.num_heads);
            spec.key_valid = Some(valid.clone());
            spec.dropout = self.config.dropout_rate;
            let w = Self::attention_weights(p, &format!("{prefix}.self_attention"));
            let a = multi_head_attention(g, x, x, x, &w, spec, training, rng)?;
            x = self.norm(
                g,
                p,
                &format!("{prefix}.self_attention_norm"),
                x,
                a,
                training,
                rng,
            )?;
            let f = feed_forward(
                g,
                x,
                &Self::ffn_weights(p, &format!("{prefix}.feed_forward")),
            )?;
            x = self.norm(
                g,
                p,
                &format!("{prefix}.feed_forward_norm"),
                x,
                f,
                training,
                rng,
            )?;
        }
        Ok(x)
    }

    /// Runs the decoder stack over decoder inputs (already shifted right) and
    /// returns next-token logits `[rows * len, vocab_size]`. `memory` holds
    /// encoder states for `memory_valid.len() / rows` key positions per row.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_batch<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        memory: Var,
        memory_valid: &[bool],
        dec_in: &SeqBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_len(dec_in.len, "target")?;
        let rows = dec_in.rows;
        let mem_rows = g.value(memory).rows();
        if memory_valid.len() != mem_rows || !mem_rows.is_multiple_of(rows) {
            return Err(Error::Shape(format!(
                "encoder output of {mem_rows} rows does not match {rows} decoder rows"
            )));
        }
        let src_len = mem_rows / rows;
        let c = &self.config;
        let mut y = self.embed(g, p, dec_in, training, rng)?;
        for l in 0..c.num_layers {
            let prefix = format!("decoder.{l}");
            let mut spec = AttentionSpec::new(rows, dec_in.len, dec_in.len, c.num_heads);
            spec.causal = true;
            spec.dropout = c.dropout_rate;
            let w = Self::attention_weights(p, &format!("{prefix}.self_attention"));
            let a = multi_head_attention(g, y, y, y, &w, spec, training, rng)?;
            y = self.norm(
                g,
                p,
                &format!("{prefix}.self_attention_norm"),
                y,
                a,
                training,
                rng,
            )?;

            let mut spec = AttentionSpec::new(rows, dec_in.len, src_len, c.num_heads);
            spec.key_valid = Some(memory_valid.to_vec());
            spec.dropout = c.dropout_rate;
            let w = Self::attention_weights(p, &format!("{prefix}.cross_attention"));
            let a = multi_head_attention(g, y, memory, memory, &w, spec, training, rng)?;
            y = self.norm(
                g,
                p,
                &format!("{prefix}.cross_attention_norm"),
                y,
                a,
                training,
                rng,
            )?;

            let f = feed_forward(
                g,
                y,
                &Self::ffn_weights(p, &format!("{prefix}.feed_forward")),
            )?;
            y = self.norm(
                g,
                p,
                &format!("{prefix}.feed_forward_norm"),
                y,
                f,
                training,
                rng,
            )?;
        }
        let projection = match p.try_var("output.weight") {
            Some(w) => w,
            None => g.transpose(p.var("embedding"))?,
        };
        let logits = g.matmul(y, projection)?;
        g.add_row(logits, p.var("output.bias"))
    }

    /// Teacher-forced logits for a batch of `(source, target)` pairs:
    /// targets are shifted right internally.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        src: &SeqBatch,
        tgt: &SeqBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if src.rows != tgt.rows {
            return Err(Error::Shape(format!(
                "{} sources for {} targets",
                src.rows, tgt.rows
            )));
        }
        let memory = self.encode_batch(g, p, src, training, rng)?;
        self.decode_batch(
            g,
            p,
            memory,
            &src.valid(),
            &tgt.shifted_right(),
            training,
            rng,
        )
    }

    /// Inference-mode encoding of one source sequence.
    pub fn encode(&self, source_ids: &[u32]) -> Result<EncoderOutput> {
        let src = SeqBatch::from_sequences(&[source_ids])?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.encode_batch(&mut g, &p, &src, false, &mut NoRng)?;
        Ok(EncoderOutput {
            states: g.value(out).clone(),
            key_valid: src.valid(),
        })
    }

    /// Inference-mode decoder logits `[target_len, vocab_size]` for
    /// `target_ids`, shifted right with the `<pad>` start token. Row `i`
    /// predicts `target_ids[i]` and depends only on `target_ids[..i]`.
    pub fn decode(&self, target_ids: &[u32], encoder: &EncoderOutput) -> Result<Tensor> {
        let tgt = SeqBatch::from_sequences(&[target_ids])?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let memory = g.constant(encoder.states.clone());
        let out = self.decode_batch(
            &mut g,
            &p,
            memory,
            &encoder.key_valid,
            &tgt.shifted_right(),
            false,
            &mut NoRng,
        )?;
        Ok(g.value(out).clone())
    }

    /// Log-probabilities of the next token after each prefix, all prefixes
    /// conditioned on the same encoded source.
    pub fn next_token_log_probs(
        &self,
        encoder: &EncoderOutput,
        prefixes: &[Vec<u32>],
    ) -> Result<Vec<Vec<f64>>> {
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        // Appending a placeholder makes the last row the next-token row.
        let padded: Vec<Vec<u32>> = prefixes
            .iter()
            .map(|p| [p.as_slice(), &[PAD_ID]].concat())
            .collect();
        let lens: Vec<usize> = padded.iter().map(Vec::len).collect();
        let tgt = SeqBatch::from_sequences(&padded)?;
        let rows = prefixes.len();
        let states = encoder.states.data().repeat(rows);
        let width = encoder.states.last_dim();
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let memory = g.constant(Tensor::new(vec![states.len() / width, width], states)?);
        let valid = encoder.key_valid.repeat(rows);
        let logits = self.decode_batch(
            &mut g,
            &p,
            memory,
            &valid,
            &tgt.shifted_right(),
            false,
            &mut NoRng,
        )?;
        let logits = g.value(logits);
        Ok((0..rows)
            .map(|r| log_softmax(logits.row(r * tgt.len + lens[r] - 1)))
            .collect())
    }

    /// Per-token natural-log probabilities of `target` given `source`
    /// under teacher forcing.
    pub fn target_log_probs(&self, source: &[u32], target: &[u32]) -> Result<Vec<f64>> {
        let enc = self.encode(source)?;
        let logits = self.decode(target, &enc)?;
        Ok(target
            .iter()
            .enumerate()
            .map(|(i, &t)| log_softmax(logits.row(i))[t as usize])
            .collect())
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Inference never draws random numbers; this generator panics if it is
/// asked to.
pub(crate) struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("random draw in inference mode")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("random draw in inference mode")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("random draw in inference mode")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("random draw in inference mode")
    }
}
