use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, lr_schedule, Adam, AdamSettings};
use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, TrainerState};
use crate::data::{batch_by_tokens, Batch, DialogExample, Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::evaluation::perplexity_from_loss;
use crate::tensor::Tensor;
use crate::transformer::{NoRng, Transformer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub warmup_steps: u64,
    /// Multiplies the scheduled learning rate.
    pub lr_scale: f64,
    pub adam: AdamSettings,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub label_smoothing: f64,
    /// Padded tokens per batch, for sources and targets separately.
    pub batch_tokens: usize,
    pub validate_every: u64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            warmup_steps: 4000,
            lr_scale: 1.0,
            adam: AdamSettings::default(),
            clip_norm: Some(1.0),
            label_smoothing: 0.0,
            batch_tokens: 4096,
            validate_every: 500,
            seed: 0,
        }
    }
}

/// Mean teacher-forced loss over a set of examples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub loss: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Mean training loss since the previous record.
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub perplexity: Option<f64>,
    pub lr: f64,
}

/// Summed (not averaged) loss and token count of one batch in inference
/// mode.
fn batch_loss(model: &Transformer, batch: &Batch) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let logits =
        model.forward_batch(&mut g, &p, &batch.source, &batch.target, false, &mut NoRng)?;
    let loss = g.cross_entropy(logits, &batch.target.ids, PAD_ID, 0.0)?;
    let tokens = batch.target_tokens();
    Ok((g.value(loss).data()[0] * tokens as f64, tokens))
}

/// Token-weighted mean loss over pre-built batches.
pub fn validate_batches(model: &Transformer, batches: &[Batch]) -> Result<Validation> {
    let (mut total, mut tokens) = (0.0, 0);
    for b in batches {
        let (l, n) = batch_loss(model, b)?;
        total += l;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Contract(
            "validation needs at least one example".into(),
        ));
    }
    let loss = total / tokens as f64;
    Ok(Validation {
        loss,
        perplexity: perplexity_from_loss(loss),
        tokens,
    })
}

/// Inference-mode validation; examples are truncated to the model's
/// maximum length and grouped under `batch_tokens`.
pub fn validate(
    model: &Transformer,
    examples: &[DialogExample],
    batch_tokens: usize,
) -> Result<Validation> {
    if examples.is_empty() {
        return Err(Error::Contract(
            "validation needs at least one example".into(),
        ));
    }
    let examples = fit_examples(examples, model.config().max_sequence_length);
    validate_batches(model, &batch_by_tokens(&examples, batch_tokens, 0)?)
}

pub fn fit_examples(examples: &[DialogExample], max_len: usize) -> Vec<DialogExample> {
    examples.iter().map(|e| e.truncated(max_len)).collect()
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Owns the model and optimizer state of one training run.
pub struct Trainer {
    model: Transformer,
    vocab: Vocabulary,
    settings: TrainSettings,
    adam: Adam,
    step: u64,
    best_val_loss: Option<f64>,
    plan: Option<(u64, Vec<Batch>)>,
}

impl Trainer {
    pub fn new(model: Transformer, vocab: Vocabulary, settings: TrainSettings) -> Result<Self> {
        if vocab.len() != model.vocab_size() {
            return Err(Error::Config(format!(
                "vocabulary of {} tokens for a model of {}",
                vocab.len(),
                model.vocab_size()
            )));
        }
        if settings.batch_tokens < model.config().max_sequence_length {
            return Err(Error::Config(format!(
                "batch budget {} is below the maximum sequence length {}",
                settings.batch_tokens,
                model.config().max_sequence_length
            )));
        }
        let adam = Adam::new(settings.adam, model.params().tensors());
        Ok(Self {
            model,
            vocab,
            settings,
            adam,
            step: 0,
            best_val_loss: None,
            plan: None,
        })
    }

    /// Continues a run from a checkpoint written by [`checkpoint`](Self::checkpoint).
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let state = ckpt
            .trainer
            .clone()
            .ok_or_else(|| Error::Format("checkpoint carries no optimizer state".into()))?;
        let settings: TrainSettings =
            serde_json::from_str(&state.settings).map_err(|e| Error::Format(e.to_string()))?;
        let mut t = Self::new(ckpt.model()?, ckpt.vocab, settings)?;
        let shapes_match = |m: &[Tensor]| {
            m.len() == t.model.params().len()
                && m.iter()
                    .zip(t.model.params().tensors())
                    .all(|(a, b)| a.shape() == b.shape())
        };
        if !shapes_match(&state.first_moment) || !shapes_match(&state.second_moment) {
            return Err(Error::Format(
                "optimizer state does not match the parameters".into(),
            ));
        }
        t.adam.first_moment = state.first_moment;
        t.adam.second_moment = state.second_moment;
        t.adam.steps = ckpt.step;
        t.step = ckpt.step;
        t.best_val_loss = state.best_val_loss;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model, &self.vocab, self.step);
        ckpt.trainer = Some(TrainerState {
            settings: serde_json::to_string(&self.settings).expect("settings serialize"),
            seed: self.settings.seed,
            best_val_loss: self.best_val_loss,
            first_moment: self.adam.first_moment.clone(),
            second_moment: self.adam.second_moment.clone(),
        });
        ckpt
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    #[cfg(test)]
    pub(crate) fn model_mut(&mut self) -> &mut Transformer {
        &mut self.model
    }

    pub fn into_model(self) -> Transformer {
        self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    /// Completed optimization steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_val_loss
    }

    pub fn learning_rate(&self, step: u64) -> Result<f64> {
        Ok(self.settings.lr_scale
            * lr_schedule(
                step,
                self.model.config().d_model,
                self.settings.warmup_steps,
            )?)
    }

    /// One forward/backward/update on `batch`; returns the batch loss.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let step = self.step + 1;
        let lr = self.learning_rate(step)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.settings.seed);
        rng.set_stream(step);

        let mut g = Graph::new();
        let p = self.model.params().bind(&mut g, true);
        let logits =
            self.model
                .forward_batch(&mut g, &p, &batch.source, &batch.target, true, &mut rng)?;
        let loss = g.cross_entropy(
            logits,
            &batch.target.ids,
            PAD_ID,
            self.settings.label_smoothing,
        )?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        g.backward(loss)?;
        let params = self.model.params();
        let mut grads: Vec<Tensor> = p
            .vars()
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        drop(g);
        if let Some(max) = self.settings.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        self.adam
            .update(self.model.params_mut().tensors_mut(), &grads, lr)?;
        self.step = step;
        Ok(value)
    }

    /// The batch used at 1-based `step`: epochs walk a seeded grouping of
    /// `examples`, so the schedule depends only on the seed and the step.
    pub fn batch_for_step(&mut self, examples: &[DialogExample], step: u64) -> Result<Batch> {
        if examples.is_empty() {
            return Err(Error::Contract("no training examples".into()));
        }
        let per_epoch = match &self.plan {
            Some((_, b)) => b.len() as u64,
            None => self.plan_epoch(examples, 0)?.len() as u64,
        };
        let epoch = (step - 1) / per_epoch;
        if self.plan.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.plan_epoch(examples, epoch)?;
        }
        let (_, batches) = self.plan.as_ref().expect("planned");
        Ok(batches[((step - 1) % per_epoch) as usize % batches.len()].clone())
    }

    fn plan_epoch(&mut self, examples: &[DialogExample], epoch: u64) -> Result<&[Batch]> {
        let fitted = fit_examples(examples, self.model.config().max_sequence_length);
        let batches = batch_by_tokens(
            &fitted,
            self.settings.batch_tokens,
            epoch_seed(self.settings.seed, epoch),
        )?;
        self.plan = Some((epoch, batches));
        Ok(&self.plan.as_ref().expect("just set").1)
    }

    pub fn validate(&self, examples: &[DialogExample]) -> Result<Validation> {
        validate(&self.model, examples, self.settings.batch_tokens)
    }

    /// Trains until `self.step() == until`, validating every
    /// `validate_every` steps (and at step 0 of a fresh run). `observe`
    /// sees every record and may stop the run early by returning `false`.
    pub fn run(
        &mut self,
        train: &[DialogExample],
        valid: &[DialogExample],
        until: u64,
        output: Option<&RunOutput>,
        mut observe: impl FnMut(&MetricsRecord) -> bool,
    ) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        if let Some(out) = output {
            std::fs::create_dir_all(&out.dir)?;
        }
        let mut emit = |this: &mut Self,
                        train_loss: Option<f64>,
                        records: &mut Vec<MetricsRecord>|
         -> Result<bool> {
            let v = if valid.is_empty() {
                None
            } else {
                Some(this.validate(valid)?)
            };
            let lr = this.learning_rate(this.step.max(1))?;
            let rec = MetricsRecord {
                step: this.step,
                train_loss,
                val_loss: v.map(|v| v.loss),
                perplexity: v.map(|v| v.perplexity),
                lr,
            };
            let improved = match (v, this.best_val_loss) {
                (Some(v), Some(best)) => v.loss < best,
                (Some(_), None) => true,
                _ => false,
            };
            if improved {
                this.best_val_loss = v.map(|v| v.loss);
            }
            if let Some(out) = output {
                out.append(&rec)?;
                let ckpt = this.checkpoint();
                ckpt.save(&out.dir.join(LATEST))?;
                if improved {
                    ckpt.save(&out.dir.join(BEST))?;
                }
            }
            let go_on = observe(&rec);
            records.push(rec);
            Ok(go_on)
        };
        if self.step == 0 && !emit(self, None, &mut records)? {
            return Ok(records);
        }
        let (mut sum, mut count) = (0.0, 0usize);
        while self.step < until {
            let batch = self.batch_for_step(train, self.step + 1)?;
            sum += self.train_step(&batch)?;
            count += 1;
            if self
                .step
                .is_multiple_of(self.settings.validate_every.max(1))
                || self.step == until
            {
                let mean = sum / count as f64;
                (sum, count) = (0.0, 0);
                if !emit(self, Some(mean), &mut records)? {
                    break;
                }
            }
        }
        Ok(records)
    }
}

pub const LATEST: &str = "latest.ckpt";
pub const BEST: &str = "best.ckpt";
pub const METRICS: &str = "metrics.jsonl";

/// Where a run writes its checkpoints and metrics log.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
        }
    }

    fn append(&self, rec: &MetricsRecord) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join(METRICS))?;
        let line = serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}
