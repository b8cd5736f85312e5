use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::tensor::Tensor;
use crate::transformer::{layout, sample_init, ModelParameters, TransformerConfig};

/// Copies a trained checkpoint into a larger vocabulary: `added` tokens
/// get fresh embedding rows and output columns drawn from the same
/// distribution as a new model of the extended size; everything else is
/// copied. The result starts at step 0 without optimizer state.
pub fn extend_vocabulary<S: AsRef<str>, R: Rng + ?Sized>(
    base: &Checkpoint,
    added: &[S],
    rng: &mut R,
) -> Result<Checkpoint> {
    let mut vocab = base.vocab.clone();
    vocab.extend(added)?;
    let (old_v, new_v) = (base.config.vocab_size, vocab.len());
    let config = TransformerConfig {
        vocab_size: new_v,
        ..base.config.clone()
    };
    let d = config.d_model;

    let fresh: Vec<(String, Vec<usize>, _)> = layout(&config);
    let mut entries = Vec::with_capacity(fresh.len());
    for (name, shape, init) in fresh {
        let old = base
            .params
            .get(&name)
            .expect("same layout apart from vocabulary");
        let t = if old.shape() == shape.as_slice() {
            old.clone()
        } else {
            let init = sample_init(&shape, init, rng);
            match name.as_str() {
                "embedding" => {
                    let mut data = old.data().to_vec();
                    data.extend_from_slice(&init.data()[old_v * d..]);
                    Tensor::new(shape, data)?
                }
                "output.weight" => {
                    let mut data = Vec::with_capacity(d * new_v);
                    for r in 0..d {
                        data.extend_from_slice(old.row(r));
                        data.extend_from_slice(&init.row(r)[old_v..]);
                    }
                    Tensor::new(shape, data)?
                }
                _ => {
                    let mut data = old.data().to_vec();
                    data.extend_from_slice(&init.data()[old_v..]);
                    Tensor::new(shape, data)?
                }
            }
        };
        entries.push((name, t));
    }
    let params = ModelParameters::from_entries(entries)?;
    params.check_layout(&config)?;
    Ok(Checkpoint {
        config,
        vocab,
        params,
        step: 0,
        trainer: None,
    })
}
