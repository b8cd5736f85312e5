use std::collections::HashMap;

use rand::Rng;

use super::TransformerConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Zeros,
    Ones,
}

/// Name, shape and initialiser of every parameter, in storage order.
pub(crate) fn layout(config: &TransformerConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
    let mut out = vec![("embedding".to_string(), vec![v, d], Init::Xavier)];
    let attention = |out: &mut Vec<_>, prefix: String| {
        for proj in ["query", "key", "value", "output"] {
            out.push((format!("{prefix}.{proj}"), vec![d, d], Init::Xavier));
        }
    };
    let norm = |out: &mut Vec<_>, prefix: String| {
        out.push((format!("{prefix}.gain"), vec![d], Init::Ones));
        out.push((format!("{prefix}.bias"), vec![d], Init::Zeros));
    };
    let ffn = |out: &mut Vec<_>, prefix: String| {
        out.push((format!("{prefix}.w1"), vec![d, f], Init::Xavier));
        out.push((format!("{prefix}.b1"), vec![f], Init::Zeros));
        out.push((format!("{prefix}.w2"), vec![f, d], Init::Xavier));
        out.push((format!("{prefix}.b2"), vec![d], Init::Zeros));
    };
    for l in 0..config.num_layers {
        attention(&mut out, format!("encoder.{l}.self_attention"));
        norm(&mut out, format!("encoder.{l}.self_attention_norm"));
        ffn(&mut out, format!("encoder.{l}.feed_forward"));
        norm(&mut out, format!("encoder.{l}.feed_forward_norm"));
    }
    for l in 0..config.num_layers {
        attention(&mut out, format!("decoder.{l}.self_attention"));
        norm(&mut out, format!("decoder.{l}.self_attention_norm"));
        attention(&mut out, format!("decoder.{l}.cross_attention"));
        norm(&mut out, format!("decoder.{l}.cross_attention_norm"));
        ffn(&mut out, format!("decoder.{l}.feed_forward"));
        norm(&mut out, format!("decoder.{l}.feed_forward_norm"));
    }
    if !config.tie_output_projection {
        out.push(("output.weight".into(), vec![d, v], Init::Xavier));
    }
    out.push(("output.bias".into(), vec![v], Init::Zeros));
    out
}

pub(crate) fn sample_init<R: Rng + ?Sized>(shape: &[usize], init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::filled(shape, 1.0),
        Init::Xavier => {
            let bound = (6.0 / (shape[0] + shape[shape.len() - 1]) as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("layout shape")
        }
    }
}

/// Named parameter tensors of a model, in a fixed order derived from the
/// configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParameters {
    pub fn initialize<R: Rng + ?Sized>(config: &TransformerConfig, rng: &mut R) -> Self {
        let entries = layout(config).into_iter().map(|(name, shape, init)| {
            let t = sample_init(&shape, init, rng);
            (name, t)
        });
        Self::from_entries(entries.collect()).expect("unique layout names")
    }

    /// Every tensor, including layer-norm gains, set to zero.
    pub fn zeros(config: &TransformerConfig) -> Self {
        let entries = layout(config)
            .into_iter()
            .map(|(name, shape, _)| (name, Tensor::zeros(&shape)));
        Self::from_entries(entries.collect()).expect("unique layout names")
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let (names, tensors): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate parameter {n}")));
            }
        }
        Ok(Self {
            names,
            tensors,
            index,
        })
    }

    /// Checks names and shapes against what `config` requires.
    pub fn check_layout(&self, config: &TransformerConfig) -> Result<()> {
        let expected = layout(config);
        if expected.len() != self.names.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.names.len()
            )));
        }
        for ((name, shape, _), (have, t)) in expected.iter().zip(self.iter()) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {have} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Records every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    /// Names existing leaves, given in storage order, as these parameters.
    pub fn bind_vars(&self, g: &Graph, vars: &[Var]) -> Result<BoundParams> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.tensors.len()
            )));
        }
        for ((name, t), &v) in self.names.iter().zip(&self.tensors).zip(vars) {
            if g.value(v).shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "variable for {name} has the wrong shape"
                )));
            }
        }
        Ok(BoundParams {
            vars: vars.to_vec(),
            index: self.index.clone(),
        })
    }
}

/// Graph leaves for a [`ModelParameters`], addressable by name.
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("no parameter named {name}"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    /// Leaves in storage order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
