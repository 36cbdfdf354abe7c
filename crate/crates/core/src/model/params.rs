use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{child_rng, streams, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    pub dropout_prob: f64,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_type_vocab() -> usize {
    2
}

fn default_ln_eps() -> f64 {
    1e-12
}

impl ModelConfig {
    /// Small preset used for desk-scale runs.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim: 128,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 512,
            max_positions: 128,
            type_vocab_size: 2,
            dropout_prob: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    /// Preset small enough for finite-difference gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ff_dim: 16,
            max_positions: 16,
            type_vocab_size: 2,
            dropout_prob: 0.0,
            layer_norm_eps: 1e-12,
        }
    }

    /// Roughly 126M parameters with a 70k vocabulary. Configuration only;
    /// never trained at desk scale.
    pub fn production() -> Self {
        Self {
            vocab_size: 70_000,
            hidden_dim: 768,
            num_layers: 10,
            num_heads: 12,
            ff_dim: 3072,
            max_positions: 514,
            type_vocab_size: 2,
            dropout_prob: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("max_positions", self.max_positions),
            ("type_vocab_size", self.type_vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.vocab_size <= crate::tokenizer::NUM_SPECIALS as usize {
            return Err(Error::Config(
                "vocab_size must exceed the special tokens".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config("dropout_prob must lie in [0, 1)".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Names and shapes of the encoder body followed by the MLM head.
    pub fn mlm_manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut m = self.encoder_manifest();
        let (d, v) = (self.hidden_dim, self.vocab_size);
        m.push(("mlm.transform.weight".into(), vec![d, d]));
        m.push(("mlm.transform.bias".into(), vec![d]));
        m.push(("mlm.norm.gamma".into(), vec![d]));
        m.push(("mlm.norm.beta".into(), vec![d]));
        m.push(("mlm.output_bias".into(), vec![v]));
        m
    }

    pub fn encoder_manifest(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.hidden_dim, self.ff_dim);
        let mut m: Vec<(String, Vec<usize>)> = vec![
            ("embeddings.word".into(), vec![self.vocab_size, d]),
            ("embeddings.position".into(), vec![self.max_positions, d]),
            (
                "embeddings.token_type".into(),
                vec![self.type_vocab_size, d],
            ),
            ("embeddings.norm.gamma".into(), vec![d]),
            ("embeddings.norm.beta".into(), vec![d]),
        ];
        for i in 0..self.num_layers {
            let p = |s: &str| format!("encoder.{i}.{s}");
            for proj in ["query", "key", "value", "output"] {
                m.push((p(&format!("attention.{proj}.weight")), vec![d, d]));
                m.push((p(&format!("attention.{proj}.bias")), vec![d]));
            }
            m.push((p("attention.norm.gamma"), vec![d]));
            m.push((p("attention.norm.beta"), vec![d]));
            m.push((p("ffn.intermediate.weight"), vec![d, f]));
            m.push((p("ffn.intermediate.bias"), vec![f]));
            m.push((p("ffn.output.weight"), vec![f, d]));
            m.push((p("ffn.output.bias"), vec![d]));
            m.push((p("ffn.norm.gamma"), vec![d]));
            m.push((p("ffn.norm.beta"), vec![d]));
        }
        m
    }

    pub fn parameter_count(&self) -> usize {
        self.mlm_manifest()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Which part of the network a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TensorFamily {
    Embedding,
    Attention,
    FeedForward,
    LayerNorm,
    Head,
}

impl TensorFamily {
    pub fn of(name: &str) -> Self {
        if name.contains(".norm.") {
            TensorFamily::LayerNorm
        } else if name.starts_with("embeddings.") {
            TensorFamily::Embedding
        } else if name.contains(".attention.") {
            TensorFamily::Attention
        } else if name.contains(".ffn.") {
            TensorFamily::FeedForward
        } else {
            TensorFamily::Head
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered, named parameter tensors. Manifest order is the storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new(tensors: Vec<Tensor>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tensors.len());
        for (i, t) in tensors.iter().enumerate() {
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "tensor {} data does not match its shape",
                    t.name
                )));
            }
            if index.insert(t.name.clone(), i).is_some() {
                return Err(Error::Shape(format!("duplicate tensor {}", t.name)));
            }
        }
        Ok(Self { tensors, index })
    }

    pub fn zeros(manifest: &[(String, Vec<usize>)]) -> Self {
        let tensors = manifest
            .iter()
            .map(|(n, s)| Tensor::zeros(n.clone(), s.clone()))
            .collect();
        Self::new(tensors).expect("manifest names are unique")
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index
            .get(name)
            .copied()
            .map(move |i| &mut self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Check that names and shapes match a manifest exactly, in order.
    pub fn check_manifest(&self, manifest: &[(String, Vec<usize>)]) -> Result<()> {
        if self.tensors.len() != manifest.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                manifest.len(),
                self.tensors.len()
            )));
        }
        for (t, (name, shape)) in self.tensors.iter().zip(manifest) {
            if &t.name != name || &t.shape != shape {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, name, shape
                )));
            }
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        match self
            .tensors
            .iter()
            .find(|t| t.data.iter().any(|x| !x.is_finite()))
        {
            Some(t) => Err(Error::NonFinite {
                tensor: t.name.clone(),
            }),
            None => Ok(()),
        }
    }
}

pub(crate) const INIT_STDDEV: f64 = 0.02;

fn truncated_normal(rng: &mut Rng, dist: &Normal<f64>) -> f32 {
    loop {
        let x = dist.sample(rng);
        if x.abs() <= 2.0 * INIT_STDDEV {
            return x as f32;
        }
    }
}

/// Weights from a normal truncated at two standard deviations, biases and
/// layer-norm offsets zero, layer-norm scales one.
pub(crate) fn init_tensors(manifest: &[(String, Vec<usize>)], rng: &mut Rng) -> ParamSet {
    let dist = Normal::new(0.0, INIT_STDDEV).expect("valid stddev");
    let tensors = manifest
        .iter()
        .map(|(name, shape)| {
            let mut t = Tensor::zeros(name.clone(), shape.clone());
            if name.ends_with(".gamma") {
                t.data.fill(1.0);
            } else if name.ends_with(".beta") || name.ends_with("bias") {
                // zero
            } else {
                for x in t.data.iter_mut() {
                    *x = truncated_normal(rng, &dist);
                }
            }
            t
        })
        .collect();
    ParamSet::new(tensors).expect("manifest names are unique")
}

/// Fresh encoder + MLM head parameters.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = child_rng(seed, streams::INIT, 0);
    Ok(init_tensors(&cfg.mlm_manifest(), &mut rng))
}

/// Per-tensor f64 gradients aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub names: Vec<String>,
    pub data: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            names: params.tensors().iter().map(|t| t.name.clone()).collect(),
            data: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.numel()])
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.data[i].as_slice())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for x in self.data.iter_mut().flatten() {
            *x *= s;
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, d) in self.names.iter().zip(&self.data) {
            if d.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: name.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}
