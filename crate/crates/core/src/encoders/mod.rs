//! Text and image towers mapping into a shared unit-norm embedding space.
//!
//! Both towers are built as subgraphs of a [`Graph`] so that training can
//! differentiate them together with the loss. Parameters live in a flat
//! name-keyed map; every graph declares each parameter as an input with the
//! same name.
//!
//! PAD handling: each sequence is trimmed to its visible ids before it
//! enters the graph. Attention therefore never sees PAD keys, which is
//! exactly what a −∞ logit mask achieves, and padded length has no effect on
//! the embedding.

mod checkpoint;
mod image;
mod text;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Bindings, DenseArray, Graph, NodeId, NumericsError};
use crate::tokenizer::{TokenId, TokenSeq};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub(crate) use image::image_tower;
pub(crate) use text::text_tower;

/// Standard deviation of the normal initializer for weights and embeddings.
pub const INIT_STD: f64 = 0.02;
const ENCODE_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub context_length: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub output_dim: usize,
}

impl TextEncoderConfig {
    /// Default tower: width 64, 2 layers, 4 heads, 32-d output.
    pub fn new(vocab_size: usize, context_length: usize) -> Self {
        Self {
            context_length,
            vocab_size,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
            output_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |msg: String| Err(EncoderError::Config(msg));
        if self.context_length < 3 {
            return fail(format!("context_length {} < 3", self.context_length));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        for (name, value) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("ffn_dim", self.ffn_dim),
            ("output_dim", self.output_dim),
        ] {
            if value == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Linear layers; GELU between consecutive ones.
    pub num_layers: usize,
    pub output_dim: usize,
}

impl ImageEncoderConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 64,
            num_layers: 2,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.num_layers == 0 {
            return Err(EncoderError::Config(
                "image input_dim, output_dim and num_layers must be positive".into(),
            ));
        }
        if self.num_layers > 1 && self.hidden_dim == 0 {
            return Err(EncoderError::Config("image hidden_dim must be positive".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.num_layers)
            .map(|i| {
                let fan_in = if i == 0 { self.input_dim } else { self.hidden_dim };
                let fan_out = if i + 1 == self.num_layers {
                    self.output_dim
                } else {
                    self.hidden_dim
                };
                (fan_in, fan_out)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn param_specs(text: &TextEncoderConfig, image: &ImageEncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = text.embed_dim;
    let mut specs = vec![
        ("text.tok_emb".to_string(), vec![text.vocab_size, d], Init::Normal),
        ("text.pos_emb".to_string(), vec![text.context_length, d], Init::Normal),
    ];
    for layer in 0..text.num_layers {
        let p = |s: &str| format!("text.block{layer}.{s}");
        specs.push((p("ln1.g"), vec![d], Init::Ones));
        specs.push((p("ln1.b"), vec![d], Init::Zeros));
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((p(&format!("attn.{w}")), vec![d, d], Init::Normal));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            specs.push((p(&format!("attn.{b}")), vec![d], Init::Zeros));
        }
        specs.push((p("ln2.g"), vec![d], Init::Ones));
        specs.push((p("ln2.b"), vec![d], Init::Zeros));
        specs.push((p("ffn.w1"), vec![d, text.ffn_dim], Init::Normal));
        specs.push((p("ffn.b1"), vec![text.ffn_dim], Init::Zeros));
        specs.push((p("ffn.w2"), vec![text.ffn_dim, d], Init::Normal));
        specs.push((p("ffn.b2"), vec![d], Init::Zeros));
    }
    specs.push(("text.ln_final.g".into(), vec![d], Init::Ones));
    specs.push(("text.ln_final.b".into(), vec![d], Init::Zeros));
    specs.push(("text.proj".into(), vec![d, text.output_dim], Init::Normal));
    for (i, (fan_in, fan_out)) in image.layer_dims().into_iter().enumerate() {
        specs.push((format!("image.layer{i}.w"), vec![fan_in, fan_out], Init::Normal));
        specs.push((format!("image.layer{i}.b"), vec![fan_out], Init::Zeros));
    }
    specs
}

/// Name-keyed parameter arrays of both towers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    arrays: BTreeMap<String, DenseArray>,
}

impl Params {
    pub fn from_map(arrays: BTreeMap<String, DenseArray>) -> Self {
        Self { arrays }
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.arrays.get_mut(name)
    }

    pub fn map(&self) -> &BTreeMap<String, DenseArray> {
        &self.arrays
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseArray)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut DenseArray)> {
        self.arrays.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(DenseArray::len).sum()
    }

    /// Checks that names and shapes agree with the configs.
    pub fn check(&self, text: &TextEncoderConfig, image: &ImageEncoderConfig) -> Result<(), EncoderError> {
        let specs = param_specs(text, image);
        if specs.len() != self.arrays.len() {
            return Err(EncoderError::Config(format!(
                "configs imply {} parameter arrays, found {}",
                specs.len(),
                self.arrays.len()
            )));
        }
        for (name, shape, _) in specs {
            match self.arrays.get(&name) {
                Some(a) if a.shape() == shape.as_slice() => {}
                Some(a) => {
                    return Err(EncoderError::Config(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        a.shape()
                    )))
                }
                None => return Err(EncoderError::Config(format!("parameter {name} missing"))),
            }
        }
        Ok(())
    }

    /// Declares every parameter as a graph input of the same name.
    pub fn declare(&self, g: &mut Graph) -> Result<BTreeMap<String, NodeId>, EncoderError> {
        let mut nodes = BTreeMap::new();
        for (name, array) in &self.arrays {
            nodes.insert(name.clone(), g.input(name, array.shape())?);
        }
        Ok(nodes)
    }
}

/// Deterministic initialization: normal(0, 0.02²) weights and embeddings,
/// zero biases, unit LayerNorm gains.
///
/// Each array draws from its own stream keyed by name, so positional rows are
/// shared prefixes across context lengths and adding a parameter never
/// perturbs the others.
pub fn init_params(text: &TextEncoderConfig, image: &ImageEncoderConfig, seed: u64) -> Result<Params, EncoderError> {
    text.validate()?;
    image.validate()?;
    if text.output_dim != image.output_dim {
        return Err(EncoderError::Config(format!(
            "text output_dim {} differs from image output_dim {}",
            text.output_dim, image.output_dim
        )));
    }
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut arrays = BTreeMap::new();
    for (name, shape, init) in param_specs(text, image) {
        let len: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
            Init::Normal => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(crate::fnv1a(name.as_bytes()));
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        arrays.insert(name, DenseArray::new(shape, data)?);
    }
    Ok(Params { arrays })
}

/// Weight-decay eligibility: matrices only.
pub fn is_decayed(array: &DenseArray) -> bool {
    array.rank() == 2
}

pub(crate) fn validate_sequences(cfg: &TextEncoderConfig, batch: &[&[TokenId]]) -> Result<(), EncoderError> {
    for (i, ids) in batch.iter().enumerate() {
        if ids.len() < 2 {
            return Err(EncoderError::Usage(format!(
                "sequence {i} has {} visible ids; BOS and EOS are required",
                ids.len()
            )));
        }
        if ids.len() > cfg.context_length {
            return Err(EncoderError::Usage(format!(
                "sequence {i} has {} visible ids but context_length is {}; truncate when encoding",
                ids.len(),
                cfg.context_length
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(EncoderError::Usage(format!(
                "sequence {i} contains id {bad} outside vocab_size {}",
                cfg.vocab_size
            )));
        }
    }
    Ok(())
}

/// Unit-norm text embeddings, one row per sequence.
pub fn text_encode(params: &Params, cfg: &TextEncoderConfig, batch: &[TokenSeq]) -> Result<DenseArray, EncoderError> {
    let visible: Vec<&[TokenId]> = batch.iter().map(TokenSeq::visible_ids).collect();
    text_encode_ids(params, cfg, &visible)
}

/// [`text_encode`] over already-trimmed visible id lists (BOS … EOS).
pub fn text_encode_ids(params: &Params, cfg: &TextEncoderConfig, batch: &[&[TokenId]]) -> Result<DenseArray, EncoderError> {
    validate_sequences(cfg, batch)?;
    let mut data = Vec::with_capacity(batch.len() * cfg.output_dim);
    for chunk in batch.chunks(ENCODE_CHUNK) {
        let mut g = Graph::new();
        let nodes = params.declare(&mut g)?;
        let out = text_tower(&mut g, cfg, &nodes, chunk)?;
        let mut bindings = Bindings::new();
        bindings.extend(params.map());
        let eval = g.evaluate(&bindings)?;
        data.extend_from_slice(eval.value(out).data());
    }
    Ok(DenseArray::new(vec![batch.len(), cfg.output_dim], data)?)
}

pub const IMAGE_INPUT: &str = "batch.images";

/// Unit-norm image embeddings, one row per feature vector.
pub fn image_encode(params: &Params, cfg: &ImageEncoderConfig, batch: &[Vec<f64>]) -> Result<DenseArray, EncoderError> {
    if let Some((i, v)) = batch.iter().enumerate().find(|(_, v)| v.len() != cfg.input_dim) {
        return Err(EncoderError::Usage(format!(
            "image {i} has {} features, expected {}",
            v.len(),
            cfg.input_dim
        )));
    }
    let mut data = Vec::with_capacity(batch.len() * cfg.output_dim);
    for chunk in batch.chunks(ENCODE_CHUNK) {
        let mut g = Graph::new();
        let nodes = params.declare(&mut g)?;
        let features = DenseArray::from_rows(chunk)?;
        let input = g.input(IMAGE_INPUT, features.shape())?;
        let out = image_tower(&mut g, cfg, &nodes, input)?;
        let mut bindings = Bindings::new();
        bindings.extend(params.map());
        bindings.insert(IMAGE_INPUT, &features);
        let eval = g.evaluate(&bindings)?;
        data.extend_from_slice(eval.value(out).data());
    }
    Ok(DenseArray::new(vec![batch.len(), cfg.output_dim], data)?)
}

/// Configs, parameters and the learnable temperature exponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
    pub params: Params,
    pub log_scale: f64,
}

impl Model {
    pub fn init(text: TextEncoderConfig, image: ImageEncoderConfig, seed: u64, log_scale: f64) -> Result<Self, EncoderError> {
        let params = init_params(&text, &image, seed)?;
        Ok(Self {
            text,
            image,
            params,
            log_scale,
        })
    }

    pub fn encode_texts(&self, batch: &[TokenSeq]) -> Result<DenseArray, EncoderError> {
        text_encode(&self.params, &self.text, batch)
    }

    pub fn encode_images(&self, batch: &[Vec<f64>]) -> Result<DenseArray, EncoderError> {
        image_encode(&self.params, &self.image, batch)
    }

    /// The same model restricted to a shorter text window: positional rows
    /// beyond `context_length` are dropped. Growing the window is an error
    /// since those positions were never trained.
    pub fn with_context_length(&self, context_length: usize) -> Result<Self, EncoderError> {
        if context_length > self.text.context_length || context_length < 3 {
            return Err(EncoderError::Config(format!(
                "context length {context_length} must lie in 3..={} for this model",
                self.text.context_length
            )));
        }
        let mut model = self.clone();
        model.text.context_length = context_length;
        let pos = model
            .params
            .get_mut("text.pos_emb")
            .ok_or_else(|| EncoderError::Config("parameter text.pos_emb missing".into()))?;
        let width = pos.shape()[1];
        let rows = pos.data()[..context_length * width].to_vec();
        *pos = DenseArray::new(vec![context_length, width], rows)?;
        model.params.check(&model.text, &model.image)?;
        Ok(model)
    }
}
