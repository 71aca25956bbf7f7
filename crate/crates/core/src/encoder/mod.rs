//! Frame encoder, mean pooling, input masking and the frozen random quantizer.
//!
//! The encoder is a per-frame MLP over a window of `2c + 1` stacked frames
//! (zero-padded at utterance edges): `(2c+1)·F → H → … → H → D`, with the
//! configured activation after every hidden layer and a linear output layer.
//! Utterances in a batch are concatenated row-wise so each layer is a single
//! matrix product; context windows never cross utterance boundaries.

mod checkpoint;
mod mask;
mod quantizer;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::{DiffError, Tape, Tensor, Var, GATHER_ZERO};
use crate::rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use mask::{plan_mask, MaskPlan};
pub use quantizer::RandomQuantizer;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("feature dimension mismatch: encoder expects {expected}, got {got}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("empty frame sequence")]
    EmptySequence,
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Linear => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Linear),
            _ => None,
        }
    }

    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Linear => Ok(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    /// Frames of context on each side.
    pub context: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub embed_dim: usize,
    /// Quantizer codebook size and MLM head width.
    pub vocab_size: usize,
    pub num_classes: usize,
    pub quantizer_dim: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 20,
            context: 2,
            hidden_dim: 64,
            hidden_layers: 2,
            embed_dim: 32,
            vocab_size: 64,
            num_classes: 12,
            quantizer_dim: 16,
            activation: Activation::Tanh,
        }
    }
}

impl EncoderConfig {
    pub fn input_dim(&self) -> usize {
        (2 * self.context + 1) * self.feature_dim
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
            ("quantizer_dim", self.quantizer_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.hidden_layers > 0 && self.hidden_dim == 0 {
            return Err(EncoderError::InvalidConfig("hidden_dim must be positive".into()));
        }
        Ok(())
    }

    /// `(in, out)` of every dense layer, input first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim();
        for _ in 0..self.hidden_layers {
            dims.push((fan_in, self.hidden_dim));
            fan_in = self.hidden_dim;
        }
        dims.push((fan_in, self.embed_dim));
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All trainable parameters plus the seed of the frozen quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub quantizer_seed: u64,
    pub layers: Vec<Dense>,
    pub mask_embedding: Tensor,
    pub mlm_weight: Tensor,
    pub mlm_bias: Tensor,
    pub contrastive_weight: Tensor,
    pub classifier_weight: Tensor,
    pub classifier_bias: Tensor,
}

fn gaussian<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

impl EncoderParams {
    /// Weights ~ N(0, 1/fan_in), biases zero, mask embedding ~ N(0, 0.01).
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = rng::stream(seed, "encoder-init", 0);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Dense {
                weight: gaussian(&mut rng, &[i, o], (1.0 / i as f64).sqrt()),
                bias: Tensor::zeros(&[o]),
            })
            .collect();
        let d = config.embed_dim;
        let mask_embedding = gaussian(&mut rng, &[config.feature_dim], 0.1);
        let mlm_weight = gaussian(&mut rng, &[d, config.vocab_size], (1.0 / d as f64).sqrt());
        let contrastive_weight = gaussian(&mut rng, &[d, d], (1.0 / d as f64).sqrt());
        let mut params = Self {
            config: config.clone(),
            quantizer_seed: rng::derive_seed(seed, "quantizer", 0),
            layers,
            mask_embedding,
            mlm_weight,
            mlm_bias: Tensor::zeros(&[config.vocab_size]),
            contrastive_weight,
            classifier_weight: Tensor::zeros(&[d, config.num_classes]),
            classifier_bias: Tensor::zeros(&[config.num_classes]),
        };
        params.reset_classifier(rng::derive_seed(seed, "classifier-init", 0));
        Ok(params)
    }

    /// Fresh classifier head, weights ~ N(0, 1/D), bias zero.
    pub fn reset_classifier(&mut self, seed: u64) {
        let d = self.config.embed_dim;
        let mut rng = rng::stream(seed, "classifier", 0);
        self.classifier_weight =
            gaussian(&mut rng, &[d, self.config.num_classes], (1.0 / d as f64).sqrt());
        self.classifier_bias = Tensor::zeros(&[self.config.num_classes]);
    }

    pub fn quantizer(&self) -> RandomQuantizer {
        RandomQuantizer::new(
            self.config.feature_dim,
            self.config.quantizer_dim,
            self.config.vocab_size,
            self.quantizer_seed,
        )
    }

    pub fn block_names(&self) -> Vec<String> {
        self.blocks().into_iter().map(|(n, _)| n).collect()
    }

    /// Every parameter block with its stable name, in checkpoint order.
    pub fn blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), &l.weight));
            out.push((format!("layer{i}.bias"), &l.bias));
        }
        out.push(("mask_embedding".into(), &self.mask_embedding));
        out.push(("mlm_head.weight".into(), &self.mlm_weight));
        out.push(("mlm_head.bias".into(), &self.mlm_bias));
        out.push(("contrastive_head.weight".into(), &self.contrastive_weight));
        out.push(("classifier.weight".into(), &self.classifier_weight));
        out.push(("classifier.bias".into(), &self.classifier_bias));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.weight"), &mut l.weight));
            out.push((format!("layer{i}.bias"), &mut l.bias));
        }
        out.push(("mask_embedding".into(), &mut self.mask_embedding));
        out.push(("mlm_head.weight".into(), &mut self.mlm_weight));
        out.push(("mlm_head.bias".into(), &mut self.mlm_bias));
        out.push(("contrastive_head.weight".into(), &mut self.contrastive_weight));
        out.push(("classifier.weight".into(), &mut self.classifier_weight));
        out.push(("classifier.bias".into(), &mut self.classifier_bias));
        out
    }

    /// Expected shape of every named block under `config`.
    pub fn expected_shapes(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, (a, b)) in config.layer_dims().into_iter().enumerate() {
            out.push((format!("layer{i}.weight"), vec![a, b]));
            out.push((format!("layer{i}.bias"), vec![b]));
        }
        let (d, v, l) = (config.embed_dim, config.vocab_size, config.num_classes);
        out.push(("mask_embedding".into(), vec![config.feature_dim]));
        out.push(("mlm_head.weight".into(), vec![d, v]));
        out.push(("mlm_head.bias".into(), vec![v]));
        out.push(("contrastive_head.weight".into(), vec![d, d]));
        out.push(("classifier.weight".into(), vec![d, l]));
        out.push(("classifier.bias".into(), vec![l]));
        out
    }

    /// Puts every block on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
            mask_embedding: tape.leaf(self.mask_embedding.clone()),
            mlm_weight: tape.leaf(self.mlm_weight.clone()),
            mlm_bias: tape.leaf(self.mlm_bias.clone()),
            contrastive_weight: tape.leaf(self.contrastive_weight.clone()),
            classifier_weight: tape.leaf(self.classifier_weight.clone()),
            classifier_bias: tape.leaf(self.classifier_bias.clone()),
        }
    }
}

/// Tape variables for every parameter block, in [`EncoderParams::blocks`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub layers: Vec<(Var, Var)>,
    pub mask_embedding: Var,
    pub mlm_weight: Var,
    pub mlm_bias: Var,
    pub contrastive_weight: Var,
    pub classifier_weight: Var,
    pub classifier_bias: Var,
}

impl BoundParams {
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect();
        out.extend([
            self.mask_embedding,
            self.mlm_weight,
            self.mlm_bias,
            self.contrastive_weight,
            self.classifier_weight,
            self.classifier_bias,
        ]);
        out
    }
}

/// Utterances stacked row-wise into one `N × F` matrix.
#[derive(Clone, Debug)]
pub struct FrameBatch {
    pub frames: Tensor,
    /// `(first row, length)` per utterance.
    pub segments: Vec<(usize, usize)>,
}

impl FrameBatch {
    pub fn new(utterances: &[&Tensor]) -> Result<Self, EncoderError> {
        let first = utterances.first().ok_or(EncoderError::EmptySequence)?;
        let f = first.cols();
        let mut data = Vec::with_capacity(utterances.iter().map(|u| u.numel()).sum());
        let mut segments = Vec::with_capacity(utterances.len());
        let mut start = 0;
        for u in utterances {
            if u.rank() != 2 || u.numel() == 0 {
                return Err(EncoderError::EmptySequence);
            }
            if u.cols() != f {
                return Err(EncoderError::FeatureMismatch {
                    expected: f,
                    got: u.cols(),
                });
            }
            data.extend_from_slice(u.data());
            segments.push((start, u.rows()));
            start += u.rows();
        }
        Ok(Self {
            frames: Tensor::matrix(start, f, data)?,
            segments,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Flat gather index building the stacked `(2c+1)·F` context input.
///
/// Masked frames (per utterance, positions local to it) read from row `N`,
/// which the caller provides as the mask embedding appended below the frames.
fn context_index(
    batch: &FrameBatch,
    context: usize,
    masks: Option<&[MaskPlan]>,
) -> Vec<u32> {
    let f = batch.feature_dim();
    let n = batch.num_frames();
    let width = 2 * context + 1;
    let mut index = Vec::with_capacity(n * width * f);
    let mut masked_row = Vec::new();
    for (u, &(start, len)) in batch.segments.iter().enumerate() {
        masked_row.clear();
        masked_row.resize(len, false);
        if let Some(plans) = masks {
            for &p in &plans[u].positions {
                masked_row[p] = true;
            }
        }
        for t in 0..len {
            for k in 0..width {
                let r = t as isize + k as isize - context as isize;
                if r < 0 || r >= len as isize {
                    index.extend(std::iter::repeat(GATHER_ZERO).take(f));
                    continue;
                }
                let r = r as usize;
                let src_row = if masked_row[r] { n } else { start + r };
                index.extend((src_row * f..(src_row + 1) * f).map(|i| i as u32));
            }
        }
    }
    index
}

/// Frame embeddings `Z` (`N × D`) for a whole batch.
///
/// `frames` must be a leaf holding `batch.frames`. With `masks`, masked input
/// frames are replaced by the mask embedding before context stacking.
pub fn encode_graph(
    tape: &mut Tape,
    params: &BoundParams,
    config: &EncoderConfig,
    frames: Var,
    batch: &FrameBatch,
    masks: Option<&[MaskPlan]>,
) -> Result<Var, EncoderError> {
    if batch.feature_dim() != config.feature_dim {
        return Err(EncoderError::FeatureMismatch {
            expected: config.feature_dim,
            got: batch.feature_dim(),
        });
    }
    if let Some(plans) = masks {
        if plans.len() != batch.len() {
            return Err(EncoderError::InvalidConfig(format!(
                "{} mask plans for {} utterances",
                plans.len(),
                batch.len()
            )));
        }
        for (plan, &(_, len)) in plans.iter().zip(&batch.segments) {
            if plan.positions.iter().any(|&p| p >= len) {
                return Err(EncoderError::InvalidConfig(
                    "mask position outside utterance".into(),
                ));
            }
        }
    }
    let source = match masks {
        Some(_) => {
            let row = tape.reshape(params.mask_embedding, vec![1, config.feature_dim])?;
            tape.concat_rows(frames, row)?
        }
        None => frames,
    };
    let index = context_index(batch, config.context, masks);
    let mut h = tape.gather(source, index, vec![batch.num_frames(), config.input_dim()])?;
    let last = params.layers.len() - 1;
    for (i, &(w, b)) in params.layers.iter().enumerate() {
        let lin = tape.matmul(h, w)?;
        h = tape.add(lin, b)?;
        if i < last {
            h = config.activation.apply(tape, h)?;
        }
    }
    Ok(h)
}

/// Utterance embeddings `B × D`: mean of each utterance's frame embeddings.
pub fn pool_graph(tape: &mut Tape, z: Var, batch: &FrameBatch) -> Result<Var, EncoderError> {
    Ok(tape.segment_mean(z, batch.segments.clone())?)
}

/// Frame embeddings for one utterance.
pub fn encode(
    params: &EncoderParams,
    frames: &Tensor,
    mask_plan: Option<&MaskPlan>,
) -> Result<Tensor, EncoderError> {
    if frames.rank() != 2 || frames.numel() == 0 {
        return Err(EncoderError::EmptySequence);
    }
    let batch = FrameBatch::new(&[frames])?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(batch.frames.clone());
    let masks = mask_plan.map(|m| std::slice::from_ref(m));
    let z = encode_graph(&mut tape, &bound, &params.config, x, &batch, masks)?;
    Ok(tape.value(z).clone())
}

/// Mean over the time axis of a `T × D` matrix.
pub fn pool(z: &Tensor) -> Result<Tensor, EncoderError> {
    if z.rank() != 2 || z.rows() == 0 {
        return Err(EncoderError::EmptySequence);
    }
    let mut tape = Tape::new();
    let v = tape.leaf(z.clone());
    let h = tape.mean_axis(v, 0)?;
    Ok(tape.value(h).clone())
}

/// Pooled unmasked embeddings (`B × D`) for many utterances, computed in chunks.
pub fn embed_utterances(
    params: &EncoderParams,
    utterances: &[&Tensor],
) -> Result<Tensor, EncoderError> {
    const CHUNK: usize = 64;
    let d = params.config.embed_dim;
    let mut data = Vec::with_capacity(utterances.len() * d);
    for chunk in utterances.chunks(CHUNK) {
        let batch = FrameBatch::new(chunk)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(batch.frames.clone());
        let z = encode_graph(&mut tape, &bound, &params.config, x, &batch, None)?;
        let h = pool_graph(&mut tape, z, &batch)?;
        data.extend_from_slice(tape.value(h).data());
    }
    if data.is_empty() {
        return Err(EncoderError::EmptySequence);
    }
    Ok(Tensor::matrix(utterances.len(), d, data)?)
}
