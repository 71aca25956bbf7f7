//! Adam, the learning-rate schedule, LASR pre-training and fine-tuning.

mod finetune;
mod pretrain;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::Tensor;
use crate::encoder::{Checkpoint, EncoderError, EncoderParams};
use crate::mining::MiningError;
use crate::objectives::{ObjectiveError, SslObjective, SupervisedLoss};

pub use finetune::{finetune, posteriors, FinetuneConfig, FinetuneMode};
pub use pretrain::{pretrain, write_log_csv, CheckpointSink, StepRecord, TrainState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in block `{block}` at step {step}")]
    NonFinite { block: String, step: u64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("label {label} of utterance {utterance_id} outside [0, {classes})")]
    Label {
        utterance_id: u64,
        label: String,
        classes: usize,
    },
    #[error("step {step}: {source}")]
    Objective {
        step: u64,
        #[source]
        source: ObjectiveError,
    },
    #[error("step {step}: {source}")]
    Mining {
        step: u64,
        #[source]
        source: MiningError,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<crate::diffkit::DiffError> for TrainError {
    fn from(e: crate::diffkit::DiffError) -> Self {
        TrainError::Encoder(EncoderError::from(e))
    }
}

/// `peak · min(step / warmup, sqrt(warmup / step))`.
pub fn lr_schedule(step: u64, warmup_steps: u64, peak_lr: f64) -> f64 {
    assert!(step >= 1, "steps are numbered from 1");
    assert!(warmup_steps >= 1, "warmup must be at least one step");
    let s = step as f64;
    let w = warmup_steps as f64;
    peak_lr * (s / w).min((w / s).sqrt())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per named block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub names: Vec<String>,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(blocks: impl IntoIterator<Item = (String, &'a Tensor)>) -> Self {
        let mut names = Vec::new();
        let mut first = Vec::new();
        for (n, t) in blocks {
            names.push(n);
            first.push(Tensor::zeros(t.shape()));
        }
        Self {
            names,
            second: first.clone(),
            first,
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    /// Moments as extra checkpoint blocks.
    pub fn to_blocks(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam.step".to_string(), Tensor::vector(vec![self.step as f64]))];
        for (n, m) in self.names.iter().zip(&self.first) {
            out.push((format!("adam.m.{n}"), m.clone()));
        }
        for (n, v) in self.names.iter().zip(&self.second) {
            out.push((format!("adam.v.{n}"), v.clone()));
        }
        out
    }

    /// Restores moments for `names` from checkpoint extras.
    pub fn from_blocks(names: &[String], extra: &[(String, Tensor)]) -> Result<Self, TrainError> {
        let find = |key: String| {
            extra
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| TrainError::Config(format!("checkpoint lacks optimizer block {key}")))
        };
        let step = find("adam.step".into())?.data()[0] as u64;
        Ok(Self {
            names: names.to_vec(),
            first: names.iter().map(|n| find(format!("adam.m.{n}"))).collect::<Result<_, _>>()?,
            second: names.iter().map(|n| find(format!("adam.v.{n}"))).collect::<Result<_, _>>()?,
            step,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        })
    }
}

/// One bias-corrected Adam update of `params` (in `state.names` order).
///
/// Gradients are checked for NaN/inf first; nothing is modified on error.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != state.names.len() || grads.len() != state.names.len() {
        return Err(TrainError::Config(format!(
            "{} params and {} grads for {} optimizer blocks",
            params.len(),
            grads.len(),
            state.names.len()
        )));
    }
    for ((name, p), g) in state.names.iter().zip(params.iter()).zip(grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::Config(format!(
                "block {name}: gradient shape {:?} differs from parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFinite {
                block: name.clone(),
                step: state.step + 1,
            });
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first[i].data_mut();
        for (m, &g) in m.iter_mut().zip(g) {
            *m = b1 * *m + (1.0 - b1) * g;
        }
        let v = state.second[i].data_mut();
        for (v, &g) in v.iter_mut().zip(g) {
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
        let (m, v) = (state.first[i].data(), state.second[i].data());
        for ((x, &m), &v) in p.data_mut().iter_mut().zip(m).zip(v) {
            *x -= lr * (m / c1) / ((v / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Last step of pre-training (phases included).
    pub total_steps: u64,
    /// Steps `1..=ssl_only_steps` train the SSL objective alone.
    pub ssl_only_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub lambda: f64,
    pub supervised_loss: SupervisedLoss,
    pub ssl: SslObjective,
    /// Keep the SSL term during the supervised phase (off for supervised-only ablations).
    pub ssl_in_lasr_phase: bool,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub margin: f64,
    pub ge2e_similarity_variant: bool,
    pub mask_rate: f64,
    pub span_length: usize,
    pub distractors: usize,
    pub temperature: f64,
    /// P: languages per labeled batch.
    pub batch_languages: usize,
    /// K: utterances per language.
    pub batch_per_language: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 3000,
            ssl_only_steps: 2000,
            warmup_steps: 300,
            peak_lr: 3e-3,
            lambda: 16.0,
            supervised_loss: SupervisedLoss::Hard,
            ssl: SslObjective::Mlm,
            ssl_in_lasr_phase: true,
            seed: 0,
            checkpoint_every: 0,
            margin: crate::objectives::DEFAULT_MARGIN,
            ge2e_similarity_variant: false,
            mask_rate: 0.15,
            span_length: 3,
            distractors: 5,
            temperature: 0.1,
            batch_languages: 8,
            batch_per_language: 4,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps.max(1) {
            return fail(format!(
                "warmup_steps ({}) must lie in [1, total_steps = {})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.peak_lr > 0.0) {
            return fail(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.ssl_only_steps > self.total_steps {
            return fail("ssl_only_steps exceeds total_steps".into());
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) || self.span_length == 0 {
            return fail("mask_rate must lie in (0, 1) and span_length be positive".into());
        }
        if self.distractors == 0 || !(self.temperature > 0.0) {
            return fail("distractors and temperature must be positive".into());
        }
        if !(self.margin >= 0.0) || !(self.clip_norm > 0.0) {
            return fail("margin must be non-negative and clip_norm positive".into());
        }
        Ok(())
    }

    /// Whether the supervised term is part of the objective at `step`.
    pub fn supervised_at(&self, step: u64) -> bool {
        step > self.ssl_only_steps && self.lambda > 0.0 && self.supervised_loss != SupervisedLoss::None
    }

    /// Whether the SSL term is part of the objective at `step`.
    pub fn ssl_at(&self, step: u64) -> bool {
        !self.supervised_at(step) || self.ssl_in_lasr_phase
    }
}

/// Fresh parameters and optimizer state.
pub fn initial_state(encoder: &crate::encoder::EncoderConfig, seed: u64) -> Result<TrainState, TrainError> {
    let params = EncoderParams::init(encoder, seed)?;
    let adam = AdamState::new(params.blocks());
    Ok(TrainState {
        params,
        adam,
        step: 0,
    })
}

impl TrainState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            step: self.step,
            extra: self.adam.to_blocks(),
        }
    }

    /// Restores training state; a checkpoint without optimizer blocks starts fresh moments.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, TrainError> {
        let names = ckpt.params.block_names();
        let adam = if ckpt.extra.iter().any(|(n, _)| n == "adam.step") {
            AdamState::from_blocks(&names, &ckpt.extra)?
        } else {
            AdamState::new(ckpt.params.blocks())
        };
        Ok(Self {
            params: ckpt.params,
            adam,
            step: ckpt.step,
        })
    }
}
