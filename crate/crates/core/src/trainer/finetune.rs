use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{adam_step, clip_global_norm, lr_schedule, AdamState, TrainError};
use crate::diffkit::{Tape, Tensor};
use crate::encoder::{embed_utterances, encode_graph, pool_graph, EncoderParams, FrameBatch};
use crate::langsim::Utterance;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Train only the classifier on frozen pooled embeddings.
    HeadOnly,
    /// Train the encoder and the classifier together.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub mode: FinetuneMode,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            warmup_steps: 100,
            peak_lr: 1e-2,
            mode: FinetuneMode::HeadOnly,
            seed: 0,
        }
    }
}

fn labels_of(train: &[Utterance], classes: usize) -> Result<Vec<usize>, TrainError> {
    train
        .iter()
        .map(|u| match u.label {
            Some(l) if (l as usize) < classes => Ok(l as usize),
            other => Err(TrainError::Label {
                utterance_id: u.utterance_id,
                label: other.map_or("none".to_string(), |l| l.to_string()),
                classes,
            }),
        })
        .collect()
}

/// Minimizes classifier cross-entropy on pooled embeddings of `train`.
///
/// The classifier head is re-initialized from `config.seed` first; with zero
/// steps that fresh head is all that changes.
pub fn finetune(
    params: &EncoderParams,
    train: &[Utterance],
    config: &FinetuneConfig,
) -> Result<EncoderParams, TrainError> {
    if train.is_empty() || config.batch_size == 0 || !(config.peak_lr > 0.0) || config.warmup_steps == 0 {
        return Err(TrainError::Config(
            "fine-tuning needs data, a positive batch size, peak_lr and warmup".into(),
        ));
    }
    let labels = labels_of(train, params.config.num_classes)?;
    let mut out = params.clone();
    out.reset_classifier(rng::derive_seed(config.seed, "finetune-head", 0));
    if config.steps == 0 {
        return Ok(out);
    }
    let batch_size = config.batch_size.min(train.len());
    match config.mode {
        FinetuneMode::HeadOnly => {
            let frames: Vec<&Tensor> = train.iter().map(|u| &u.frames).collect();
            let emb = embed_utterances(&out, &frames)?;
            let mut adam = AdamState::new([
                ("classifier.weight".to_string(), &out.classifier_weight),
                ("classifier.bias".to_string(), &out.classifier_bias),
            ]);
            for s in 1..=config.steps {
                let pick = index::sample(&mut rng::stream(config.seed, "finetune-batch", s), train.len(), batch_size);
                let d = emb.cols();
                let mut rows = Vec::with_capacity(batch_size * d);
                let mut targets = Vec::with_capacity(batch_size);
                for i in pick.iter() {
                    rows.extend_from_slice(emb.row(i));
                    targets.push(labels[i]);
                }
                let mut tape = Tape::new();
                let h = tape.leaf(Tensor::matrix(batch_size, d, rows)?);
                let w = tape.leaf(out.classifier_weight.clone());
                let b = tape.leaf(out.classifier_bias.clone());
                let logits = tape.matmul(h, w)?;
                let logits = tape.add(logits, b)?;
                let ce = tape.softmax_cross_entropy(logits, targets)?;
                let loss = tape.mean_all(ce)?;
                let grads = tape.backward(loss)?;
                let mut g = vec![grads.wrt(w), grads.wrt(b)];
                clip_global_norm(&mut g, 5.0);
                let lr = lr_schedule(s, config.warmup_steps, config.peak_lr);
                adam_step(&mut [&mut out.classifier_weight, &mut out.classifier_bias], &g, &mut adam, lr)?;
            }
        }
        FinetuneMode::Full => {
            let mut adam = AdamState::new(out.blocks());
            for s in 1..=config.steps {
                let pick = index::sample(&mut rng::stream(config.seed, "finetune-batch", s), train.len(), batch_size);
                let frames: Vec<&Tensor> = pick.iter().map(|i| &train[i].frames).collect();
                let targets: Vec<usize> = pick.iter().map(|i| labels[i]).collect();
                let batch = FrameBatch::new(&frames)?;
                let mut tape = Tape::new();
                let bound = out.bind(&mut tape);
                let x = tape.leaf(batch.frames.clone());
                let z = encode_graph(&mut tape, &bound, &out.config, x, &batch, None)?;
                let h = pool_graph(&mut tape, z, &batch)?;
                let logits = tape.matmul(h, bound.classifier_weight)?;
                let logits = tape.add(logits, bound.classifier_bias)?;
                let ce = tape.softmax_cross_entropy(logits, targets)?;
                let loss = tape.mean_all(ce)?;
                let grads = tape.backward(loss)?;
                let mut g: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.wrt(v)).collect();
                drop(tape);
                clip_global_norm(&mut g, 5.0);
                let lr = lr_schedule(s, config.warmup_steps, config.peak_lr);
                let mut blocks: Vec<&mut Tensor> = out.blocks_mut().into_iter().map(|(_, t)| t).collect();
                adam_step(&mut blocks, &g, &mut adam, lr)?;
            }
        }
    }
    Ok(out)
}

/// Softmax posteriors (`B × L`) of the classifier head over pooled embeddings.
pub fn posteriors(params: &EncoderParams, utterances: &[&Tensor]) -> Result<Tensor, TrainError> {
    let emb = embed_utterances(params, utterances)?;
    let l = params.config.num_classes;
    let mut out = Tensor::zeros(&[emb.rows(), l]);
    for r in 0..emb.rows() {
        let h = emb.row(r);
        let mut logits: Vec<f64> = (0..l)
            .map(|c| {
                params.classifier_bias.data()[c]
                    + h.iter()
                        .enumerate()
                        .map(|(k, x)| x * params.classifier_weight.at(k, c))
                        .sum::<f64>()
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        logits.iter_mut().for_each(|v| *v = (*v - m).exp());
        let z: f64 = logits.iter().sum();
        out.row_mut(r).iter_mut().zip(&logits).for_each(|(o, v)| *o = v / z);
    }
    Ok(out)
}
