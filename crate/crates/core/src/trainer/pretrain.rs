use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{adam_step, clip_global_norm, lr_schedule, AdamState, TrainConfig, TrainError};
use crate::diffkit::{Tape, Tensor, Var};
use crate::encoder::{encode_graph, plan_mask, pool_graph, EncoderParams, FrameBatch, MaskPlan};
use crate::langsim::Utterance;
use crate::mining::{BatchSampler, BatchSpec};
use crate::objectives::{
    angular_distance_graph, contrastive_loss_graph, ge2e_graph, hard_triplet_graph, mlm_loss_graph,
    plan_distractors, semi_hard_triplet_graph, ObjectiveError, SslObjective, SupervisedLoss,
};
use crate::rng;

/// Parameters, optimizer moments and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams,
    pub adam: AdamState,
    pub step: u64,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub ssl_loss: f64,
    pub supervised_loss: f64,
    pub total: f64,
    pub anchors_used: usize,
    pub skipped_anchors: usize,
    pub masked_positions: usize,
}

/// Periodic checkpoint destination: `<dir>/step_<NNNNNN>.ckpt`.
#[derive(Clone, Debug)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub every: u64,
}

impl CheckpointSink {
    pub fn path_for(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step_{step:06}.ckpt"))
    }
}

pub fn write_log_csv(path: &Path, records: &[StepRecord]) -> Result<(), TrainError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "step,lr,ssl_loss,supervised_loss,total,anchors_used,skipped_anchors")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.step, r.lr, r.ssl_loss, r.supervised_loss, r.total, r.anchors_used, r.skipped_anchors
        )?;
    }
    w.flush()?;
    Ok(())
}

struct Context<'a> {
    pool: &'a [Utterance],
    config: &'a TrainConfig,
    sampler: BatchSampler,
    spec: BatchSpec,
    codes: Vec<Vec<usize>>,
}

fn objective(step: u64) -> impl Fn(ObjectiveError) -> TrainError {
    move |source| TrainError::Objective { step, source }
}

/// Trains from `state` until `state.step == until`.
///
/// Every random draw of step `s` comes from streams keyed by `(seed, s)`, so
/// stopping, checkpointing and resuming reproduce an uninterrupted run.
pub fn pretrain(
    pool: &[Utterance],
    config: &TrainConfig,
    mut state: TrainState,
    until: u64,
    sink: Option<&CheckpointSink>,
) -> Result<(TrainState, Vec<StepRecord>), TrainError> {
    config.validate()?;
    if until > config.total_steps || until < state.step {
        return Err(TrainError::Config(format!(
            "cannot train from step {} to {until} (total_steps = {})",
            state.step, config.total_steps
        )));
    }
    if state.params.config.feature_dim != pool.first().map_or(0, |u| u.feature_dim()) {
        return Err(TrainError::Config(format!(
            "encoder expects {} features, corpus has {}",
            state.params.config.feature_dim,
            pool.first().map_or(0, |u| u.feature_dim())
        )));
    }
    let needs_codes = config.ssl == SslObjective::Mlm && (state.step + 1..=until).any(|s| config.ssl_at(s));
    let codes = if needs_codes {
        let q = state.params.quantizer();
        pool.iter().map(|u| q.quantize(&u.frames)).collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let ctx = Context {
        pool,
        config,
        sampler: BatchSampler::new(pool),
        spec: BatchSpec::with_unlabeled_share(config.batch_languages, config.batch_per_language, pool),
        codes,
    };
    let mut log = Vec::with_capacity((until - state.step) as usize);
    while state.step < until {
        log.push(train_step(&ctx, &mut state)?);
        if let Some(sink) = sink {
            if sink.every > 0 && state.step % sink.every == 0 {
                state.to_checkpoint().save(&sink.path_for(state.step))?;
            }
        }
    }
    Ok((state, log))
}

fn train_step(ctx: &Context<'_>, state: &mut TrainState) -> Result<StepRecord, TrainError> {
    let cfg = ctx.config;
    let s = state.step + 1;
    let supervised = cfg.supervised_at(s);
    let use_ssl = cfg.ssl_at(s);

    let mut batch_rng = rng::stream(cfg.seed, "batch", s);
    let idx = if supervised {
        ctx.sampler
            .sample(&ctx.spec, &mut batch_rng)
            .map_err(|source| TrainError::Mining { step: s, source })?
    } else {
        ctx.sampler
            .sample_uniform(cfg.batch_languages * cfg.batch_per_language, &mut batch_rng)
    };
    let utts: Vec<&Tensor> = idx.iter().map(|&i| &ctx.pool[i].frames).collect();
    let batch = FrameBatch::new(&utts)?;

    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape);
    let enc = &state.params.config;
    let x = tape.leaf(batch.frames.clone());
    let need_clean = supervised || (use_ssl && cfg.ssl == SslObjective::Contrastive);
    let clean = if need_clean {
        Some(encode_graph(&mut tape, &bound, enc, x, &batch, None)?)
    } else {
        None
    };

    let mut record = StepRecord {
        step: s,
        lr: lr_schedule(s, cfg.warmup_steps, cfg.peak_lr),
        ssl_loss: 0.0,
        supervised_loss: 0.0,
        total: 0.0,
        anchors_used: 0,
        skipped_anchors: 0,
        masked_positions: 0,
    };

    let mut ssl_var: Option<Var> = None;
    if use_ssl {
        let mut mask_rng = rng::stream(cfg.seed, "mask", s);
        let plans: Vec<MaskPlan> = batch
            .segments
            .iter()
            .map(|&(_, len)| plan_mask(len, cfg.mask_rate, cfg.span_length.min(len), &mut mask_rng))
            .collect();
        let masked = encode_graph(&mut tape, &bound, enc, x, &batch, Some(&plans))?;
        let rows: Vec<usize> = batch
            .segments
            .iter()
            .zip(&plans)
            .flat_map(|(&(start, _), p)| p.positions.iter().map(move |&t| start + t))
            .collect();
        record.masked_positions = rows.len();
        let loss = match cfg.ssl {
            SslObjective::Mlm => {
                let targets = idx
                    .iter()
                    .zip(&plans)
                    .flat_map(|(&i, p)| p.positions.iter().map(move |&t| ctx.codes[i][t]))
                    .collect();
                let r = tape.gather_rows(masked, &rows)?;
                let logits = tape.matmul(r, bound.mlm_weight)?;
                let logits = tape.add(logits, bound.mlm_bias)?;
                mlm_loss_graph(&mut tape, logits, targets).map_err(objective(s))?
            }
            SslObjective::Contrastive => {
                let r = tape.gather_rows(masked, &rows)?;
                let context = tape.matmul(r, bound.contrastive_weight)?;
                let latents = tape.gather_rows(clean.expect("clean pass"), &rows)?;
                let sizes: Vec<usize> = plans.iter().map(MaskPlan::len).collect();
                let plan = plan_distractors(
                    &sizes,
                    cfg.distractors,
                    &mut rng::stream(cfg.seed, "distractors", s),
                );
                contrastive_loss_graph(&mut tape, context, latents, &plan, cfg.temperature)
                    .map_err(objective(s))?
                    .loss
            }
        };
        record.ssl_loss = tape.value(loss).item().expect("scalar");
        ssl_var = Some(loss);
    }

    let mut sup_var: Option<Var> = None;
    if supervised {
        let h = pool_graph(&mut tape, clean.expect("clean pass"), &batch)?;
        let labels: Vec<_> = idx.iter().map(|&i| ctx.pool[i].label).collect();
        let d = angular_distance_graph(&mut tape, h).map_err(objective(s))?;
        let term = match cfg.supervised_loss {
            SupervisedLoss::Hard => hard_triplet_graph(&mut tape, d, &labels, cfg.margin),
            SupervisedLoss::SemiHard => semi_hard_triplet_graph(
                &mut tape,
                d,
                &labels,
                cfg.margin,
                &mut rng::stream(cfg.seed, "semi-hard", s),
            ),
            SupervisedLoss::Ge2e => ge2e_graph(&mut tape, d, &labels, cfg.ge2e_similarity_variant),
            SupervisedLoss::None => unreachable!("supervised_at excludes none"),
        }
        .map_err(objective(s))?;
        record.supervised_loss = tape.value(term.loss).item().expect("scalar");
        record.anchors_used = term.anchors.len();
        record.skipped_anchors = term.anchors_skipped;
        sup_var = Some(tape.scale(term.loss, cfg.lambda)?);
    }

    let total = match (ssl_var, sup_var) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("every step trains at least one term"),
    };
    record.total = tape.value(total).item().expect("scalar");

    let grads = tape.backward(total)?;
    let mut g: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.wrt(v)).collect();
    drop(tape);
    clip_global_norm(&mut g, cfg.clip_norm);
    let mut blocks: Vec<&mut Tensor> = state.params.blocks_mut().into_iter().map(|(_, t)| t).collect();
    adam_step(&mut blocks, &g, &mut state.adam, record.lr)?;
    state.step = s;
    Ok(record)
}
