use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use super::ObjectiveError;
use crate::diffkit::{Tape, Tensor, Var};

/// Mean softmax cross-entropy of `M × V` logits against code ids.
pub fn mlm_loss_graph(tape: &mut Tape, logits: Var, targets: Vec<usize>) -> Result<Var, ObjectiveError> {
    if targets.is_empty() {
        return Err(ObjectiveError::EmptyMask);
    }
    let per_row = tape.softmax_cross_entropy(logits, targets)?;
    Ok(tape.mean_all(per_row)?)
}

/// MLM loss value and its gradient with respect to the logits.
pub fn ssl_mlm_loss(predictions: &Tensor, targets: &[usize]) -> Result<(f64, Tensor), ObjectiveError> {
    if predictions.rank() != 2 || predictions.rows() != targets.len() {
        return Err(ObjectiveError::Invalid(format!(
            "{} targets for logits of shape {:?}",
            targets.len(),
            predictions.shape()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(predictions.clone());
    let loss = mlm_loss_graph(&mut tape, x, targets.to_vec())?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item().expect("scalar"), grads.wrt(x)))
}

/// Distractor rows for every scored masked position.
///
/// Rows index the stacked `M × D` context and latent matrices, where each
/// utterance's masked positions occupy a contiguous run of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DistractorPlan {
    /// `(row, distractor rows)`; distractors come from the same utterance.
    pub rows: Vec<(usize, Vec<usize>)>,
    /// Positions with no other masked position to contrast against.
    pub skipped: usize,
}

/// Draws `min(K, n − 1)` distractors per position, uniformly without
/// replacement from the other masked positions of the same utterance.
/// `group_sizes[u]` is the number of masked positions of utterance `u`.
pub fn plan_distractors<R: Rng>(group_sizes: &[usize], k: usize, rng: &mut R) -> DistractorPlan {
    assert!(k >= 1, "need at least one distractor");
    let mut rows = Vec::new();
    let mut skipped = 0;
    let mut start = 0;
    for &n in group_sizes {
        for t in 0..n {
            if n < 2 {
                skipped += 1;
                continue;
            }
            let take = k.min(n - 1);
            let picks = index::sample(rng, n - 1, take)
                .into_iter()
                .map(|j| start + if j >= t { j + 1 } else { j })
                .collect();
            rows.push((start + t, picks));
        }
        start += n;
    }
    DistractorPlan { rows, skipped }
}

/// Recorded contrastive loss with position accounting.
#[derive(Clone, Debug)]
pub struct ContrastiveOutcome {
    pub loss: Var,
    pub positions: usize,
    pub skipped: usize,
}

/// InfoNCE over cosine similarities scaled by `1 / temperature`.
///
/// The target of row `t` is `latents[t]`; its distractors come from `plan`.
pub fn contrastive_loss_graph(
    tape: &mut Tape,
    context: Var,
    latents: Var,
    plan: &DistractorPlan,
    temperature: f64,
) -> Result<ContrastiveOutcome, ObjectiveError> {
    if !(temperature > 0.0) {
        return Err(ObjectiveError::Invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if plan.rows.is_empty() {
        return Err(ObjectiveError::EmptyMask);
    }
    if tape.value(context).shape() != tape.value(latents).shape() {
        return Err(ObjectiveError::Invalid(format!(
            "context {:?} and latents {:?} differ in shape",
            tape.value(context).shape(),
            tape.value(latents).shape()
        )));
    }
    let m = tape.value(context).rows();
    let c = tape.normalize_rows(context)?;
    let z = tape.normalize_rows(latents)?;
    let cos = tape.matmul_t(c, false, z, true)?;
    let logits = tape.scale(cos, 1.0 / temperature)?;

    // Rows with fewer distractors are scored in their own group.
    let mut by_width: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for (t, ds) in &plan.rows {
        let idx = by_width.entry(ds.len()).or_default();
        idx.push((t * m + t) as u32);
        idx.extend(ds.iter().map(|&d| (t * m + d) as u32));
    }
    let mut total: Option<Var> = None;
    for (width, idx) in by_width {
        let n = idx.len() / (width + 1);
        let g = tape.gather(logits, idx, vec![n, width + 1])?;
        let ce = tape.softmax_cross_entropy(g, vec![0; n])?;
        let s = tape.sum(ce)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let positions = plan.rows.len();
    let loss = tape.scale(total.expect("at least one group"), 1.0 / positions as f64)?;
    Ok(ContrastiveOutcome {
        loss,
        positions,
        skipped: plan.skipped,
    })
}

/// Contrastive loss value with gradients for context and latents.
#[derive(Clone, Debug)]
pub struct ContrastiveEvaluation {
    pub value: f64,
    pub grad_context: Tensor,
    pub grad_latents: Tensor,
    pub positions: usize,
    pub skipped: usize,
}

pub fn ssl_contrastive_loss<R: Rng>(
    context: &Tensor,
    latents: &Tensor,
    group_sizes: &[usize],
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<ContrastiveEvaluation, ObjectiveError> {
    if context.rank() != 2 || group_sizes.iter().sum::<usize>() != context.rows() {
        return Err(ObjectiveError::Invalid(format!(
            "group sizes {group_sizes:?} do not cover context of shape {:?}",
            context.shape()
        )));
    }
    let plan = plan_distractors(group_sizes, k, rng);
    let mut tape = Tape::new();
    let c = tape.leaf(context.clone());
    let z = tape.leaf(latents.clone());
    let out = contrastive_loss_graph(&mut tape, c, z, &plan, temperature)?;
    let grads = tape.backward(out.loss)?;
    Ok(ContrastiveEvaluation {
        value: tape.value(out.loss).item().expect("scalar"),
        grad_context: grads.wrt(c),
        grad_latents: grads.wrt(z),
        positions: out.positions,
        skipped: out.skipped,
    })
}
