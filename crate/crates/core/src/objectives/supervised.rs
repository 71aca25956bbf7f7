use std::collections::BTreeSet;

use rand::Rng;

use super::{EmbeddingBatch, ObjectiveError};
use crate::diffkit::{Tape, Tensor, Var};
use crate::langsim::LanguageId;

/// Anchors with at least one positive and one negative in the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSets {
    pub anchors: Vec<usize>,
    /// Same-label indices per anchor, anchor itself excluded, ascending.
    pub positives: Vec<Vec<usize>>,
    /// Different-label (labeled) indices per anchor, ascending.
    pub negatives: Vec<Vec<usize>>,
    /// Labeled utterances that lacked a positive or a negative.
    pub skipped: usize,
}

pub fn anchor_sets(labels: &[Option<LanguageId>]) -> Result<AnchorSets, ObjectiveError> {
    let mut sets = AnchorSets {
        anchors: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
        skipped: 0,
    };
    for (i, li) in labels.iter().enumerate() {
        let Some(li) = li else { continue };
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (j, lj) in labels.iter().enumerate() {
            match lj {
                Some(lj) if j != i && lj == li => pos.push(j),
                Some(lj) if lj != li => neg.push(j),
                _ => {}
            }
        }
        if pos.is_empty() || neg.is_empty() {
            sets.skipped += 1;
            continue;
        }
        sets.anchors.push(i);
        sets.positives.push(pos);
        sets.negatives.push(neg);
    }
    if sets.anchors.is_empty() {
        let labeled = labels.iter().flatten().count();
        let classes = labels.iter().flatten().collect::<BTreeSet<_>>().len();
        return Err(ObjectiveError::NoValidAnchors { labeled, classes });
    }
    Ok(sets)
}

/// Recorded supervised loss plus anchor accounting.
#[derive(Clone, Debug)]
pub struct SupervisedTerm {
    /// Scalar: mean of `contributions`.
    pub loss: Var,
    /// One entry per anchor in `anchors`.
    pub contributions: Var,
    pub anchors: Vec<usize>,
    pub anchors_skipped: usize,
}

/// `B × B` matrix of angular distances between the rows of `embeddings`.
pub fn angular_distance_graph(tape: &mut Tape, embeddings: Var) -> Result<Var, ObjectiveError> {
    let unit = tape.normalize_rows(embeddings)?;
    let cos = tape.matmul_t(unit, false, unit, true)?;
    let angle = tape.arccos(cos)?;
    Ok(tape.scale(angle, std::f64::consts::FRAC_1_PI)?)
}

fn flat(b: usize, i: usize, js: &[usize]) -> Vec<usize> {
    js.iter().map(|&j| i * b + j).collect()
}

fn finish_triplet(
    tape: &mut Tape,
    pos: Var,
    neg: Var,
    gamma: f64,
    sets: AnchorSets,
) -> Result<SupervisedTerm, ObjectiveError> {
    let diff = tape.sub(pos, neg)?;
    let margin = tape.shift(diff, gamma)?;
    let contributions = tape.hinge(margin)?;
    let loss = tape.mean_all(contributions)?;
    Ok(SupervisedTerm {
        loss,
        contributions,
        anchors: sets.anchors,
        anchors_skipped: sets.skipped,
    })
}

/// Hardest positive and hardest negative per anchor:
/// `max(0, γ + max_{j∈i+} d(i,j) − min_{j∈i−} d(i,j))`.
pub fn hard_triplet_graph(
    tape: &mut Tape,
    distances: Var,
    labels: &[Option<LanguageId>],
    gamma: f64,
) -> Result<SupervisedTerm, ObjectiveError> {
    let sets = anchor_sets(labels)?;
    let b = labels.len();
    let pos_groups = sets.anchors.iter().zip(&sets.positives).map(|(&i, p)| flat(b, i, p)).collect();
    let neg_groups = sets.anchors.iter().zip(&sets.negatives).map(|(&i, n)| flat(b, i, n)).collect();
    let pos = tape.select_max(distances, pos_groups)?;
    let neg = tape.select_min(distances, neg_groups)?;
    finish_triplet(tape, pos, neg, gamma, sets)
}

/// Random positive per anchor, then the closest negative that is still
/// farther than it; falls back to the closest negative overall.
///
/// Anchors are visited in ascending index order and each draws
/// `gen_range(0..positives.len())` from `rng` over its ascending positive list.
pub fn semi_hard_triplet_graph<R: Rng>(
    tape: &mut Tape,
    distances: Var,
    labels: &[Option<LanguageId>],
    gamma: f64,
    rng: &mut R,
) -> Result<SupervisedTerm, ObjectiveError> {
    let sets = anchor_sets(labels)?;
    let b = labels.len();
    let d = tape.value(distances).clone();
    let mut pos_idx = Vec::with_capacity(sets.anchors.len());
    let mut neg_idx = Vec::with_capacity(sets.anchors.len());
    for (k, &i) in sets.anchors.iter().enumerate() {
        let positives = &sets.positives[k];
        let p = positives[rng.gen_range(0..positives.len())];
        let dp = d.at(i, p);
        let closest = |cands: &mut dyn Iterator<Item = usize>| {
            cands.fold(None::<usize>, |best, j| match best {
                Some(b) if d.at(i, b) <= d.at(i, j) => Some(b),
                _ => Some(j),
            })
        };
        let negs = &sets.negatives[k];
        let n = closest(&mut negs.iter().copied().filter(|&j| d.at(i, j) > dp))
            .or_else(|| closest(&mut negs.iter().copied()))
            .expect("anchor has negatives");
        pos_idx.push((i * b + p) as u32);
        neg_idx.push((i * b + n) as u32);
    }
    let a = sets.anchors.len();
    let pos = tape.gather(distances, pos_idx, vec![a])?;
    let neg = tape.gather(distances, neg_idx, vec![a])?;
    finish_triplet(tape, pos, neg, gamma, sets)
}

/// `1 − σ(max_{j∈i+} d(i,j)) + σ(min_{j∈i−} d(i,j))` per anchor.
///
/// With `similarity_variant`, every distance inside σ is replaced by
/// `1 − distance`.
pub fn ge2e_graph(
    tape: &mut Tape,
    distances: Var,
    labels: &[Option<LanguageId>],
    similarity_variant: bool,
) -> Result<SupervisedTerm, ObjectiveError> {
    let sets = anchor_sets(labels)?;
    let b = labels.len();
    let pos_groups = sets.anchors.iter().zip(&sets.positives).map(|(&i, p)| flat(b, i, p)).collect();
    let neg_groups = sets.anchors.iter().zip(&sets.negatives).map(|(&i, n)| flat(b, i, n)).collect();
    let mut pos = tape.select_max(distances, pos_groups)?;
    let mut neg = tape.select_min(distances, neg_groups)?;
    if similarity_variant {
        let p = tape.scale(pos, -1.0)?;
        pos = tape.shift(p, 1.0)?;
        let n = tape.scale(neg, -1.0)?;
        neg = tape.shift(n, 1.0)?;
    }
    let sp = tape.sigmoid(pos)?;
    let sn = tape.sigmoid(neg)?;
    let diff = tape.sub(sn, sp)?;
    let contributions = tape.shift(diff, 1.0)?;
    let loss = tape.mean_all(contributions)?;
    Ok(SupervisedTerm {
        loss,
        contributions,
        anchors: sets.anchors,
        anchors_skipped: sets.skipped,
    })
}

/// Loss value with its gradient with respect to the `B × D` embeddings.
#[derive(Clone, Debug)]
pub struct LossEvaluation {
    pub value: f64,
    pub grad: Tensor,
    /// `(anchor index, contribution)` for every contributing anchor.
    pub per_anchor: Vec<(usize, f64)>,
    pub anchors_skipped: usize,
}

fn evaluate_term(
    batch: &EmbeddingBatch,
    build: impl FnOnce(&mut Tape, Var) -> Result<SupervisedTerm, ObjectiveError>,
) -> Result<LossEvaluation, ObjectiveError> {
    let mut tape = Tape::new();
    let e = tape.leaf(batch.embeddings.clone());
    let d = angular_distance_graph(&mut tape, e)?;
    let term = build(&mut tape, d)?;
    let grads = tape.backward(term.loss)?;
    let contributions = tape.value(term.contributions).data();
    Ok(LossEvaluation {
        value: tape.value(term.loss).item().expect("scalar"),
        grad: grads.wrt(e),
        per_anchor: term.anchors.iter().copied().zip(contributions.iter().copied()).collect(),
        anchors_skipped: term.anchors_skipped,
    })
}

pub fn triplet_loss_hard(batch: &EmbeddingBatch, gamma: f64) -> Result<LossEvaluation, ObjectiveError> {
    evaluate_term(batch, |t, d| hard_triplet_graph(t, d, &batch.labels, gamma))
}

pub fn triplet_loss_semi_hard<R: Rng>(
    batch: &EmbeddingBatch,
    gamma: f64,
    rng: &mut R,
) -> Result<LossEvaluation, ObjectiveError> {
    evaluate_term(batch, |t, d| semi_hard_triplet_graph(t, d, &batch.labels, gamma, rng))
}

pub fn ge2e_loss(batch: &EmbeddingBatch, similarity_variant: bool) -> Result<LossEvaluation, ObjectiveError> {
    evaluate_term(batch, |t, d| ge2e_graph(t, d, &batch.labels, similarity_variant))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Graph over a fixed distance matrix (bypassing embeddings).
    fn with_distances(
        d: Vec<f64>,
        b: usize,
        f: impl FnOnce(&mut Tape, Var) -> Result<SupervisedTerm, ObjectiveError>,
    ) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let dv = tape.leaf(Tensor::matrix(b, b, d).unwrap());
        let term = f(&mut tape, dv).unwrap();
        (
            tape.value(term.loss).item().unwrap(),
            tape.value(term.contributions).data().to_vec(),
        )
    }

    #[test]
    fn hard_triplet_arithmetic() {
        // anchor 0; positives 1 (0.1), 2 (0.7); negatives 3 (0.5), 4 (0.9)
        let b = 5;
        let mut d = vec![0.0; b * b];
        for (j, v) in [(1, 0.1), (2, 0.7), (3, 0.5), (4, 0.9)] {
            d[j] = v;
            d[j * b] = v;
        }
        let labels = [Some(0), Some(0), Some(0), Some(1), Some(1)];
        let (_, contrib) = with_distances(d, b, |t, dv| hard_triplet_graph(t, dv, &labels, 0.2));
        assert!((contrib[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn hinge_inactive_when_well_separated() {
        let labels = [Some(0), Some(0), Some(1), Some(1)];
        let b = 4;
        let mut d = vec![0.0; 16];
        for i in 0..b {
            for j in 0..b {
                d[i * b + j] = if labels[i] == labels[j] { 0.0 } else { 1.0 };
            }
        }
        let (hard, _) = with_distances(d.clone(), b, |t, dv| hard_triplet_graph(t, dv, &labels, 0.0));
        assert_eq!(hard, 0.0);
        let (semi, _) = with_distances(d, b, |t, dv| {
            semi_hard_triplet_graph(t, dv, &labels, 0.3, &mut rng::stream(0, "s", 0))
        });
        assert_eq!(semi, 0.0);
    }

    #[test]
    fn semi_hard_falls_back_to_hardest_negative() {
        // anchor 0, positive 1 at 0.6, only negative 2 at 0.4
        let b = 3;
        let mut d = vec![0.0; 9];
        for (i, j, v) in [(0, 1, 0.6), (0, 2, 0.4), (1, 2, 0.8)] {
            d[i * b + j] = v;
            d[j * b + i] = v;
        }
        let labels = [Some(0), Some(0), Some(1)];
        let (_, contrib) = with_distances(d, b, |t, dv| {
            semi_hard_triplet_graph(t, dv, &labels, 0.3, &mut rng::stream(0, "s", 0))
        });
        assert!((contrib[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ge2e_arithmetic() {
        let b = 3;
        let mut d = vec![0.0; 9];
        for (i, j, v) in [(0, 1, 0.0), (0, 2, 1.0), (1, 2, 1.0)] {
            d[i * b + j] = v;
            d[j * b + i] = v;
        }
        let labels = [Some(0), Some(0), Some(1)];
        let (_, contrib) = with_distances(d, b, |t, dv| ge2e_graph(t, dv, &labels, false));
        assert!((contrib[0] - 1.2310586).abs() < 1e-7);

        let mut d = vec![0.0; 9];
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            d[i * b + j] = 0.37;
            d[j * b + i] = 0.37;
        }
        let (_, contrib) = with_distances(d, b, |t, dv| ge2e_graph(t, dv, &labels, false));
        assert!(contrib.iter().all(|c| (c - 1.0).abs() < 1e-15));
    }

    #[test]
    fn unlabeled_and_lonely_anchors_are_skipped() {
        let labels = [Some(0), Some(0), Some(1), None, None];
        let sets = anchor_sets(&labels).unwrap();
        assert_eq!(sets.anchors, vec![0, 1]);
        assert_eq!(sets.skipped, 1);
        assert!(sets.positives.iter().chain(&sets.negatives).flatten().all(|&j| j < 3));
    }

    #[test]
    fn no_anchor_is_an_error() {
        let err = anchor_sets(&[Some(0), Some(1), None]).unwrap_err();
        assert!(matches!(err, ObjectiveError::NoValidAnchors { labeled: 2, classes: 2 }));
    }
}
