//! Embedding losses and self-supervised objectives.
//!
//! Every loss exists in two forms: a graph builder that records onto a
//! [`Tape`](crate::diffkit::Tape) (used by the trainer), and a standalone
//! function returning the value and its gradient with respect to the input
//! embeddings.
//!
//! Supervised losses average over contributing anchors; SSL losses average
//! over masked positions. Unlabeled utterances never act as anchors,
//! positives or negatives.

mod ssl;
mod supervised;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::{DiffError, Tensor};
use crate::langsim::LanguageId;

pub use ssl::{
    contrastive_loss_graph, mlm_loss_graph, plan_distractors, ssl_contrastive_loss, ssl_mlm_loss,
    ContrastiveEvaluation, ContrastiveOutcome, DistractorPlan,
};
pub use supervised::{
    angular_distance_graph, anchor_sets, ge2e_graph, ge2e_loss, hard_triplet_graph,
    semi_hard_triplet_graph, triplet_loss_hard, triplet_loss_semi_hard, AnchorSets,
    LossEvaluation, SupervisedTerm,
};

/// Default triplet margin.
pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("zero-norm embedding has no angular distance")]
    ZeroNorm,
    #[error(
        "no valid anchors: {labeled} labeled embeddings across {classes} labels; \
         the batch sampler must supply at least two utterances of one label and one of another"
    )]
    NoValidAnchors { labeled: usize, classes: usize },
    #[error("no masked positions to score")]
    EmptyMask,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedLoss {
    None,
    SemiHard,
    Hard,
    Ge2e,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslObjective {
    Contrastive,
    Mlm,
}

/// `arccos(cos(a, b)) / π`, with the cosine clamped to `[-1 + 1e-7, 1 - 1e-7]`.
pub fn angular_distance(a: &[f64], b: &[f64]) -> Result<f64, ObjectiveError> {
    if a.len() != b.len() {
        return Err(ObjectiveError::Invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(ObjectiveError::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum();
    let c = crate::diffkit::ARCCOS_CLAMP;
    Ok(dot.clamp(-1.0 + c, 1.0 - c).acos() / std::f64::consts::PI)
}

/// Pooled embeddings with labels and their cached pairwise distances.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    /// `B × D`.
    pub embeddings: Tensor,
    /// `None` marks an unlabeled utterance.
    pub labels: Vec<Option<LanguageId>>,
    /// `B × B`, symmetric with a zero diagonal.
    pub distances: Tensor,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Tensor, labels: Vec<Option<LanguageId>>) -> Result<Self, ObjectiveError> {
        if embeddings.rank() != 2 || embeddings.rows() != labels.len() {
            return Err(ObjectiveError::Invalid(format!(
                "{} labels for embeddings of shape {:?}",
                labels.len(),
                embeddings.shape()
            )));
        }
        let b = labels.len();
        let mut d = Tensor::zeros(&[b, b]);
        for i in 0..b {
            for j in (i + 1)..b {
                let v = angular_distance(embeddings.row(i), embeddings.row(j))?;
                d.data_mut()[i * b + j] = v;
                d.data_mut()[j * b + i] = v;
            }
        }
        if b == 1 && embeddings.row(0).iter().all(|x| *x == 0.0) {
            return Err(ObjectiveError::ZeroNorm);
        }
        Ok(Self {
            embeddings,
            labels,
            distances: d,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances.at(i, j)
    }
}

/// Per-step loss summary; `total = ssl_loss + lambda · supervised_loss`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub ssl_loss: f64,
    pub supervised_loss: f64,
    pub total: f64,
    pub lambda: f64,
    pub anchors_used: usize,
    pub anchors_skipped: usize,
    pub masked_positions: usize,
    pub skipped_positions: usize,
}

/// Combines the SSL and supervised terms with weight `lambda ≥ 0`.
pub fn lasr_total(ssl: f64, supervised: f64, lambda: f64) -> LossBundle {
    assert!(lambda >= 0.0, "lambda must be non-negative, got {lambda}");
    LossBundle {
        ssl_loss: ssl,
        supervised_loss: supervised,
        total: ssl + lambda * supervised,
        lambda,
        ..LossBundle::default()
    }
}

/// Weights searched for the supervised term.
pub const LAMBDA_GRID: [f64; 4] = [2.0, 4.0, 8.0, 16.0];
