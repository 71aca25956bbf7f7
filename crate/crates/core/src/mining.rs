//! Batch construction and label corruption.
//!
//! Labeled batches follow a P×K scheme: `P` languages, `K` utterances of
//! each, plus a number of unlabeled utterances. Every labeled anchor then has
//! at least one positive and one negative.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::langsim::{Corpus, LanguageId, Utterance};

#[derive(Debug, Error)]
pub enum MiningError {
    #[error(
        "cannot build a batch: {eligible} languages have at least {per_language} labeled \
         utterances, but {needed} are required"
    )]
    InsufficientLanguages {
        eligible: usize,
        needed: usize,
        per_language: usize,
    },
    #[error("invalid batch spec: {0}")]
    InvalidSpec(String),
    #[error("corruption fraction must lie in [0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("plan refers to utterance {0}, which is not a labeled pre-training utterance")]
    UnknownUtterance(u64),
    #[error("noisy labels need at least two pre-training languages, found {0}")]
    TooFewLanguages(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    /// Languages per batch (P).
    pub languages: usize,
    /// Utterances per language (K).
    pub per_language: usize,
    pub unlabeled_slots: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            languages: 8,
            per_language: 4,
            unlabeled_slots: 0,
        }
    }
}

impl BatchSpec {
    pub fn batch_size(&self) -> usize {
        self.languages * self.per_language + self.unlabeled_slots
    }

    /// Unlabeled slots proportional to the unlabeled share of `pool`.
    pub fn with_unlabeled_share(languages: usize, per_language: usize, pool: &[Utterance]) -> Self {
        let unlabeled = pool.iter().filter(|u| u.label.is_none()).count();
        let share = if pool.is_empty() {
            0.0
        } else {
            unlabeled as f64 / pool.len() as f64
        };
        Self {
            languages,
            per_language,
            unlabeled_slots: (share * (languages * per_language) as f64).round() as usize,
        }
    }
}

/// Per-language index pools over one utterance list.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    by_language: BTreeMap<LanguageId, Vec<usize>>,
    unlabeled: Vec<usize>,
    total: usize,
}

impl BatchSampler {
    pub fn new(pool: &[Utterance]) -> Self {
        let mut by_language: BTreeMap<LanguageId, Vec<usize>> = BTreeMap::new();
        let mut unlabeled = Vec::new();
        for (i, u) in pool.iter().enumerate() {
            match u.label {
                Some(l) => by_language.entry(l).or_default().push(i),
                None => unlabeled.push(i),
            }
        }
        Self {
            by_language,
            unlabeled,
            total: pool.len(),
        }
    }

    pub fn labeled_languages(&self) -> usize {
        self.by_language.len()
    }

    pub fn unlabeled_count(&self) -> usize {
        self.unlabeled.len()
    }

    /// Indices of a P×K batch plus unlabeled slots, shuffled.
    ///
    /// Unlabeled slots shrink to the pool size when the pool is smaller.
    pub fn sample<R: Rng>(&self, spec: &BatchSpec, rng: &mut R) -> Result<Vec<usize>, MiningError> {
        if spec.per_language < 2 || spec.languages < 2 {
            return Err(MiningError::InvalidSpec(format!(
                "need P >= 2 and K >= 2, got P={} K={}",
                spec.languages, spec.per_language
            )));
        }
        let eligible: Vec<&Vec<usize>> = self
            .by_language
            .values()
            .filter(|v| v.len() >= spec.per_language)
            .collect();
        if eligible.len() < spec.languages {
            return Err(MiningError::InsufficientLanguages {
                eligible: eligible.len(),
                needed: spec.languages,
                per_language: spec.per_language,
            });
        }
        let mut out = Vec::with_capacity(spec.batch_size());
        for l in index::sample(rng, eligible.len(), spec.languages) {
            let members = eligible[l];
            out.extend(
                index::sample(rng, members.len(), spec.per_language)
                    .into_iter()
                    .map(|j| members[j]),
            );
        }
        let slots = spec.unlabeled_slots.min(self.unlabeled.len());
        out.extend(
            index::sample(rng, self.unlabeled.len(), slots)
                .into_iter()
                .map(|j| self.unlabeled[j]),
        );
        out.shuffle(rng);
        Ok(out)
    }

    /// `size` distinct indices drawn uniformly from the whole pool, labels ignored.
    pub fn sample_uniform<R: Rng>(&self, size: usize, rng: &mut R) -> Vec<usize> {
        index::sample(rng, self.total, size.min(self.total)).into_vec()
    }
}

/// One P×K batch from `pool`, as indices into it.
pub fn sample_batch<R: Rng>(
    pool: &[Utterance],
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<usize>, MiningError> {
    BatchSampler::new(pool).sample(spec, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    Missing,
    Noisy,
}

impl CorruptionMode {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionMode::Missing => "missing",
            CorruptionMode::Noisy => "noisy",
        }
    }
}

/// Which pre-training labels were removed or replaced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    pub mode: CorruptionMode,
    pub p: f64,
    /// Ascending utterance ids.
    pub affected: Vec<u64>,
    /// New label per affected id (noisy mode only; empty otherwise).
    pub replacements: Vec<LanguageId>,
}

impl CorruptionPlan {
    pub fn save(&self, path: &Path) -> Result<(), MiningError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MiningError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Corrupts `round(p · labeled)` pre-training labels; other splits are untouched.
///
/// Noisy replacements are uniform over the other labels present in the
/// labeled pre-training set.
pub fn corrupt_labels<R: Rng>(
    corpus: &Corpus,
    mode: CorruptionMode,
    p: f64,
    rng: &mut R,
) -> Result<(Corpus, CorruptionPlan), MiningError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(MiningError::InvalidFraction(p));
    }
    let labeled: Vec<usize> = (0..corpus.pretrain.len())
        .filter(|&i| corpus.pretrain[i].label.is_some())
        .collect();
    let count = (p * labeled.len() as f64).round() as usize;
    let mut chosen: Vec<usize> = index::sample(rng, labeled.len(), count)
        .into_iter()
        .map(|j| labeled[j])
        .collect();
    chosen.sort_unstable();

    let label_set: Vec<LanguageId> = labeled
        .iter()
        .filter_map(|&i| corpus.pretrain[i].label)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let replacements = match mode {
        CorruptionMode::Missing => Vec::new(),
        CorruptionMode::Noisy if chosen.is_empty() => Vec::new(),
        CorruptionMode::Noisy => {
            if label_set.len() < 2 {
                return Err(MiningError::TooFewLanguages(label_set.len()));
            }
            chosen
                .iter()
                .map(|&i| {
                    let truth = corpus.pretrain[i].label.expect("labeled");
                    let others: Vec<LanguageId> =
                        label_set.iter().copied().filter(|&l| l != truth).collect();
                    others[rng.gen_range(0..others.len())]
                })
                .collect()
        }
    };
    let plan = CorruptionPlan {
        mode,
        p,
        affected: chosen.iter().map(|&i| corpus.pretrain[i].utterance_id).collect(),
        replacements,
    };
    let corrupted = apply_plan(corpus, &plan)?;
    Ok((corrupted, plan))
}

/// Replays a plan on an uncorrupted corpus.
pub fn apply_plan(corpus: &Corpus, plan: &CorruptionPlan) -> Result<Corpus, MiningError> {
    let position: HashMap<u64, usize> = corpus
        .pretrain
        .iter()
        .enumerate()
        .filter(|(_, u)| u.label.is_some())
        .map(|(i, u)| (u.utterance_id, i))
        .collect();
    if plan.mode == CorruptionMode::Noisy && plan.replacements.len() != plan.affected.len() {
        return Err(MiningError::InvalidSpec(format!(
            "{} replacements for {} affected utterances",
            plan.replacements.len(),
            plan.affected.len()
        )));
    }
    let mut out = corpus.clone();
    for (k, id) in plan.affected.iter().enumerate() {
        let &i = position.get(id).ok_or(MiningError::UnknownUtterance(*id))?;
        out.pretrain[i].label = match plan.mode {
            CorruptionMode::Missing => None,
            CorruptionMode::Noisy => Some(plan.replacements[k]),
        };
    }
    Ok(out)
}
