//! Synthetic multilingual corpus.
//!
//! Each language is a hidden Markov process over `F`-dimensional Gaussian
//! frames. A corpus holds four splits; the pre-training split only covers the
//! first `pretrain_languages` languages (the overlap set), while fine-tuning,
//! dev and test cover all of them.

mod io;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::Tensor;
use crate::rng;

pub use io::{read_corpus, read_split, write_corpus, write_split, Manifest, FORMAT_VERSION};

pub type LanguageId = u32;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid language config: {0}")]
    InvalidLanguage(String),
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("corpus format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageConfig {
    pub num_states: usize,
    pub feature_dim: usize,
    pub emission_std: f64,
    pub mean_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub language_id: LanguageId,
    pub num_states: usize,
    /// Row-stochastic `num_states × num_states`.
    pub transition: Vec<Vec<f64>>,
    /// `num_states × F`.
    pub emission_means: Vec<Vec<f64>>,
    pub emission_std: f64,
}

impl LanguageSpec {
    pub fn feature_dim(&self) -> usize {
        self.emission_means.first().map_or(0, Vec::len)
    }

    /// Checks shapes and row normalization of a hand-built spec.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidLanguage(m));
        if self.num_states == 0
            || self.transition.len() != self.num_states
            || self.emission_means.len() != self.num_states
        {
            return bad(format!(
                "language {}: state count does not match matrices",
                self.language_id
            ));
        }
        let f = self.feature_dim();
        if f == 0 || self.emission_means.iter().any(|m| m.len() != f) {
            return bad(format!("language {}: ragged emission means", self.language_id));
        }
        for row in &self.transition {
            let s: f64 = row.iter().sum();
            if row.len() != self.num_states || row.iter().any(|p| *p < 0.0) || (s - 1.0).abs() > 1e-9
            {
                return bad(format!(
                    "language {}: transition row is not a distribution",
                    self.language_id
                ));
            }
        }
        if !(self.emission_std >= 0.0 && self.emission_std.is_finite()) {
            return bad(format!("language {}: bad emission std", self.language_id));
        }
        Ok(())
    }
}

/// Deterministic language process for `(language_id, seed)`.
pub fn make_language_spec(
    language_id: LanguageId,
    seed: u64,
    config: &LanguageConfig,
) -> Result<LanguageSpec, CorpusError> {
    if config.num_states < 2 {
        return Err(CorpusError::InvalidLanguage(format!(
            "num_states must be at least 2, got {}",
            config.num_states
        )));
    }
    if config.feature_dim < 1 {
        return Err(CorpusError::InvalidLanguage("feature_dim must be positive".into()));
    }
    if !(config.emission_std >= 0.0) || !(config.mean_scale >= 0.0) {
        return Err(CorpusError::InvalidLanguage(
            "emission_std and mean_scale must be non-negative".into(),
        ));
    }
    let mut rng = rng::stream(seed, "language", language_id as u64);
    let n = config.num_states;
    let transition = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1) + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / total).collect()
        })
        .collect();
    let emission_means = (0..n)
        .map(|_| {
            (0..config.feature_dim)
                .map(|_| config.mean_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    Ok(LanguageSpec {
        language_id,
        num_states: n,
        transition,
        emission_means,
        emission_std: config.emission_std,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utterance_id: u64,
    pub label: Option<LanguageId>,
    /// `T × F`.
    pub frames: Tensor,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }
}

fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws a `T`-frame utterance from a language process.
///
/// The initial state is uniform; each frame is the current state's mean plus
/// isotropic Gaussian noise.
pub fn sample_utterance<R: Rng>(
    spec: &LanguageSpec,
    num_frames: usize,
    utterance_id: u64,
    rng: &mut R,
) -> Utterance {
    assert!(num_frames >= 1, "utterances need at least one frame");
    let f = spec.feature_dim();
    let mut data = Vec::with_capacity(num_frames * f);
    let mut state = rng.gen_range(0..spec.num_states);
    for t in 0..num_frames {
        if t > 0 {
            state = sample_categorical(rng, &spec.transition[state]);
        }
        for &mean in &spec.emission_means[state] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(mean + spec.emission_std * z);
        }
    }
    Utterance {
        utterance_id,
        label: Some(spec.language_id),
        frames: Tensor::matrix(num_frames, f, data).expect("frame buffer sized T×F"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    FinetuneTrain,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::FinetuneTrain, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::FinetuneTrain => "finetune_train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        match self {
            Split::Pretrain => 0,
            Split::FinetuneTrain => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub total_languages: usize,
    pub pretrain_languages: usize,
    pub feature_dim: usize,
    pub num_states: usize,
    pub emission_std: f64,
    pub mean_scale: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub pretrain_per_language: usize,
    pub finetune_per_language: usize,
    pub dev_per_language: usize,
    pub test_per_language: usize,
    /// Fraction of pre-training utterances that keep their label.
    pub labeled_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            total_languages: 12,
            pretrain_languages: 8,
            feature_dim: 20,
            num_states: 5,
            emission_std: 1.0,
            mean_scale: 1.5,
            min_frames: 80,
            max_frames: 120,
            pretrain_per_language: 200,
            finetune_per_language: 50,
            dev_per_language: 15,
            test_per_language: 35,
            labeled_fraction: 1.0,
        }
    }
}

impl CorpusConfig {
    pub fn language_config(&self) -> LanguageConfig {
        LanguageConfig {
            num_states: self.num_states,
            feature_dim: self.feature_dim,
            emission_std: self.emission_std,
            mean_scale: self.mean_scale,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidConfig(m.to_string()));
        if self.pretrain_languages > self.total_languages {
            return Err(CorpusError::InvalidConfig(format!(
                "pretrain_languages ({}) exceeds total_languages ({})",
                self.pretrain_languages, self.total_languages
            )));
        }
        if self.total_languages == 0 {
            return bad("total_languages must be positive");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("frame range must satisfy 1 <= min_frames <= max_frames");
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return bad("labeled_fraction must lie in [0, 1]");
        }
        if self.finetune_per_language == 0 || self.test_per_language == 0 {
            return bad("finetune and test splits need at least one utterance per language");
        }
        Ok(())
    }

    fn per_language(&self, split: Split) -> usize {
        match split {
            Split::Pretrain => self.pretrain_per_language,
            Split::FinetuneTrain => self.finetune_per_language,
            Split::Dev => self.dev_per_language,
            Split::Test => self.test_per_language,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub master_seed: u64,
    pub languages: Vec<LanguageSpec>,
    pub pretrain: Vec<Utterance>,
    pub finetune_train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    /// Languages present in pre-training.
    pub overlap: Vec<LanguageId>,
    /// Languages only seen from fine-tuning on.
    pub nonoverlap: Vec<LanguageId>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Pretrain => &self.pretrain,
            Split::FinetuneTrain => &self.finetune_train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Utterance> {
        match split {
            Split::Pretrain => &mut self.pretrain,
            Split::FinetuneTrain => &mut self.finetune_train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn labeled_pretrain_count(&self) -> usize {
        self.pretrain.iter().filter(|u| u.label.is_some()).count()
    }
}

/// Generates the full corpus as a pure function of `(config, master_seed)`.
pub fn build_corpus(config: &CorpusConfig, master_seed: u64) -> Result<Corpus, CorpusError> {
    config.validate()?;
    let lang_cfg = config.language_config();
    let languages = (0..config.total_languages as LanguageId)
        .map(|id| make_language_spec(id, master_seed, &lang_cfg))
        .collect::<Result<Vec<_>, _>>()?;

    let mut next_id = 0u64;
    let mut make_split = |split: Split, langs: &[LanguageSpec]| -> Vec<Utterance> {
        let per_lang = config.per_language(split);
        let mut out = Vec::with_capacity(per_lang * langs.len());
        for spec in langs {
            for _ in 0..per_lang {
                let id = next_id;
                next_id += 1;
                let mut rng = rng::stream(
                    rng::derive_seed(master_seed, "split", split.index()),
                    "utterance",
                    id,
                );
                let t = rng.gen_range(config.min_frames..=config.max_frames);
                out.push(sample_utterance(spec, t, id, &mut rng));
            }
        }
        out
    };

    let mut pretrain = make_split(Split::Pretrain, &languages[..config.pretrain_languages]);
    let finetune_train = make_split(Split::FinetuneTrain, &languages);
    let dev = make_split(Split::Dev, &languages);
    let test = make_split(Split::Test, &languages);

    let keep = (config.labeled_fraction * pretrain.len() as f64).round() as usize;
    let strip = pretrain.len() - keep;
    if strip > 0 {
        let mut rng = rng::stream(master_seed, "label-strip", 0);
        for i in index::sample(&mut rng, pretrain.len(), strip) {
            pretrain[i].label = None;
        }
    }

    let overlap = (0..config.pretrain_languages as LanguageId).collect();
    let nonoverlap = (config.pretrain_languages as LanguageId..config.total_languages as LanguageId)
        .collect();
    Ok(Corpus {
        config: config.clone(),
        master_seed,
        languages,
        pretrain,
        finetune_train,
        dev,
        test,
        overlap,
        nonoverlap,
    })
}
