//! Experiment configuration and the pretrain → fine-tune → evaluate pipeline.
//!
//! A cell is one training run: an SSL objective, a supervised-loss variant
//! with its weight, an optional label corruption and a seed. Runs that share
//! the SSL objective and seed share their SSL-only first phase, which is
//! computed once and resumed from (resumption is bit-exact).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::evalkit::{score_utterances, split_report, EvalError, MetricsReport, SubsetMetrics};
use crate::langsim::{build_corpus, Corpus, CorpusConfig, CorpusError};
use crate::mining::{corrupt_labels, CorruptionMode, CorruptionPlan, MiningError};
use crate::objectives::{SslObjective, SupervisedLoss};
use crate::rng;
use crate::trainer::{finetune, initial_state, pretrain, FinetuneConfig, StepRecord, TrainConfig, TrainError, TrainState};

/// Environment variable overriding `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "LASR_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Cell {
        context: String,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Supervised-loss rows of the loss ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossVariant {
    #[serde(rename = "ssl_only")]
    SslOnly,
    #[serde(rename = "hard_only")]
    HardOnly,
    #[serde(rename = "ssl+semi_hard")]
    SslSemiHard,
    #[serde(rename = "ssl+ge2e")]
    SslGe2e,
    #[serde(rename = "ssl+hard")]
    SslHard,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] = [
        LossVariant::SslOnly,
        LossVariant::HardOnly,
        LossVariant::SslSemiHard,
        LossVariant::SslGe2e,
        LossVariant::SslHard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::SslOnly => "ssl_only",
            LossVariant::HardOnly => "hard_only",
            LossVariant::SslSemiHard => "ssl+semi_hard",
            LossVariant::SslGe2e => "ssl+ge2e",
            LossVariant::SslHard => "ssl+hard",
        }
    }

    pub fn supervised_loss(self) -> SupervisedLoss {
        match self {
            LossVariant::SslOnly => SupervisedLoss::None,
            LossVariant::HardOnly | LossVariant::SslHard => SupervisedLoss::Hard,
            LossVariant::SslSemiHard => SupervisedLoss::SemiHard,
            LossVariant::SslGe2e => SupervisedLoss::Ge2e,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSettings {
    pub mode: CorruptionMode,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    pub lambda: Vec<f64>,
    pub noise_modes: Vec<CorruptionMode>,
    pub noise_p: Vec<f64>,
    pub loss: Vec<LossVariant>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            lambda: vec![0.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            noise_modes: vec![CorruptionMode::Missing, CorruptionMode::Noisy],
            noise_p: vec![0.0, 0.25, 0.5, 0.75],
            loss: LossVariant::ALL.to_vec(),
        }
    }
}

/// Everything a run depends on. Every field is required in the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Master seed of the synthetic corpus (fixed across training seeds).
    pub corpus_seed: u64,
    /// Training seeds; sweeps run every value once per seed.
    pub seeds: Vec<u64>,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    /// `train.seed` is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    /// `finetune.seed` is replaced by the training seed.
    pub finetune: FinetuneConfig,
    /// Applied to single runs (pretrain, pipeline); sweeps set their own.
    pub corruption: CorruptionSettings,
    pub sweep: SweepAxes,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("lasr-out"),
            corpus_seed: 0,
            seeds: vec![0, 1, 2],
            corpus: CorpusConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            corruption: CorruptionSettings {
                mode: CorruptionMode::Missing,
                p: 0.0,
            },
            sweep: SweepAxes::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |m: String| Err(ExperimentError::Config(m));
        self.corpus.validate()?;
        self.encoder.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.train.validate()?;
        if self.encoder.feature_dim != self.corpus.feature_dim {
            return fail(format!(
                "encoder.feature_dim ({}) differs from corpus.feature_dim ({})",
                self.encoder.feature_dim, self.corpus.feature_dim
            ));
        }
        if self.encoder.num_classes != self.corpus.total_languages {
            return fail(format!(
                "encoder.num_classes ({}) differs from corpus.total_languages ({})",
                self.encoder.num_classes, self.corpus.total_languages
            ));
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if !(0.0..=1.0).contains(&self.corruption.p) || self.sweep.noise_p.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return fail("corruption fractions must lie in [0, 1]".into());
        }
        if self.sweep.lambda.iter().any(|l| !(*l >= 0.0)) {
            return fail("sweep lambdas must be non-negative".into());
        }
        Ok(())
    }

    /// `output_dir`, unless the environment overrides it.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(p) if !p.is_empty() => PathBuf::from(p),
            _ => self.output_dir.clone(),
        }
    }

    pub fn build_corpus(&self) -> Result<Corpus, ExperimentError> {
        Ok(build_corpus(&self.corpus, self.corpus_seed)?)
    }
}

/// One training run of a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub ssl: SslObjective,
    pub variant: LossVariant,
    pub lambda: f64,
    pub corruption: Option<CorruptionSettings>,
    pub seed: u64,
}

impl Cell {
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            ssl: self.ssl,
            seed: self.seed,
            supervised_loss: self.variant.supervised_loss(),
            lambda: if self.variant == LossVariant::SslOnly { 0.0 } else { self.lambda },
            ssl_in_lasr_phase: self.variant != LossVariant::HardOnly,
            ..base.clone()
        }
    }

    pub fn label(&self) -> String {
        let mut s = format!(
            "{}/{}/lambda={}/seed={}",
            match self.ssl {
                SslObjective::Mlm => "mlm",
                SslObjective::Contrastive => "contrastive",
            },
            self.variant.name(),
            self.lambda,
            self.seed
        );
        if let Some(c) = self.corruption {
            write!(s, "/{}={}", c.mode.name(), c.p).expect("writing to a String");
        }
        s
    }
}

/// Result of one cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub report: MetricsReport,
    pub log: Vec<StepRecord>,
    pub pretrained: TrainState,
    pub model: EncoderParams,
    pub plan: Option<CorruptionPlan>,
}

/// SSL-only first-phase states keyed by (objective, seed).
#[derive(Default)]
pub struct Phase1Cache {
    states: BTreeMap<(u8, u64), (TrainState, Vec<StepRecord>)>,
}

impl Phase1Cache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn get_or_train(
        &mut self,
        exp: &ExperimentConfig,
        corpus: &Corpus,
        cfg: &TrainConfig,
    ) -> Result<(TrainState, Vec<StepRecord>), ExperimentError> {
        let key = (cfg.ssl as u8, cfg.seed);
        if let Some(v) = self.states.get(&key) {
            return Ok(v.clone());
        }
        // The first phase never reads labels, so any label corruption is irrelevant here.
        let init = initial_state(&exp.encoder, cfg.seed)?;
        let out = pretrain(&corpus.pretrain, cfg, init, cfg.ssl_only_steps, None)?;
        self.states.insert(key, out.clone());
        Ok(out)
    }
}

/// Pretrains, fine-tunes and evaluates one cell on the test split.
pub fn run_cell(
    exp: &ExperimentConfig,
    corpus: &Corpus,
    cell: &Cell,
    cache: &mut Phase1Cache,
) -> Result<CellResult, ExperimentError> {
    let wrap = |e: ExperimentError| ExperimentError::Cell {
        context: cell.label(),
        source: Box::new(e),
    };
    (|| {
        let cfg = cell.train_config(&exp.train);
        let (corrupted, plan) = match cell.corruption {
            Some(c) if c.p > 0.0 => {
                let (k, plan) = corrupt_labels(corpus, c.mode, c.p, &mut rng::stream(cell.seed, "corruption", 0))?;
                (Some(k), Some(plan))
            }
            _ => (None, None),
        };
        let data = corrupted.as_ref().unwrap_or(corpus);
        let (phase1, mut log) = cache.get_or_train(exp, data, &cfg)?;
        let (pretrained, tail) = pretrain(&data.pretrain, &cfg, phase1, cfg.total_steps, None)?;
        log.extend(tail);
        let ft = FinetuneConfig {
            seed: cell.seed,
            ..exp.finetune.clone()
        };
        let model = finetune(&pretrained.params, &corpus.finetune_train, &ft)?;
        let trials = score_utterances(&model, &corpus.test)?;
        let report = split_report(&trials, &corpus.overlap, &corpus.nonoverlap)?;
        Ok(CellResult {
            cell: *cell,
            report,
            log,
            pretrained,
            model,
            plan,
        })
    })()
    .map_err(wrap)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    Noise,
    Loss,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Noise => "noise",
            SweepAxis::Loss => "loss",
        }
    }
}

/// `(axis value label, cell)` for every value × seed of `axis`.
pub fn sweep_cells(exp: &ExperimentConfig, axis: SweepAxis) -> Vec<(String, Cell)> {
    let base = Cell {
        ssl: exp.train.ssl,
        variant: LossVariant::SslHard,
        lambda: exp.train.lambda,
        corruption: None,
        seed: 0,
    };
    let mut values: Vec<(String, Cell)> = Vec::new();
    match axis {
        SweepAxis::Lambda => {
            for &l in &exp.sweep.lambda {
                let variant = if l == 0.0 { LossVariant::SslOnly } else { LossVariant::SslHard };
                values.push((format!("{l}"), Cell { lambda: l, variant, ..base }));
            }
        }
        SweepAxis::Noise => {
            for &mode in &exp.sweep.noise_modes {
                for &p in &exp.sweep.noise_p {
                    values.push((
                        format!("{}:{p}", mode.name()),
                        Cell {
                            corruption: Some(CorruptionSettings { mode, p }),
                            ..base
                        },
                    ));
                }
            }
        }
        SweepAxis::Loss => {
            for &variant in &exp.sweep.loss {
                values.push((variant.name().to_string(), Cell { variant, ..base }));
            }
        }
    }
    let mut out = Vec::new();
    for (label, cell) in values {
        for &seed in &exp.seeds {
            out.push((label.clone(), Cell { seed, ..cell }));
        }
    }
    out
}

pub const SWEEP_SUBSETS: [&str; 3] = ["overall", "overlap", "nonoverlap"];

fn metric_cells(m: Option<&SubsetMetrics>) -> String {
    match m {
        Some(m) => format!("{},{},{}", m.accuracy, m.macro_f1, m.eer),
        None => ",,".to_string(),
    }
}

/// One row per (value, seed) followed by a mean row per value.
pub fn sweep_csv(axis: SweepAxis, rows: &[(String, CellResult)]) -> String {
    let mut out = String::from("axis,value,seed");
    for s in SWEEP_SUBSETS {
        write!(out, ",{s}_accuracy,{s}_macro_f1,{s}_eer").expect("writing to a String");
    }
    out.push('\n');
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&MetricsReport>> = BTreeMap::new();
    for (value, r) in rows {
        let rep = &r.report;
        writeln!(
            out,
            "{},{value},{},{},{},{}",
            axis.name(),
            r.cell.seed,
            metric_cells(Some(&rep.overall)),
            metric_cells(rep.overlap.as_ref()),
            metric_cells(rep.nonoverlap.as_ref())
        )
        .expect("writing to a String");
        if !groups.contains_key(value.as_str()) {
            order.push(value);
        }
        groups.entry(value).or_default().push(rep);
    }
    for value in order {
        let reps = &groups[value];
        let mean = |f: &dyn Fn(&MetricsReport) -> Option<&SubsetMetrics>| -> Option<SubsetMetrics> {
            let ms: Vec<&SubsetMetrics> = reps.iter().filter_map(|r| f(r)).collect();
            if ms.len() != reps.len() {
                return None;
            }
            let n = ms.len() as f64;
            Some(SubsetMetrics {
                classes: ms[0].classes,
                trials: ms[0].trials,
                accuracy: ms.iter().map(|m| m.accuracy).sum::<f64>() / n,
                macro_f1: ms.iter().map(|m| m.macro_f1).sum::<f64>() / n,
                eer: ms.iter().map(|m| m.eer).sum::<f64>() / n,
            })
        };
        writeln!(
            out,
            "{},{value},mean,{},{},{}",
            axis.name(),
            metric_cells(mean(&|r| Some(&r.overall)).as_ref()),
            metric_cells(mean(&|r| r.overlap.as_ref()).as_ref()),
            metric_cells(mean(&|r| r.nonoverlap.as_ref()).as_ref())
        )
        .expect("writing to a String");
    }
    out
}

/// Runs every cell of `axis`, writing per-cell artifacts and `sweep_<axis>.csv` under `out_dir`.
pub fn run_sweep(
    exp: &ExperimentConfig,
    corpus: &Corpus,
    axis: SweepAxis,
    out_dir: &Path,
    cache: &mut Phase1Cache,
    mut progress: impl FnMut(&str, &CellResult),
) -> Result<String, ExperimentError> {
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for (value, cell) in sweep_cells(exp, axis) {
        let result = run_cell(exp, corpus, &cell, cache).map_err(|e| ExperimentError::Cell {
            context: format!("sweep {} value {value}", axis.name()),
            source: Box::new(e),
        })?;
        let dir = out_dir
            .join(format!("{}_{}", axis.name(), sanitize(&value)))
            .join(format!("seed_{}", cell.seed));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("report.csv"), result.report.to_csv())?;
        crate::trainer::write_log_csv(&dir.join("pretrain_log.csv"), &result.log)?;
        if let Some(plan) = &result.plan {
            plan.save(&dir.join("corruption_plan.json"))?;
        }
        progress(&value, &result);
        rows.push((value, result));
    }
    let csv = sweep_csv(axis, &rows);
    fs::write(out_dir.join(format!("sweep_{}.csv", axis.name())), &csv)?;
    Ok(csv)
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

/// Writes the resolved config next to run artifacts.
pub fn write_resolved_config(exp: &ExperimentConfig, dir: &Path) -> Result<PathBuf, ExperimentError> {
    fs::create_dir_all(dir)?;
    let path = dir.join("config.toml");
    fs::write(&path, exp.to_toml())?;
    Ok(path)
}
