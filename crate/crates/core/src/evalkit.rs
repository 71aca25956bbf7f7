//! Language-identification metrics and the overlap / non-overlap report.
//!
//! EER pools one-vs-rest trials: every (utterance, class) pair is a trial
//! scored by that class's posterior, and a trial is accepted when its score
//! is at least the threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::Tensor;
use crate::encoder::EncoderParams;
use crate::langsim::{LanguageId, Utterance};
use crate::trainer::{posteriors, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no trials to evaluate")]
    Empty,
    #[error("EER needs target and non-target trials: {targets} targets, {nontargets} non-targets")]
    Degenerate { targets: usize, nontargets: usize },
    #[error("invalid trial {utterance_id}: {reason}")]
    InvalidTrial { utterance_id: u64, reason: String },
    #[error("trial {utterance_id} has label {label}, which is in neither the overlap nor the non-overlap set")]
    UnknownLabel { utterance_id: u64, label: LanguageId },
    #[error("trial file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One utterance's class posteriors.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub utterance_id: u64,
    pub true_label: LanguageId,
    pub scores: Vec<f64>,
}

impl ScoredTrial {
    /// Checks that `scores` form a distribution (sum 1 ± 1e-6, entries in [0, 1]).
    pub fn new(utterance_id: u64, true_label: LanguageId, scores: Vec<f64>) -> Result<Self, EvalError> {
        let invalid = |reason: String| EvalError::InvalidTrial {
            utterance_id,
            reason,
        };
        if scores.is_empty() {
            return Err(invalid("no scores".into()));
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(invalid("score outside [0, 1]".into()));
        }
        let sum: f64 = scores.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("scores sum to {sum}")));
        }
        if true_label as usize >= scores.len() {
            return Err(invalid(format!("label {true_label} with {} scores", scores.len())));
        }
        Ok(Self {
            utterance_id,
            true_label,
            scores,
        })
    }

    /// Argmax class; ties go to the lowest index.
    pub fn predicted(&self) -> LanguageId {
        let mut best = 0;
        for (c, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = c;
            }
        }
        best as LanguageId
    }
}

pub fn accuracy(trials: &[ScoredTrial]) -> Result<f64, EvalError> {
    if trials.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = trials.iter().filter(|t| t.predicted() == t.true_label).count();
    Ok(hits as f64 / trials.len() as f64)
}

/// `2TP / (2TP + FP + FN)` for every class with at least one true trial.
pub fn per_class_f1(trials: &[ScoredTrial]) -> Result<BTreeMap<LanguageId, f64>, EvalError> {
    if trials.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut tp: BTreeMap<LanguageId, usize> = BTreeMap::new();
    let mut fp: BTreeMap<LanguageId, usize> = BTreeMap::new();
    let mut fneg: BTreeMap<LanguageId, usize> = BTreeMap::new();
    for t in trials {
        let p = t.predicted();
        if p == t.true_label {
            *tp.entry(p).or_default() += 1;
        } else {
            *fp.entry(p).or_default() += 1;
            *fneg.entry(t.true_label).or_default() += 1;
        }
    }
    let classes: BTreeSet<LanguageId> = trials.iter().map(|t| t.true_label).collect();
    Ok(classes
        .into_iter()
        .map(|c| {
            let tp = *tp.get(&c).unwrap_or(&0) as f64;
            let fp = *fp.get(&c).unwrap_or(&0) as f64;
            let fneg = *fneg.get(&c).unwrap_or(&0) as f64;
            (c, 2.0 * tp / (2.0 * tp + fp + fneg))
        })
        .collect())
}

pub fn macro_f1(trials: &[ScoredTrial]) -> Result<f64, EvalError> {
    let f1 = per_class_f1(trials)?;
    Ok(f1.values().sum::<f64>() / f1.len() as f64)
}

/// Equal error rate of two score sets, accepting when `score >= threshold`.
///
/// Operating points are every distinct score plus `+∞`; the EER is the
/// false-accept rate where the FAR − FRR curve crosses zero, linearly
/// interpolated between the two operating points around the crossing.
pub fn eer_from_scores(targets: &[f64], nontargets: &[f64]) -> Result<f64, EvalError> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(EvalError::Degenerate {
            targets: targets.len(),
            nontargets: nontargets.len(),
        });
    }
    let sort = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (tgt, non) = (sort(targets), sort(nontargets));
    let mut thresholds: Vec<f64> = tgt.iter().chain(&non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let (nt, nn) = (tgt.len() as f64, non.len() as f64);
    let point = |th: f64| {
        let far = (non.len() - non.partition_point(|&s| s < th)) as f64 / nn;
        let frr = tgt.partition_point(|&s| s < th) as f64 / nt;
        (far, frr)
    };
    let mut prev = point(thresholds[0]);
    if prev.0 - prev.1 <= 0.0 {
        return Ok(prev.0);
    }
    for &th in &thresholds[1..] {
        let cur = point(th);
        let d1 = cur.0 - cur.1;
        if d1 <= 0.0 {
            let d0 = prev.0 - prev.1;
            let alpha = d0 / (d0 - d1);
            return Ok(prev.0 + alpha * (cur.0 - prev.0));
        }
        prev = cur;
    }
    unreachable!("at +inf FAR = 0 and FRR = 1")
}

/// Pooled one-vs-rest EER.
pub fn eer(trials: &[ScoredTrial]) -> Result<f64, EvalError> {
    let (targets, nontargets) = pooled_scores(trials);
    eer_from_scores(&targets, &nontargets)
}

/// Target and non-target scores of the pooled one-vs-rest trials.
pub fn pooled_scores(trials: &[ScoredTrial]) -> (Vec<f64>, Vec<f64>) {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for t in trials {
        for (c, &s) in t.scores.iter().enumerate() {
            if c == t.true_label as usize {
                targets.push(s);
            } else {
                nontargets.push(s);
            }
        }
    }
    (targets, nontargets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub classes: usize,
    pub trials: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub eer: f64,
}

fn subset_metrics(trials: &[ScoredTrial], classes: usize) -> Result<Option<SubsetMetrics>, EvalError> {
    if trials.is_empty() {
        return Ok(None);
    }
    Ok(Some(SubsetMetrics {
        classes,
        trials: trials.len(),
        accuracy: accuracy(trials)?,
        macro_f1: macro_f1(trials)?,
        eer: eer(trials)?,
    }))
}

/// Metrics overall and per language subset; empty subsets are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: SubsetMetrics,
    pub overlap: Option<SubsetMetrics>,
    pub nonoverlap: Option<SubsetMetrics>,
    pub per_class_f1: Vec<(LanguageId, f64)>,
}

pub const REPORT_COLUMNS: [&str; 6] = ["subset", "classes", "trials", "accuracy", "macro_f1", "eer"];

impl MetricsReport {
    pub fn rows(&self) -> [(&'static str, Option<&SubsetMetrics>); 3] {
        [
            ("overall", Some(&self.overall)),
            ("overlap", self.overlap.as_ref()),
            ("nonoverlap", self.nonoverlap.as_ref()),
        ]
    }

    /// CSV with one row per subset; an empty subset has blank metric cells.
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for (name, m) in self.rows() {
            match m {
                Some(m) => writeln!(
                    out,
                    "{name},{},{},{},{},{}",
                    m.classes, m.trials, m.accuracy, m.macro_f1, m.eer
                ),
                None => writeln!(out, "{name},0,0,,,"),
            }
            .expect("writing to a String");
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>7} {:>7} {:>9} {:>9} {:>9}\n",
            "subset", "classes", "trials", "accuracy", "macro-F1", "EER"
        );
        for (name, m) in self.rows() {
            let line = match m {
                Some(m) => format!(
                    "{name:<12} {:>7} {:>7} {:>8.2}% {:>8.2}% {:>8.2}%\n",
                    m.classes,
                    m.trials,
                    100.0 * m.accuracy,
                    100.0 * m.macro_f1,
                    100.0 * m.eer
                ),
                None => format!("{name:<12} {:>7} {:>7} {:>9} {:>9} {:>9}\n", 0, 0, "empty", "empty", "empty"),
            };
            out.push_str(&line);
        }
        out.push_str("\nper-class F1\n");
        for (c, f) in &self.per_class_f1 {
            writeln!(out, "  language {c:>3}: {:.4}", f).expect("writing to a String");
        }
        out
    }
}

/// Metrics overall and restricted to trials whose true label lies in each subset.
pub fn split_report(
    trials: &[ScoredTrial],
    overlap: &[LanguageId],
    nonoverlap: &[LanguageId],
) -> Result<MetricsReport, EvalError> {
    let o: BTreeSet<_> = overlap.iter().copied().collect();
    let no: BTreeSet<_> = nonoverlap.iter().copied().collect();
    let mut in_o = Vec::new();
    let mut in_no = Vec::new();
    for t in trials {
        if o.contains(&t.true_label) {
            in_o.push(t.clone());
        } else if no.contains(&t.true_label) {
            in_no.push(t.clone());
        } else {
            return Err(EvalError::UnknownLabel {
                utterance_id: t.utterance_id,
                label: t.true_label,
            });
        }
    }
    Ok(MetricsReport {
        overall: subset_metrics(trials, o.len() + no.len())?.ok_or(EvalError::Empty)?,
        overlap: subset_metrics(&in_o, o.len())?,
        nonoverlap: subset_metrics(&in_no, no.len())?,
        per_class_f1: per_class_f1(trials)?.into_iter().collect(),
    })
}

/// Classifier posteriors of `params` for labeled utterances.
pub fn score_utterances(params: &EncoderParams, utterances: &[Utterance]) -> Result<Vec<ScoredTrial>, EvalError> {
    let frames: Vec<&Tensor> = utterances.iter().map(|u| &u.frames).collect();
    if frames.is_empty() {
        return Err(EvalError::Empty);
    }
    let post = posteriors(params, &frames)?;
    utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let label = u.label.ok_or_else(|| EvalError::InvalidTrial {
                utterance_id: u.utterance_id,
                reason: "evaluation utterance has no label".into(),
            })?;
            ScoredTrial::new(u.utterance_id, label, post.row(i).to_vec())
        })
        .collect()
}

/// `utterance_id,true_label,score_0,…,score_{L−1}`, scores in round-trip precision.
pub fn trials_to_csv(trials: &[ScoredTrial]) -> String {
    let l = trials.first().map_or(0, |t| t.scores.len());
    let mut out = String::from("utterance_id,true_label");
    for c in 0..l {
        write!(out, ",score_{c}").expect("writing to a String");
    }
    out.push('\n');
    for t in trials {
        write!(out, "{},{}", t.utterance_id, t.true_label).expect("writing to a String");
        for s in &t.scores {
            write!(out, ",{s:?}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn trials_from_csv(text: &str) -> Result<Vec<ScoredTrial>, EvalError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(EvalError::Parse {
        line: 1,
        reason: "missing header".into(),
    })?;
    let width = header.split(',').count();
    if width < 3 || !header.starts_with("utterance_id,true_label,") {
        return Err(EvalError::Parse {
            line: 1,
            reason: format!("unexpected header `{header}`"),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| EvalError::Parse { line: i + 1, reason };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(parse_err(format!("{} cells, expected {width}", cells.len())));
        }
        let id = cells[0].parse().map_err(|e| parse_err(format!("utterance_id: {e}")))?;
        let label = cells[1].parse().map_err(|e| parse_err(format!("true_label: {e}")))?;
        let scores = cells[2..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|e| parse_err(format!("score: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(ScoredTrial::new(id, label, scores)?);
    }
    Ok(out)
}

pub fn write_trials(path: &Path, trials: &[ScoredTrial]) -> Result<(), EvalError> {
    fs::write(path, trials_to_csv(trials))?;
    Ok(())
}

pub fn read_trials(path: &Path) -> Result<Vec<ScoredTrial>, EvalError> {
    trials_from_csv(&fs::read_to_string(path)?)
}
