//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (outside the test harness capture) and then asserts.
//!
//! Criteria 1-4 share one protocol run over the default corpus: both SSL
//! objectives for the main comparison, the MLM objective for the ablations.
//! It takes roughly an hour on one core.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use lasr::diffkit::{Tape, Tensor};
use lasr::encoder::{encode_graph, plan_mask, pool_graph, Activation, Checkpoint, EncoderConfig, EncoderParams, FrameBatch};
use lasr::evalkit::{accuracy, eer_from_scores, score_utterances};
use lasr::experiment::{run_cell, Cell, CorruptionSettings, ExperimentConfig, LossVariant, Phase1Cache};
use lasr::langsim::{build_corpus, CorpusConfig, LanguageId};
use lasr::mining::CorruptionMode;
use lasr::objectives::{
    angular_distance, angular_distance_graph, ge2e_loss, hard_triplet_graph, mlm_loss_graph,
    ssl_contrastive_loss, ssl_mlm_loss, triplet_loss_hard, triplet_loss_semi_hard, EmbeddingBatch, SslObjective,
    SupervisedLoss,
};
use lasr::rng;
use lasr::trainer::{initial_state, pretrain, TrainConfig, TrainState};

fn report(n: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {n}: {verdict} | {title} | {detail}");
    assert!(pass, "criterion {n} ({title}) failed: {detail}");
}

// ---------------------------------------------------------------------------
// Brute-force oracles

fn oracle_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0 + 1e-7, 1.0 - 1e-7).acos() / PI
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Copy, PartialEq)]
enum Mining {
    Hard,
    SemiHard,
    Ge2e { similarity: bool },
}

/// Mean per-anchor loss, per-anchor contributions, skipped anchors, and the
/// smallest gap between any two quantities a mining or hinge decision compared.
struct OracleOut {
    value: f64,
    per_anchor: Vec<(usize, f64)>,
    skipped: usize,
    gap: f64,
}

fn oracle_loss(rows: &[Vec<f64>], labels: &[Option<LanguageId>], gamma: f64, mining: Mining, seed: u64) -> Option<OracleOut> {
    let b = rows.len();
    let d: Vec<Vec<f64>> = (0..b).map(|i| (0..b).map(|j| oracle_distance(&rows[i], &rows[j])).collect()).collect();
    let mut rng = rng::stream(seed, "oracle", 0);
    let mut per_anchor = Vec::new();
    let mut skipped = 0;
    let mut gap = f64::INFINITY;
    for i in 0..b {
        let Some(li) = labels[i] else { continue };
        let pos: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == Some(li)).collect();
        let neg: Vec<usize> = (0..b).filter(|&j| matches!(labels[j], Some(l) if l != li)).collect();
        if pos.is_empty() || neg.is_empty() {
            skipped += 1;
            continue;
        }
        let mut track = |x: &[f64], pick: f64| {
            for &v in x {
                if v != pick {
                    gap = gap.min((v - pick).abs());
                }
            }
        };
        let dpos: Vec<f64> = pos.iter().map(|&j| d[i][j]).collect();
        let dneg: Vec<f64> = neg.iter().map(|&j| d[i][j]).collect();
        let (dp, dn) = match mining {
            Mining::Hard | Mining::Ge2e { .. } => {
                let dp = dpos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let dn = dneg.iter().cloned().fold(f64::INFINITY, f64::min);
                track(&dpos, dp);
                track(&dneg, dn);
                (dp, dn)
            }
            Mining::SemiHard => {
                let dp = dpos[rng.gen_range(0..pos.len())];
                let above: Vec<f64> = dneg.iter().cloned().filter(|&x| x > dp).collect();
                let dn = if above.is_empty() {
                    dneg.iter().cloned().fold(f64::INFINITY, f64::min)
                } else {
                    above.iter().cloned().fold(f64::INFINITY, f64::min)
                };
                track(&dneg, dn);
                track(&dneg, dp);
                (dp, dn)
            }
        };
        let c = match mining {
            Mining::Hard | Mining::SemiHard => {
                gap = gap.min((gamma + dp - dn).abs());
                (gamma + dp - dn).max(0.0)
            }
            Mining::Ge2e { similarity: false } => 1.0 - sigmoid(dp) + sigmoid(dn),
            Mining::Ge2e { similarity: true } => 1.0 - sigmoid(1.0 - dp) + sigmoid(1.0 - dn),
        };
        per_anchor.push((i, c));
    }
    if per_anchor.is_empty() {
        return None;
    }
    let value = per_anchor.iter().map(|(_, c)| c).sum::<f64>() / per_anchor.len() as f64;
    Some(OracleOut {
        value,
        per_anchor,
        skipped,
        gap,
    })
}

fn oracle_eer(targets: &[f64], nontargets: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&th| {
            let far = nontargets.iter().filter(|&&s| s >= th).count() as f64 / nontargets.len() as f64;
            let frr = targets.iter().filter(|&&s| s < th).count() as f64 / targets.len() as f64;
            (far, frr)
        })
        .collect();
    for k in 0..points.len() {
        let (far, frr) = points[k];
        if far - frr <= 0.0 {
            if k == 0 {
                return far;
            }
            let (pf, pr) = points[k - 1];
            let t = (pf - pr) / ((pf - pr) - (far - frr));
            return pf + t * (far - pf);
        }
    }
    unreachable!()
}

fn gaussian_rows<R: Rng>(rng: &mut R, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::matrix(rows.len(), rows[0].len(), rows.concat()).unwrap()
}

fn random_labels<R: Rng>(rng: &mut R, b: usize, classes: u32, unlabeled: f64) -> Vec<Option<LanguageId>> {
    (0..b)
        .map(|_| if rng.gen::<f64>() < unlabeled { None } else { Some(rng.gen_range(0..classes)) })
        .collect()
}

fn evaluate_mining(batch: &EmbeddingBatch, mining: Mining, gamma: f64, seed: u64) -> lasr::objectives::LossEvaluation {
    match mining {
        Mining::Hard => triplet_loss_hard(batch, gamma).unwrap(),
        Mining::SemiHard => triplet_loss_semi_hard(batch, gamma, &mut rng::stream(seed, "oracle", 0)).unwrap(),
        Mining::Ge2e { similarity } => ge2e_loss(batch, similarity).unwrap(),
    }
}

// ---------------------------------------------------------------------------
// Finite differences

const FD_EPS: f64 = 1e-6;

fn fd_relative_error(analytic: &[f64], x: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        probe[k] = x[k] + FD_EPS;
        let up = f(&probe);
        probe[k] = x[k] - FD_EPS;
        let down = f(&probe);
        probe[k] = x[k];
        numeric.push((up - down) / (2.0 * FD_EPS));
    }
    let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Draws supervised batches until one has every mining decision and hinge at
/// least `1e-3` from a tie.
fn kink_free_batch(seed: u64, b: usize, dim: usize, classes: u32, mining: Mining) -> (Vec<Vec<f64>>, Vec<Option<LanguageId>>) {
    for attempt in 0.. {
        let mut rng = rng::stream(seed, "fd-batch", attempt);
        let rows = gaussian_rows(&mut rng, b, dim);
        let labels = random_labels(&mut rng, b, classes, 0.1);
        if let Some(o) = oracle_loss(&rows, &labels, 0.2, mining, seed) {
            let active = o.per_anchor.iter().any(|&(_, c)| c > 1e-3);
            if o.gap > 1e-3 && active {
                return (rows, labels);
            }
        }
    }
    unreachable!()
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        feature_dim: 3,
        context: 1,
        hidden_dim: 5,
        hidden_layers: 2,
        embed_dim: 4,
        vocab_size: 6,
        num_classes: 3,
        quantizer_dim: 3,
        activation: Activation::Tanh,
    }
}

fn flat_params(p: &EncoderParams) -> Vec<f64> {
    p.blocks().into_iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

fn with_flat(p: &EncoderParams, x: &[f64]) -> EncoderParams {
    let mut out = p.clone();
    let mut k = 0;
    for (_, t) in out.blocks_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&x[k..k + n]);
        k += n;
    }
    out
}

/// Masked MLM loss plus a pooled readout over a small batch: value and the
/// flattened gradient with respect to every parameter block.
fn encoder_mlm_loss(p: &EncoderParams, utts: &[Tensor], readout: &Tensor, seed: u64) -> (f64, Vec<f64>) {
    let refs: Vec<&Tensor> = utts.iter().collect();
    let batch = FrameBatch::new(&refs).unwrap();
    let mut mask_rng = rng::stream(seed, "fd-mask", 0);
    let plans: Vec<_> = utts.iter().map(|u| plan_mask(u.rows(), 0.3, 2, &mut mask_rng)).collect();
    let q = p.quantizer();
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let x = tape.leaf(batch.frames.clone());
    let masked = encode_graph(&mut tape, &bound, &p.config, x, &batch, Some(&plans)).unwrap();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for ((&(start, _), plan), u) in batch.segments.iter().zip(&plans).zip(utts) {
        let codes = q.quantize(u).unwrap();
        for &t in &plan.positions {
            rows.push(start + t);
            targets.push(codes[t]);
        }
    }
    let r = tape.gather_rows(masked, &rows).unwrap();
    let logits = tape.matmul(r, bound.mlm_weight).unwrap();
    let logits = tape.add(logits, bound.mlm_bias).unwrap();
    let mlm = mlm_loss_graph(&mut tape, logits, targets).unwrap();
    let clean = encode_graph(&mut tape, &bound, &p.config, x, &batch, None).unwrap();
    let h = pool_graph(&mut tape, clean, &batch).unwrap();
    let cls = tape.matmul(h, bound.classifier_weight).unwrap();
    let cls = tape.add(cls, bound.classifier_bias).unwrap();
    let ctx = tape.matmul(h, bound.contrastive_weight).unwrap();
    let both = tape.concat_rows(ctx, h).unwrap();
    let w = tape.leaf(readout.clone());
    let prod = tape.mul(both, w).unwrap();
    let read = tape.sum(prod).unwrap();
    let cls_sum = tape.mean_all(cls).unwrap();
    let extra = tape.add(read, cls_sum).unwrap();
    let extra = tape.scale(extra, 0.3).unwrap();
    let loss = tape.add(mlm, extra).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = bound.vars().into_iter().flat_map(|v| grads.wrt(v).data().to_vec()).collect();
    (tape.value(loss).item().unwrap(), g)
}

/// Hard-triplet loss on pooled clean encodings.
fn encoder_triplet_loss(p: &EncoderParams, utts: &[Tensor], labels: &[Option<LanguageId>]) -> (f64, Vec<f64>) {
    let refs: Vec<&Tensor> = utts.iter().collect();
    let batch = FrameBatch::new(&refs).unwrap();
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let x = tape.leaf(batch.frames.clone());
    let z = encode_graph(&mut tape, &bound, &p.config, x, &batch, None).unwrap();
    let h = pool_graph(&mut tape, z, &batch).unwrap();
    let d = angular_distance_graph(&mut tape, h).unwrap();
    let term = hard_triplet_graph(&mut tape, d, labels, 0.2).unwrap();
    let grads = tape.backward(term.loss).unwrap();
    let g = bound.vars().into_iter().flat_map(|v| grads.wrt(v).data().to_vec()).collect();
    (tape.value(term.loss).item().unwrap(), g)
}

fn pooled_rows(p: &EncoderParams, utts: &[Tensor]) -> Vec<Vec<f64>> {
    let refs: Vec<&Tensor> = utts.iter().collect();
    let e = lasr::encoder::embed_utterances(p, &refs).unwrap();
    (0..e.rows()).map(|r| e.row(r).to_vec()).collect()
}

fn random_utterances<R: Rng>(rng: &mut R, n: usize, f: usize) -> Vec<Tensor> {
    (0..n)
        .map(|_| {
            let t = rng.gen_range(4..=7);
            let rows = gaussian_rows(rng, t, f);
            to_tensor(&rows)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Criteria 1-4: the training protocol

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Run {
    SslOnly,
    Lasr,
    HardOnly,
    Lambda2,
    Lambda32,
    Missing25,
    Missing50,
    Missing75,
}

#[derive(Clone, Copy, Debug)]
struct Accs {
    overall: f64,
    overlap: f64,
    nonoverlap: f64,
}

struct Protocol {
    results: BTreeMap<(u8, Run), Vec<Accs>>,
    seconds_per_run: BTreeMap<(u8, Run), f64>,
}

impl Protocol {
    fn mean(&self, ssl: SslObjective, run: Run) -> Accs {
        let v = &self.results[&(ssl as u8, run)];
        let n = v.len() as f64;
        Accs {
            overall: v.iter().map(|a| a.overall).sum::<f64>() / n,
            overlap: v.iter().map(|a| a.overlap).sum::<f64>() / n,
            nonoverlap: v.iter().map(|a| a.nonoverlap).sum::<f64>() / n,
        }
    }
}

fn cell_for(ssl: SslObjective, run: Run, seed: u64) -> Cell {
    let missing = |p| Some(CorruptionSettings { mode: CorruptionMode::Missing, p });
    let (variant, lambda, corruption) = match run {
        Run::SslOnly => (LossVariant::SslOnly, 0.0, None),
        Run::Lasr => (LossVariant::SslHard, 16.0, None),
        Run::HardOnly => (LossVariant::HardOnly, 16.0, None),
        Run::Lambda2 => (LossVariant::SslHard, 2.0, None),
        Run::Lambda32 => (LossVariant::SslHard, 32.0, None),
        Run::Missing25 => (LossVariant::SslHard, 16.0, missing(0.25)),
        Run::Missing50 => (LossVariant::SslHard, 16.0, missing(0.5)),
        Run::Missing75 => (LossVariant::SslHard, 16.0, missing(0.75)),
    };
    Cell {
        ssl,
        variant,
        lambda,
        corruption,
        seed,
    }
}

fn protocol() -> &'static Protocol {
    static CELL: OnceLock<Protocol> = OnceLock::new();
    CELL.get_or_init(|| {
        let exp = ExperimentConfig::default();
        let corpus = exp.build_corpus().unwrap();
        let mut cache = Phase1Cache::new();
        let mut plan: Vec<(SslObjective, Run)> = vec![
            (SslObjective::Contrastive, Run::SslOnly),
            (SslObjective::Contrastive, Run::Lasr),
        ];
        for run in [
            Run::SslOnly,
            Run::Lasr,
            Run::HardOnly,
            Run::Lambda2,
            Run::Lambda32,
            Run::Missing25,
            Run::Missing50,
            Run::Missing75,
        ] {
            plan.push((SslObjective::Mlm, run));
        }
        let mut results: BTreeMap<(u8, Run), Vec<Accs>> = BTreeMap::new();
        let mut timing: BTreeMap<(u8, Run), Duration> = BTreeMap::new();
        for &seed in &exp.seeds {
            for &(ssl, run) in &plan {
                let cell = cell_for(ssl, run, seed);
                let start = Instant::now();
                let r = run_cell(&exp, &corpus, &cell, &mut cache).unwrap();
                *timing.entry((ssl as u8, run)).or_default() += start.elapsed();
                let acc = Accs {
                    overall: r.report.overall.accuracy,
                    overlap: r.report.overlap.as_ref().unwrap().accuracy,
                    nonoverlap: r.report.nonoverlap.as_ref().unwrap().accuracy,
                };
                let _ = writeln!(
                    std::io::stderr(),
                    "  protocol {}: overall {:.4} overlap {:.4} nonoverlap {:.4} ({:.0}s)",
                    cell.label(),
                    acc.overall,
                    acc.overlap,
                    acc.nonoverlap,
                    start.elapsed().as_secs_f64()
                );
                results.entry((ssl as u8, run)).or_default().push(acc);
            }
        }
        let n = exp.seeds.len() as f64;
        Protocol {
            results,
            seconds_per_run: timing.into_iter().map(|(k, v)| (k, v.as_secs_f64() / n)).collect(),
        }
    })
}

#[test]
fn criterion_1_lasr_beats_ssl_baseline() {
    let p = protocol();
    let mut pass = true;
    let mut detail = Vec::new();
    for (ssl, name) in [(SslObjective::Contrastive, "contrastive"), (SslObjective::Mlm, "mlm")] {
        let base = p.mean(ssl, Run::SslOnly);
        let lasr = p.mean(ssl, Run::Lasr);
        let d_all = lasr.overall - base.overall;
        let d_no = lasr.nonoverlap - base.nonoverlap;
        pass &= d_all >= 0.02 && d_no >= 0.02;
        let secs = p.seconds_per_run[&(ssl as u8, Run::SslOnly)] + p.seconds_per_run[&(ssl as u8, Run::Lasr)];
        detail.push(format!(
            "{name}: ssl_only {:.4}/{:.4} lasr {:.4}/{:.4} (overall/nonoverlap), gain {:+.4}/{:+.4}, {:.0}s per seed",
            base.overall, base.nonoverlap, lasr.overall, lasr.nonoverlap, d_all, d_no, secs
        ));
    }
    report(1, "LASR(hard, lambda=16) >= SSL-only + 2 points, overall and non-overlap", pass, &detail.join("; "));
}

#[test]
fn criterion_2_loss_ordering() {
    let p = protocol();
    let ssl = SslObjective::Mlm;
    let hard = p.mean(ssl, Run::Lasr).overall;
    let base = p.mean(ssl, Run::SslOnly).overall;
    let hard_only = p.mean(ssl, Run::HardOnly).overall;
    let pass = hard >= base && hard >= hard_only;
    report(
        2,
        "ssl+hard >= ssl_only and >= hard_only",
        pass,
        &format!("ssl+hard {hard:.4}, ssl_only {base:.4}, hard_only {hard_only:.4}"),
    );
}

#[test]
fn criterion_3_lambda_shape() {
    let p = protocol();
    let ssl = SslObjective::Mlm;
    let a2 = p.mean(ssl, Run::Lambda2).overall;
    let a16 = p.mean(ssl, Run::Lasr).overall;
    let a32 = p.mean(ssl, Run::Lambda32).overall;
    let pass = a16 >= a2 && a32 <= a16;
    report(
        3,
        "acc(lambda=16) >= acc(2) and acc(32) <= acc(16)",
        pass,
        &format!("lambda=2 {a2:.4}, 16 {a16:.4}, 32 {a32:.4}"),
    );
}

#[test]
fn criterion_4_missing_label_robustness() {
    let p = protocol();
    let ssl = SslObjective::Mlm;
    let base = p.mean(ssl, Run::SslOnly).overall;
    let curve: Vec<f64> = [Run::Lasr, Run::Missing25, Run::Missing50, Run::Missing75]
        .iter()
        .map(|&r| p.mean(ssl, r).overall)
        .collect();
    let inversions: Vec<f64> = curve.windows(2).map(|w| w[1] - w[0]).filter(|&d| d > 0.0).collect();
    let monotone = inversions.len() <= 1 && inversions.iter().all(|&d| d <= 0.01);
    let beats = curve[3] > base;
    report(
        4,
        "LASR at p=0.75 missing > SSL-only, accuracy non-increasing in p",
        beats && monotone,
        &format!(
            "ssl_only {base:.4}; p=0/.25/.5/.75: {:.4}/{:.4}/{:.4}/{:.4}; beats baseline {beats}, monotone {monotone}",
            curve[0], curve[1], curve[2], curve[3]
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: gradients against central finite differences

#[test]
fn criterion_5_gradient_suite() {
    let start = Instant::now();
    let mut errors: Vec<(String, f64)> = Vec::new();

    let miners = [
        (Mining::Hard, 15, "hard"),
        (Mining::SemiHard, 15, "semi_hard"),
        (Mining::Ge2e { similarity: false }, 10, "ge2e"),
        (Mining::Ge2e { similarity: true }, 5, "ge2e_similarity"),
    ];
    for (mining, cases, name) in miners {
        for case in 0..cases {
            let seed = 1000 + case as u64;
            let (rows, labels) = kink_free_batch(seed, 12, 5, 3, mining);
            let batch = EmbeddingBatch::new(to_tensor(&rows), labels.clone()).unwrap();
            let eval = evaluate_mining(&batch, mining, 0.2, seed);
            let x = rows.concat();
            let err = fd_relative_error(eval.grad.data(), &x, |v| {
                let t = Tensor::matrix(rows.len(), rows[0].len(), v.to_vec()).unwrap();
                evaluate_mining(&EmbeddingBatch::new(t, labels.clone()).unwrap(), mining, 0.2, seed).value
            });
            errors.push((format!("{name}#{case}"), err));
        }
    }

    for case in 0..10u64 {
        let mut rng = rng::stream(case, "fd-mlm", 0);
        let m = rng.gen_range(3..9);
        let v = 7;
        let logits = to_tensor(&gaussian_rows(&mut rng, m, v));
        let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..v)).collect();
        let (_, g) = ssl_mlm_loss(&logits, &targets).unwrap();
        let err = fd_relative_error(g.data(), logits.data(), |x| {
            ssl_mlm_loss(&Tensor::matrix(m, v, x.to_vec()).unwrap(), &targets).unwrap().0
        });
        errors.push((format!("mlm#{case}"), err));
    }

    for case in 0..15u64 {
        let mut rng = rng::stream(case, "fd-contrastive", 0);
        let groups = vec![rng.gen_range(2..6), rng.gen_range(4..8), 1];
        let m: usize = groups.iter().sum();
        let d = 4;
        let c = to_tensor(&gaussian_rows(&mut rng, m, d));
        let z = to_tensor(&gaussian_rows(&mut rng, m, d));
        let tau = 0.5;
        let eval = |c: &Tensor, z: &Tensor| {
            ssl_contrastive_loss(c, z, &groups, 3, tau, &mut rng::stream(case, "fd-distractors", 0)).unwrap()
        };
        let e = eval(&c, &z);
        let ec = fd_relative_error(e.grad_context.data(), c.data(), |x| {
            eval(&Tensor::matrix(m, d, x.to_vec()).unwrap(), &z).value
        });
        let ez = fd_relative_error(e.grad_latents.data(), z.data(), |x| {
            eval(&c, &Tensor::matrix(m, d, x.to_vec()).unwrap()).value
        });
        errors.push((format!("contrastive#{case}"), ec.max(ez)));
    }

    for case in 0..15u64 {
        let params = EncoderParams::init(&small_encoder(), case).unwrap();
        let mut rng = rng::stream(case, "fd-encoder", 0);
        let utts = random_utterances(&mut rng, 3, 3);
        let readout = to_tensor(&gaussian_rows(&mut rng, 6, 4));
        let (_, g) = encoder_mlm_loss(&params, &utts, &readout, case);
        let x = flat_params(&params);
        let err = fd_relative_error(&g, &x, |v| encoder_mlm_loss(&with_flat(&params, v), &utts, &readout, case).0);
        errors.push((format!("encoder_mlm#{case}"), err));
    }

    let mut case = 0u64;
    let mut attempt = 0u64;
    while case < 15 {
        attempt += 1;
        let params = EncoderParams::init(&small_encoder(), attempt).unwrap();
        let mut rng = rng::stream(attempt, "fd-encoder-triplet", 0);
        let utts = random_utterances(&mut rng, 8, 3);
        let labels: Vec<Option<LanguageId>> = (0..8).map(|i| Some((i % 3) as u32)).collect();
        match oracle_loss(&pooled_rows(&params, &utts), &labels, 0.2, Mining::Hard, 0) {
            Some(o) if o.gap > 1e-3 && o.value > 1e-3 => {}
            _ => continue,
        }
        let (_, g) = encoder_triplet_loss(&params, &utts, &labels);
        let x = flat_params(&params);
        let err = fd_relative_error(&g, &x, |v| encoder_triplet_loss(&with_flat(&params, v), &utts, &labels).0);
        errors.push((format!("encoder_triplet#{case}"), err));
        case += 1;
    }

    let elapsed = start.elapsed();
    let worst = errors.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = errors.len() == 100 && worst.1 < 1e-4 && elapsed < Duration::from_secs(60);
    report(
        5,
        "analytic gradients match central differences (rel err < 1e-4, 100 cases, < 1 min)",
        pass,
        &format!(
            "{} cases, worst {} at {:.2e}, {:.1}s",
            errors.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: brute-force oracles

#[test]
fn criterion_6_oracle_suites() {
    let mut worst_loss: f64 = 0.0;
    let mut mismatched_accounting = 0;
    let mut batches = 0;
    for (mining, tag) in [
        (Mining::Hard, 0u64),
        (Mining::SemiHard, 1),
        (Mining::Ge2e { similarity: false }, 2),
        (Mining::Ge2e { similarity: true }, 3),
    ] {
        for case in 0..50u64 {
            let seed = tag * 1000 + case;
            let mut rng = rng::stream(seed, "oracle-batch", 0);
            let b = rng.gen_range(4..=32);
            let classes = rng.gen_range(2..=8);
            let rows = gaussian_rows(&mut rng, b, 6);
            let mut labels = random_labels(&mut rng, b, classes, 0.2);
            // Guarantee at least one valid anchor.
            labels[0] = Some(0);
            labels[1] = Some(0);
            labels[2] = Some(1);
            let oracle = oracle_loss(&rows, &labels, 0.2, mining, seed).unwrap();
            let got = evaluate_mining(&EmbeddingBatch::new(to_tensor(&rows), labels).unwrap(), mining, 0.2, seed);
            worst_loss = worst_loss.max((got.value - oracle.value).abs());
            for ((i, c), (j, o)) in got.per_anchor.iter().zip(&oracle.per_anchor) {
                worst_loss = worst_loss.max((c - o).abs());
                if i != j {
                    mismatched_accounting += 1;
                }
            }
            if got.per_anchor.len() != oracle.per_anchor.len() || got.anchors_skipped != oracle.skipped {
                mismatched_accounting += 1;
            }
            batches += 1;
        }
    }

    let mut worst_eer: f64 = 0.0;
    for case in 0..50u64 {
        let mut rng = rng::stream(case, "oracle-eer", 0);
        let nt = rng.gen_range(1..40);
        let nn = rng.gen_range(1..120);
        // Coarse scores produce ties; shifted targets keep the curve non-trivial.
        let coarse = case % 2 == 0;
        let mut draw = |shift: f64| {
            let v: f64 = rng.sample::<f64, _>(StandardNormal) + shift;
            if coarse {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        };
        let targets: Vec<f64> = (0..nt).map(|_| draw(1.0)).collect();
        let nontargets: Vec<f64> = (0..nn).map(|_| draw(0.0)).collect();
        let got = eer_from_scores(&targets, &nontargets).unwrap();
        worst_eer = worst_eer.max((got - oracle_eer(&targets, &nontargets)).abs());
    }

    let mut code_mismatches = 0;
    for case in 0..5u64 {
        let cfg = EncoderConfig::default();
        let q = EncoderParams::init(&cfg, case).unwrap().quantizer();
        let mut rng = rng::stream(case, "oracle-quantizer", 0);
        let frames = to_tensor(&gaussian_rows(&mut rng, 50, cfg.feature_dim));
        let codes = q.quantize(&frames).unwrap();
        for (t, &code) in codes.iter().enumerate() {
            let x = frames.row(t);
            let mut proj: Vec<f64> = (0..q.projection.rows())
                .map(|r| (0..x.len()).map(|k| q.projection.at(r, k) * x[k]).sum())
                .collect();
            let norm = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
            proj.iter_mut().for_each(|v| *v /= norm);
            let dists: Vec<f64> = (0..q.codebook.rows())
                .map(|v| (0..proj.len()).map(|k| (q.codebook.at(v, k) - proj[k]).powi(2)).sum())
                .collect();
            let best = (0..dists.len()).fold(0, |b, v| if dists[v] < dists[b] { v } else { b });
            if best != code {
                code_mismatches += 1;
            }
        }
    }

    let pass = worst_loss <= 1e-9 && mismatched_accounting == 0 && worst_eer <= 1e-9 && code_mismatches == 0;
    report(
        6,
        "losses, EER and quantizer match brute-force oracles",
        pass,
        &format!(
            "{batches} loss batches worst |diff| {worst_loss:.1e}, accounting mismatches {mismatched_accounting}; \
             50 EER cases worst |diff| {worst_eer:.1e}; 250 quantized frames, {code_mismatches} code mismatches"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: reduction and determinism

fn small_corpus_config() -> CorpusConfig {
    CorpusConfig {
        total_languages: 5,
        pretrain_languages: 3,
        pretrain_per_language: 12,
        finetune_per_language: 6,
        dev_per_language: 2,
        test_per_language: 4,
        min_frames: 12,
        max_frames: 18,
        ..CorpusConfig::default()
    }
}

fn small_train_config(ssl: SslObjective) -> TrainConfig {
    TrainConfig {
        total_steps: 14,
        ssl_only_steps: 6,
        warmup_steps: 3,
        batch_languages: 3,
        batch_per_language: 2,
        ssl,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn states_bit_equal(a: &TrainState, b: &TrainState) -> bool {
    a.step == b.step
        && a.params.blocks().iter().zip(b.params.blocks()).all(|((_, x), (_, y))| x.bit_eq(y))
        && a.adam.to_blocks().iter().zip(b.adam.to_blocks()).all(|((_, x), (_, y))| x.bit_eq(&y))
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn run_pipeline(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut exp = ExperimentConfig::default();
    exp.output_dir = "out".into();
    exp.corpus = small_corpus_config();
    exp.encoder.num_classes = 5;
    exp.train = small_train_config(SslObjective::Mlm);
    exp.finetune.steps = 20;
    exp.finetune.warmup_steps = 5;
    std::fs::write(dir.join("exp.toml"), exp.to_toml()).unwrap();
    let lasr = env!("CARGO_BIN_EXE_lasr");
    let steps: [&[&str]; 4] = [
        &["gen-data", "--config", "exp.toml"],
        &["pretrain", "--config", "exp.toml"],
        &["finetune", "--config", "exp.toml", "--checkpoint", "out/pretrain/seed_0/final.ckpt"],
        &["evaluate", "--config", "exp.toml", "--model", "out/finetune/seed_0/model.ckpt"],
    ];
    for args in steps {
        let out = Command::new(lasr)
            .args(args)
            .current_dir(dir)
            .env_remove(lasr::experiment::OUTPUT_ROOT_ENV)
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    tree_bytes(&dir.join("out"))
}

#[test]
fn criterion_7_reduction_and_determinism() {
    let corpus = build_corpus(&small_corpus_config(), 3).unwrap();
    let enc = EncoderConfig {
        num_classes: 5,
        ..EncoderConfig::default()
    };

    // lambda = 0 with a supervised loss selected equals the plain SSL run.
    let mut lambda_zero = true;
    for ssl in [SslObjective::Mlm, SslObjective::Contrastive] {
        let base = TrainConfig {
            supervised_loss: SupervisedLoss::None,
            ..small_train_config(ssl)
        };
        let zero = TrainConfig {
            lambda: 0.0,
            supervised_loss: SupervisedLoss::Hard,
            ..small_train_config(ssl)
        };
        let (a, la) = pretrain(&corpus.pretrain, &base, initial_state(&enc, 5).unwrap(), 14, None).unwrap();
        let (b, lb) = pretrain(&corpus.pretrain, &zero, initial_state(&enc, 5).unwrap(), 14, None).unwrap();
        lambda_zero &= states_bit_equal(&a, &b)
            && la.iter().zip(&lb).all(|(x, y)| x.total.to_bits() == y.total.to_bits());
    }

    // Stopping at step 9, writing a checkpoint and resuming reproduces the
    // uninterrupted run, across the phase boundary.
    let dir = tempfile::tempdir().unwrap();
    let mut resume = true;
    for ssl in [SslObjective::Mlm, SslObjective::Contrastive] {
        let cfg = small_train_config(ssl);
        let (full, _) = pretrain(&corpus.pretrain, &cfg, initial_state(&enc, 5).unwrap(), 14, None).unwrap();
        let (half, _) = pretrain(&corpus.pretrain, &cfg, initial_state(&enc, 5).unwrap(), 9, None).unwrap();
        let path = dir.path().join("half.ckpt");
        half.to_checkpoint().save(&path).unwrap();
        let loaded = TrainState::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
        let (resumed, _) = pretrain(&corpus.pretrain, &cfg, loaded, 14, None).unwrap();
        resume &= states_bit_equal(&full, &resumed);
    }

    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let a = run_pipeline(first.path());
    let b = run_pipeline(second.path());
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let pipeline = a.len() == b.len() && differing.is_empty() && a.len() >= 8;

    report(
        7,
        "lambda=0 equals SSL baseline; resume is bit-exact; pipelines are byte-identical",
        lambda_zero && resume && pipeline,
        &format!(
            "lambda=0 identical {lambda_zero}, resume identical {resume}, pipeline files {} identical {pipeline}{}",
            a.len(),
            if differing.is_empty() { String::new() } else { format!(" (differ: {differing:?})") }
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: metric unit values

#[test]
fn criterion_8_metric_unit_values() {
    let v = EncoderConfig::default().vocab_size;
    let targets: Vec<usize> = (0..40).map(|i| (i * 7) % v).collect();
    let (mlm, _) = ssl_mlm_loss(&Tensor::zeros(&[40, v]), &targets).unwrap();
    let mlm_ok = (mlm - (v as f64).ln()).abs() <= 1e-9;

    let mut a = vec![0.0; 32];
    let mut b = vec![0.0; 32];
    a[3] = 2.5;
    b[17] = -0.7;
    b[3] = 0.0;
    let ang = angular_distance(&a, &b).unwrap();
    let ang_ok = (ang - 0.5).abs() <= 1e-6;

    // An untrained encoder with an untrained head, scored on the default test split.
    let exp = ExperimentConfig::default();
    let corpus = exp.build_corpus().unwrap();
    let model = EncoderParams::init(&exp.encoder, 0).unwrap();
    let trials = score_utterances(&model, &corpus.test).unwrap();
    let acc = accuracy(&trials).unwrap();
    let l = exp.encoder.num_classes as f64;
    let n = trials.len() as f64;
    let se = ((1.0 / l) * (1.0 - 1.0 / l) / n).sqrt();
    let chance_ok = (acc - 1.0 / l).abs() <= 3.0 * se;

    report(
        8,
        "uniform MLM = ln V, orthogonal angle = 0.5, random model at chance",
        mlm_ok && ang_ok && chance_ok,
        &format!(
            "mlm {mlm:.12} vs ln {v} = {:.12}; angle {ang:.9}; random accuracy {acc:.4} vs 1/{l} = {:.4} (3 SE = {:.4}, n = {n})",
            (v as f64).ln(),
            1.0 / l,
            3.0 * se
        ),
    );
}
