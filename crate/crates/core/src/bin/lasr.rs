use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use lasr::encoder::Checkpoint;
use lasr::evalkit::{score_utterances, split_report, write_trials};
use lasr::experiment::{run_sweep, write_resolved_config, ExperimentConfig, Phase1Cache, SweepAxis};
use lasr::langsim::{read_corpus, write_corpus};
use lasr::langsim::Corpus;
use lasr::mining::corrupt_labels;
use lasr::rng;
use lasr::trainer::{finetune, initial_state, pretrain, write_log_csv, CheckpointSink, FinetuneConfig, TrainState};

/// Label-aware speech representation learning on synthetic multilingual data.
#[derive(Parser)]
#[command(name = "lasr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default experiment config as TOML.
    DefaultConfig,
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory (default: <output>/corpus).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train an encoder (SSL phase, then LASR phase).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Training seed (default: first entry of `seeds`).
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this step (default: train.total_steps).
        #[arg(long)]
        until: Option<u64>,
    },
    /// Fine-tune the classifier on the fine-tuning split.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a fine-tuned model and write the metrics report.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
        /// Name of the output subdirectory (default: the model file stem).
        #[arg(long)]
        name: Option<String>,
    },
    /// Run one ablation axis over all configured seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Print a report or sweep CSV as an aligned table.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Lambda,
    Noise,
    Loss,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    Dev,
    Test,
}

fn corpus_dir(cfg: &ExperimentConfig, arg: Option<PathBuf>) -> PathBuf {
    arg.unwrap_or_else(|| cfg.output_root().join("corpus"))
}

fn load_corpus(cfg: &ExperimentConfig, dir: &Path) -> Result<Corpus> {
    let corpus = read_corpus(dir)
        .with_context(|| format!("reading corpus at {} (run `lasr gen-data` first)", dir.display()))?;
    if corpus.config != cfg.corpus || corpus.master_seed != cfg.corpus_seed {
        bail!(
            "corpus at {} was generated from a different corpus config or seed",
            dir.display()
        );
    }
    Ok(corpus)
}

fn seed_of(cfg: &ExperimentConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(cfg.seeds[0])
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml());
        }
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = corpus_dir(&cfg, out);
            let corpus = cfg.build_corpus()?;
            let manifest = write_corpus(&corpus, &dir)?;
            write_resolved_config(&cfg, &dir)?;
            println!(
                "wrote {} languages ({} overlap) to {}",
                manifest.languages.len(),
                manifest.overlap.len(),
                dir.display()
            );
        }
        Command::Pretrain {
            config,
            corpus,
            seed,
            resume,
            until,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let corpus = load_corpus(&cfg, &corpus_dir(&cfg, corpus))?;
            let seed = seed_of(&cfg, seed);
            let train = lasr::trainer::TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let dir = cfg.output_root().join("pretrain").join(format!("seed_{seed}"));
            write_resolved_config(&cfg, &dir)?;
            let data = if cfg.corruption.p > 0.0 {
                let (k, plan) = corrupt_labels(
                    &corpus,
                    cfg.corruption.mode,
                    cfg.corruption.p,
                    &mut rng::stream(seed, "corruption", 0),
                )?;
                plan.save(&dir.join("corruption_plan.json"))?;
                k
            } else {
                corpus
            };
            let state = match resume {
                Some(path) => TrainState::from_checkpoint(Checkpoint::load(&path)?)?,
                None => initial_state(&cfg.encoder, seed)?,
            };
            let sink = CheckpointSink {
                dir: dir.clone(),
                every: train.checkpoint_every,
            };
            let until = until.unwrap_or(train.total_steps);
            let (state, log) = pretrain(&data.pretrain, &train, state, until, Some(&sink))?;
            write_log_csv(&dir.join("log.csv"), &log)?;
            let out = dir.join("final.ckpt");
            state.to_checkpoint().save(&out)?;
            println!("pretrained to step {} -> {}", state.step, out.display());
        }
        Command::Finetune {
            config,
            checkpoint,
            corpus,
            seed,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let corpus = load_corpus(&cfg, &corpus_dir(&cfg, corpus))?;
            let seed = seed_of(&cfg, seed);
            let ckpt = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            if ckpt.params.config != cfg.encoder {
                bail!(
                    "checkpoint {} has encoder shape {:?}, config expects {:?}",
                    checkpoint.display(),
                    ckpt.params.config,
                    cfg.encoder
                );
            }
            let ft = FinetuneConfig {
                seed,
                ..cfg.finetune.clone()
            };
            let model = finetune(&ckpt.params, &corpus.finetune_train, &ft)?;
            let dir = cfg.output_root().join("finetune").join(format!("seed_{seed}"));
            write_resolved_config(&cfg, &dir)?;
            let out = dir.join("model.ckpt");
            Checkpoint {
                params: model,
                step: ckpt.step,
                extra: Vec::new(),
            }
            .save(&out)?;
            println!("fine-tuned model -> {}", out.display());
        }
        Command::Evaluate {
            config,
            model,
            corpus,
            split,
            name,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let corpus = load_corpus(&cfg, &corpus_dir(&cfg, corpus))?;
            let ckpt = Checkpoint::load(&model).with_context(|| format!("loading model {}", model.display()))?;
            if ckpt.params.config != cfg.encoder {
                bail!("model {} does not match the configured encoder", model.display());
            }
            let utts = match split {
                EvalSplit::Dev => &corpus.dev,
                EvalSplit::Test => &corpus.test,
            };
            let trials = score_utterances(&ckpt.params, utts)?;
            let report = split_report(&trials, &corpus.overlap, &corpus.nonoverlap)?;
            let name = name.unwrap_or_else(|| {
                model
                    .file_stem()
                    .map_or("model".into(), |s| s.to_string_lossy().into_owned())
            });
            let dir = cfg.output_root().join("evaluate").join(name);
            write_resolved_config(&cfg, &dir)?;
            write_trials(&dir.join("trials.csv"), &trials)?;
            fs::write(dir.join("report.csv"), report.to_csv())?;
            print!("{}", report.to_table());
        }
        Command::Sweep { config, axis, corpus } => {
            let cfg = ExperimentConfig::load(&config)?;
            let corpus = load_corpus(&cfg, &corpus_dir(&cfg, corpus))?;
            let axis = match axis {
                Axis::Lambda => SweepAxis::Lambda,
                Axis::Noise => SweepAxis::Noise,
                Axis::Loss => SweepAxis::Loss,
            };
            let dir = cfg.output_root().join(format!("sweep_{}", axis.name()));
            write_resolved_config(&cfg, &dir)?;
            let mut cache = Phase1Cache::new();
            let csv = run_sweep(&cfg, &corpus, axis, &dir, &mut cache, |value, r| {
                eprintln!(
                    "{} {value} seed {}: accuracy {:.4}",
                    axis.name(),
                    r.cell.seed,
                    r.report.overall.accuracy
                );
            })?;
            print!("{}", aligned(&csv));
        }
        Command::Report { input } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            print!("{}", aligned(&text));
        }
    }
    Ok(())
}

/// Pads CSV cells into columns; fractional metric cells are shown as percentages.
fn aligned(csv: &str) -> String {
    let rows: Vec<Vec<String>> = csv
        .lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            let header: Vec<&str> = csv.lines().next().unwrap_or("").split(',').collect();
            l.split(',')
                .enumerate()
                .map(|(j, c)| {
                    let col = header.get(j).copied().unwrap_or("");
                    let metric = ["accuracy", "macro_f1", "eer"].iter().any(|m| col.ends_with(m));
                    match c.parse::<f64>() {
                        Ok(v) if i > 0 && metric => format!("{:.2}%", 100.0 * v),
                        _ => c.to_string(),
                    }
                })
                .collect()
        })
        .collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|j| rows.iter().filter_map(|r| r.get(j)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = r.iter().enumerate().map(|(j, c)| format!("{c:>w$}", w = widths[j])).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
