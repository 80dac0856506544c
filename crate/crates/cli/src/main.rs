use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use motif::classifier::{run_protocol, GridPoint, Task};
use motif::datapipe::{
    holdout_split, make_folds, participant_ids, read_recordings_dir, resample, synth_recordings,
    windows_of, write_recordings_dir, DataPrep, Fold, Recording,
};
use motif::lm::{pretrain_lm, EmbeddingTable};
use motif::pipeline::{Manifest, PipelineConfig};
use motif::pretrainer::{extract_tokens, pretrain_with, PretrainState};
use motif::quantizer::usage_stats;
use motif::repro::run_repro;
use motif::sax::{sax_discretize_all, SaxRepeat};
use motif::tokens::{
    class_histograms, frame_all, read_corpus, write_corpus, TokenSequence, Vocabulary,
};
use motif::Error;

#[derive(Parser)]
#[command(
    name = "motif",
    version,
    about = "Discrete motion tokens from accelerometer streams"
)]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON file overriding the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (a directory or a file, depending on the stage).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic four-class dataset, its folds and holdout split.
    Synth(Common),
    /// Validate and resample a directory of per-participant CSV recordings.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the VQ-CPC model and write a checkpoint.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Turn every window into a sequence of composite codewords.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Magnitude SAX tokens, or SAX-REPEAT with --repeat.
    Sax {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        repeat: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain a masked-token LM on the training tokens and export its embeddings.
    Lm {
        #[arg(long)]
        tokens: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Grid search and test evaluation of the recurrent classifier.
    Classify {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        folds: Option<PathBuf>,
        /// JSON array or TOML `[[grid]]` list of `{lr, l2}` points.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Frozen embedding table from `motif lm`.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Token statistics; per-class histograms with --histograms.
    Analyze {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        histograms: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run every acceptance check at desk scale and print a pass/fail table.
    Repro(Common),
}

fn config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg.resolved()?)
}

/// `DIR/recordings` when present, otherwise `DIR` itself.
fn recordings_dir(data: &Path) -> PathBuf {
    let nested = data.join("recordings");
    if nested.is_dir() {
        nested
    } else {
        data.to_path_buf()
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|_| Error::missing(path, what.to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes recordings, the five-fold plan and the holdout split under `out`.
fn write_dataset(
    recs: &[Recording],
    cfg: &PipelineConfig,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<()> {
    let rec_dir = out.join("recordings");
    write_recordings_dir(recs, &rec_dir)?;
    let ids = participant_ids(recs);
    let folds = make_folds(&ids, cfg.seed)?;
    let folds_path = out.join("folds.json");
    folds.save(&folds_path)?;
    let split_path = out.join("split.json");
    write_json(&split_path, &holdout_split(&ids, cfg.seed)?)?;
    for p in [&rec_dir, &folds_path, &split_path] {
        manifest.output(p)?;
    }
    log::info!(
        "{} participants, {} folds written to {}",
        ids.len(),
        folds.folds.len(),
        out.display()
    );
    Ok(())
}

/// Corpus, training-split vocabulary and split of a token directory.
fn write_tokens(
    out: &Path,
    seqs: &[TokenSequence],
    split: &Fold,
    manifest: &mut Manifest,
) -> Result<Vocabulary> {
    fs::create_dir_all(out)?;
    let train: Vec<&TokenSequence> = seqs
        .iter()
        .filter(|s| split.train.contains(&s.participant_id))
        .collect();
    let vocab = Vocabulary::build(train.iter().copied())?;
    let corpus = out.join("corpus.txt");
    write_corpus(&corpus, seqs)?;
    let vocab_path = out.join("vocab.json");
    vocab.save(&vocab_path)?;
    let split_path = out.join("split.json");
    write_json(&split_path, split)?;
    for p in [&corpus, &vocab_path, &split_path] {
        manifest.output(p)?;
    }
    log::info!(
        "{} sequences, vocabulary {} ({} observed symbols)",
        seqs.len(),
        vocab.size(),
        vocab.observed()
    );
    Ok(vocab)
}

struct TokenDir {
    seqs: Vec<TokenSequence>,
    vocab: Vocabulary,
    split: Fold,
}

fn read_tokens(dir: &Path, manifest: &mut Manifest) -> Result<TokenDir> {
    let corpus = dir.join("corpus.txt");
    let vocab_path = dir.join("vocab.json");
    let split_path = dir.join("split.json");
    let out = TokenDir {
        seqs: read_corpus(&corpus)?,
        vocab: Vocabulary::load(&vocab_path)?,
        split: read_json(
            &split_path,
            "holdout split; written by `motif extract` and `motif sax`",
        )?,
    };
    for p in [&corpus, &vocab_path, &split_path] {
        manifest.input(p)?;
    }
    Ok(out)
}

fn read_grid(path: &Path) -> Result<Vec<GridPoint>> {
    let text = fs::read_to_string(path).map_err(|_| Error::missing(path, "hyperparameter grid"))?;
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(serde_json::from_str(&text)?);
    }
    #[derive(serde::Deserialize)]
    struct GridFile {
        grid: Vec<GridPoint>,
    }
    let parsed: GridFile =
        toml::from_str(&text).map_err(|e| Error::format("grid", e.to_string()))?;
    Ok(parsed.grid)
}

/// Runs a subcommand; `Ok(false)` means it finished but a stage check failed.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::Synth(c) => {
            let cfg = config(&c)?;
            let mut m = Manifest::new("synth", &cfg);
            write_dataset(&synth_recordings(&cfg.synth), &cfg, &c.out, &mut m)?;
            m.write(&c.out.join("manifest.json"))?;
        }
        Command::Ingest { data, common: c } => {
            let cfg = config(&c)?;
            let mut m = Manifest::new("ingest", &cfg);
            let src = recordings_dir(&data);
            m.input(&src)?;
            let recs = read_recordings_dir(&src)?
                .iter()
                .map(|r| resample(r, cfg.window.rate_hz))
                .collect::<motif::Result<Vec<_>>>()?;
            write_dataset(&recs, &cfg, &c.out, &mut m)?;
            m.write(&c.out.join("manifest.json"))?;
        }
        Command::Pretrain { data, common: c } => {
            let cfg = config(&c)?;
            let mut m = Manifest::new("pretrain", &cfg);
            let src = recordings_dir(&data);
            m.input(&src)?;
            let recs = read_recordings_dir(&src)?;
            let prep = DataPrep::fit(&recs, &cfg.window, cfg.seed)?;
            let train = prep.windows(&recs, &prep.split.train)?;
            let val = prep.windows(&recs, &prep.split.val)?;
            log::info!(
                "pretraining on {} windows, validating on {}",
                train.len(),
                val.len()
            );
            let mut state = pretrain_with(&train, &val, &cfg.model, &cfg.pretrain, &mut |_| {})?;
            state.meta.data = Some(prep);
            state.save(&c.out)?;
            m.output(&c.out)?;
            m.write(&sidecar(&c.out, ".manifest.json"))?;
        }
        Command::Extract {
            data,
            checkpoint,
            common: c,
        } => {
            let cfg = config(&c)?;
            let mut m = Manifest::new("extract", &cfg);
            let ckpt = checkpoint.ok_or_else(|| {
                Error::missing(
                    "--checkpoint",
                    "pass the checkpoint written by `motif pretrain`",
                )
            })?;
            let state = PretrainState::load(&ckpt)?;
            m.input(&ckpt)?;
            let prep = state.meta.data.clone().ok_or_else(|| {
                Error::format(
                    "checkpoint",
                    "no preprocessing record; re-run `motif pretrain`",
                )
            })?;
            let src = recordings_dir(&data);
            m.input(&src)?;
            let recs = read_recordings_dir(&src)?;
            let windows = prep.windows(&recs, &participant_ids(&recs))?;
            let seqs = extract_tokens(&state, &windows)?;
            write_tokens(&c.out, &seqs, &prep.split, &mut m)?;
            let usage = usage_stats(seqs.iter().flat_map(|s| &s.ids));
            let code = &state.meta.model.codebook;
            let usage_path = c.out.join("usage.csv");
            usage.write_csv(&usage_path, code.groups, code.vars)?;
            m.output(&usage_path)?;
            log::info!(
                "{} distinct codewords of {} possible, entropy {:.2} bits",
                usage.distinct_codewords,
                code.composite_size(),
                usage.entropy_bits
            );
            m.write(&c.out.join("manifest.json"))?;
        }
        Command::Sax {
            data,
            repeat,
            common: c,
        } => {
            let cfg = config(&c)?;
            let mut m = Manifest::new(if repeat { "sax-repeat" } else { "sax" }, &cfg);
            let src = recordings_dir(&data);
            m.input(&src)?;
            let recs = read_recordings_dir(&src)?;
            let ids = participant_ids(&recs);
            let split = holdout_split(&ids, cfg.seed)?;
            let windows = windows_of(&recs, &ids, &cfg.window)?;
            let seqs = if repeat {
                let train = windows_of(&recs, &split.train, &cfg.window)?;
                SaxRepeat::fit(&train, &cfg.sax, &cfg.sax_repeat)?.transform(&windows)?
            } else {
                sax_discretize_all(&windows, &cfg.sax)?
            };
            write_tokens(&c.out, &seqs, &split, &mut m)?;
            m.write(&c.out.join("manifest.json"))?;
        }
        Command::Lm { tokens, common: c } => {
            let cfg = config(&c)?;
            let mut m = Manifest::new("lm", &cfg);
            let td = read_tokens(&tokens, &mut m)?;
            let train: Vec<TokenSequence> = td
                .seqs
                .iter()
                .filter(|s| td.split.train.contains(&s.participant_id))
                .cloned()
                .collect();
            let corpus = frame_all(&train, &td.vocab);
            let out = pretrain_lm(&corpus, td.vocab.size(), &cfg.lm)?;
            EmbeddingTable::from_matrix(&out.model.input_embeddings(), td.vocab.hash())
                .save(&c.out)?;
            m.output(&c.out)?;
            let history = sidecar(&c.out, ".history.json");
            write_json(&history, &out.history)?;
            m.output(&history)?;
            m.write(&sidecar(&c.out, ".manifest.json"))?;
        }
        Command::Classify {
            tokens,
            folds,
            grid,
            embeddings,
            common: c,
        } => {
            let cfg = config(&c)?;
            let mut m = Manifest::new("classify", &cfg);
            let td = read_tokens(&tokens, &mut m)?;
            let folds = folds.ok_or_else(|| {
                Error::missing(
                    "--folds",
                    "fold plan JSON; `motif synth` and `motif ingest` write one",
                )
            })?;
            let plan = motif::datapipe::FoldPlan::load(&folds)?;
            m.input(&folds)?;
            let grid = match grid {
                Some(p) => {
                    m.input(&p)?;
                    read_grid(&p)?
                }
                None => cfg.grid.clone(),
            };
            let table = match &embeddings {
                Some(p) => {
                    let t = EmbeddingTable::load(p)?;
                    t.check_vocab(td.vocab.hash())?;
                    m.input(p)?;
                    Some(t.to_matrix())
                }
                None => None,
            };
            let data: Vec<TokenSequence> = frame_all(&td.seqs, &td.vocab)
                .into_iter()
                .filter(|s| s.label.is_some())
                .collect();
            let classes: BTreeSet<u32> = data.iter().filter_map(|s| s.label).collect();
            let task = Task {
                vocab_size: td.vocab.size(),
                num_classes: classes.last().map_or(0, |&l| l as usize + 1),
            };
            let (report, _) = run_protocol(
                &data,
                &plan,
                &grid,
                &cfg.classifier,
                task,
                &cfg.protocol,
                table.as_ref(),
            )?;
            write_json(&c.out, &report)?;
            m.timed_output(&c.out)?;
            m.write(&sidecar(&c.out, ".manifest.json"))?;
            println!(
                "selected lr {} l2 {}; test macro F1 {:.4} +- {:.4} over {} runs",
                report.selected_point.lr,
                report.selected_point.l2,
                report.test_f1_mean,
                report.test_f1_std,
                report.test_runs.len()
            );
            if !report.audit.test_untouched_before_selection {
                log::error!("access audit: test data was read during model selection");
                return Ok(false);
            }
        }
        Command::Analyze {
            tokens,
            histograms,
            common: c,
        } => {
            let cfg = config(&c)?;
            let mut m = Manifest::new("analyze", &cfg);
            let corpus = tokens.join("corpus.txt");
            let seqs = read_corpus(&corpus)?;
            m.input(&corpus)?;
            fs::create_dir_all(&c.out)?;
            let usage = usage_stats(seqs.iter().flat_map(|s| &s.ids));
            let hist = class_histograms(&seqs);
            let mut ok = true;
            let mut per_class = serde_json::Map::new();
            for (class, h) in &hist.classes {
                let total: f64 = h.values().sum();
                ok &= (total - 1.0).abs() <= 1e-9;
                per_class.insert(
                    class.to_string(),
                    serde_json::json!({
                        "distinct_tokens": h.len(),
                        "top_fraction": hist.top_fraction(*class),
                        "fraction_sum": total,
                    }),
                );
            }
            let summary = c.out.join("summary.json");
            write_json(
                &summary,
                &serde_json::json!({
                    "sequences": seqs.len(),
                    "distinct_tokens": usage.distinct_codewords,
                    "entropy_bits": usage.entropy_bits,
                    "classes": per_class,
                }),
            )?;
            m.output(&summary)?;
            if histograms {
                let csv = c.out.join("histograms.csv");
                hist.write_csv(&csv)?;
                let svg = c.out.join("histograms.svg");
                fs::write(&svg, hist.to_svg(30, &|c| format!("class {c}")))?;
                m.output(&csv)?;
                m.output(&svg)?;
            }
            m.write(&c.out.join("manifest.json"))?;
            if !ok {
                log::error!("a class histogram does not sum to 1");
                return Ok(false);
            }
        }
        Command::Repro(c) => {
            let cfg = config(&c)?;
            let mut m = Manifest::new("repro", &cfg);
            let report = run_repro(&cfg)?;
            print!("{}", report.table());
            fs::create_dir_all(&c.out)?;
            let metrics = c.out.join("metrics.json");
            write_json(&metrics, &report.metrics)?;
            m.output(&metrics)?;
            let full = c.out.join("report.json");
            write_json(&full, &report)?;
            m.timed_output(&full)?;
            m.write(&c.out.join("manifest.json"))?;
            let passed = report.checks.iter().filter(|c| c.passed).count();
            println!("{passed}/{} checks passed", report.checks.len());
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
