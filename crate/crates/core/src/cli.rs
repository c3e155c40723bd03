//! Command-line front end. Exit codes: 0 success, 1 usage, 2 data, 3 numeric.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{derive_label_set, parse_corpus, to_jsonl, AnnotatedExample, CorpusFormat};
use crate::data::{LabelId, LabelSet, Sentence, TokenVectors};
use crate::decoder::decode_entities;
use crate::error::{Error, Result};
use crate::eval::{analysis_slices, attention_dump, evaluate_slice, SliceSpec, ATTENTION_HEADER};
use crate::tagging::{encode_grid, GridLabelMatrix};
use crate::trainer::{model_input, predict_corpus, train};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "gapgrid",
    version,
    about = "Discontinuous NER with gap-aware grid tagging"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the gold label grid of every example as `<out>/<id>.tsv`.
    Encode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode grid TSV files into entity mentions (JSONL).
    Decode {
        /// A grid file, or a directory of `<id>.tsv` files (requires --in).
        #[arg(long)]
        grid: PathBuf,
        /// Sentence length; taken from --in when omitted.
        #[arg(long)]
        n: Option<usize>,
        /// Corpus supplying ids, tokens and the label set.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Where to write the trained model.
        #[arg(long, default_value = "gapgrid.ckpt")]
        checkpoint: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Precomputed token vectors (JSONL) used instead of an embedding table.
        #[arg(long)]
        vectors: Option<PathBuf>,
    },
    /// Score predictions against gold annotations.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// all, discontinuous, overlapped or gap:K; every slice when omitted.
        #[arg(long)]
        slice: Option<String>,
    },
    /// Predict with a checkpoint, score every slice and dump attention weights.
    Analyze {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Gold corpus to predict on.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vectors: Option<PathBuf>,
        /// Score existing predictions instead of running a checkpoint.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Directory for predictions.jsonl, slices.tsv and attention.tsv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_DATA
            }
        }
    }
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Encode { input, out } => encode(&input, &out),
        Command::Decode {
            grid,
            n,
            input,
            out,
        } => decode(&grid, n, input.as_deref(), out.as_deref()),
        Command::Train {
            config,
            corpus,
            dev,
            checkpoint,
            seed,
            vectors,
        } => run_train(
            config.as_deref(),
            &corpus,
            dev.as_deref(),
            &checkpoint,
            seed,
            vectors.as_deref(),
        ),
        Command::Eval { pred, gold, slice } => run_eval(&pred, &gold, slice.as_deref()),
        Command::Analyze {
            checkpoint,
            corpus,
            vectors,
            pred,
            gold,
            out,
        } => match (checkpoint, corpus, pred, gold) {
            (Some(ck), Some(corpus), None, None) => {
                let out = out.ok_or_else(|| usage("analyze with --checkpoint needs --out"))?;
                analyze_checkpoint(&ck, &corpus, vectors.as_deref(), &out)
            }
            (None, None, Some(pred), Some(gold)) => {
                analyze_predictions(&pred, &gold, out.as_deref())
            }
            _ => Err(usage(
                "analyze takes either --checkpoint and --corpus, or --pred and --gold",
            )),
        },
    }
}

fn read_corpus(path: &Path) -> Result<Vec<AnnotatedExample>> {
    parse_corpus(path, CorpusFormat::Jsonl)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// File name for an example id; ids that are not plain names are refused.
fn grid_file(dir: &Path, id: &str) -> Result<PathBuf> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::Invalid(format!(
            "id `{id}` cannot be used as a file name"
        )));
    }
    Ok(dir.join(format!("{id}.tsv")))
}

fn encode(input: &Path, out: &Path) -> CliResult {
    let corpus = read_corpus(input)?;
    let labels = derive_label_set(&corpus);
    create_dir(out)?;
    let (mut encoded, mut lossy, mut failed) = (0, 0, 0);
    for ex in &corpus {
        match encode_grid(ex, &labels) {
            Ok((grid, report)) => {
                for c in report.lossy() {
                    eprintln!(
                        "warning: {}: cell ({}, {}) keeps {} over {}",
                        ex.id(),
                        c.row,
                        c.col,
                        labels.name(c.winner).unwrap_or("?"),
                        labels.name(c.loser).unwrap_or("?")
                    );
                }
                if report.lossy().next().is_some() {
                    lossy += 1;
                }
                write_file(&grid_file(out, ex.id())?, &grid.to_tsv(&labels))?;
                encoded += 1;
            }
            Err(e @ Error::TypeCollision { .. }) => {
                eprintln!("error: {}: {e}", ex.id());
                failed += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    println!("encoded={encoded} lossy={lossy} failed={failed}");
    if failed > 0 {
        return Err(Error::Invalid(format!("{failed} examples could not be encoded")).into());
    }
    Ok(())
}

fn decode_one(
    text: &str,
    sentence: Sentence,
    labels: Option<&LabelSet>,
) -> Result<AnnotatedExample> {
    let (grid, labels) = GridLabelMatrix::from_tsv(text, sentence.len(), labels)?;
    let mentions = decode_entities(&grid, &labels)?;
    AnnotatedExample::new(sentence, mentions)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn decode(grid: &Path, n: Option<usize>, input: Option<&Path>, out: Option<&Path>) -> CliResult {
    let corpus = input.map(read_corpus).transpose()?;
    let labels = corpus.as_deref().map(derive_label_set);
    let mut decoded = Vec::new();
    if grid.is_dir() {
        let corpus = corpus.ok_or_else(|| usage("decoding a directory needs --in"))?;
        for ex in &corpus {
            let text = read_text(&grid_file(grid, ex.id())?)?;
            decoded.push(decode_one(&text, ex.sentence().clone(), labels.as_ref())?);
        }
    } else {
        let text = read_text(grid)?;
        let stem = grid
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "1".into());
        let from_corpus = corpus
            .as_ref()
            .and_then(|c| c.iter().find(|ex| ex.id() == stem));
        let sentence = match (from_corpus, n) {
            (Some(ex), Some(n)) if n != ex.len() => {
                return Err(Error::Invalid(format!(
                    "--n {n} disagrees with `{stem}` ({} tokens)",
                    ex.len()
                ))
                .into())
            }
            (Some(ex), _) => ex.sentence().clone(),
            (None, Some(n)) => {
                // Without a corpus the tokens are unknown; emit placeholders.
                Sentence::new(stem, (0..n).map(|i| format!("t{i}")).collect())?
            }
            (None, None) => {
                return Err(usage(
                    "decode needs --n or an --in corpus containing the grid's id",
                ))
            }
        };
        decoded.push(decode_one(&text, sentence, labels.as_ref())?);
    }
    let jsonl = to_jsonl(&decoded);
    match out {
        Some(path) => write_file(path, &jsonl)?,
        None => print!("{jsonl}"),
    }
    Ok(())
}

fn run_train(
    config: Option<&Path>,
    corpus: &Path,
    dev: Option<&Path>,
    checkpoint: &Path,
    seed: Option<u64>,
    vectors: Option<&Path>,
) -> CliResult {
    let mut config = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    let train_set = read_corpus(corpus)?;
    let dev_set = dev.map(read_corpus).transpose()?.unwrap_or_default();
    let vectors = vectors.map(TokenVectors::load).transpose()?;
    let stdout = std::io::stdout();
    let outcome = train(
        &train_set,
        &dev_set,
        &config.model,
        &config.train,
        vectors.as_ref(),
        |record| {
            let mut lock = stdout.lock();
            let _ = writeln!(lock, "{}", record.metrics_line());
            let _ = lock.flush();
        },
    )?;
    for id in &outcome.report.skipped {
        eprintln!("warning: skipped `{id}`: entity types collide in one cell");
    }
    Checkpoint {
        model: outcome.model,
        labels: outcome.labels,
        vocab: outcome.vocab,
    }
    .save(checkpoint)?;
    println!("best_epoch={}", outcome.report.best_epoch);
    Ok(())
}

fn slice_table(
    pred: &[AnnotatedExample],
    gold: &[AnnotatedExample],
    slices: &[SliceSpec],
) -> Result<(String, String)> {
    let mut table = format!(
        "{:<14} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}\n",
        "slice", "P", "R", "F1", "tp", "pred", "gold"
    );
    let mut records = String::new();
    for &spec in slices {
        let r = evaluate_slice(pred, gold, spec)?;
        table.push_str(&format!(
            "{:<14} {:>7.4} {:>7.4} {:>7.4} {:>6} {:>6} {:>6}\n",
            spec.to_string(),
            r.precision,
            r.recall,
            r.f1,
            r.true_positives,
            r.predicted,
            r.gold
        ));
        records.push_str(&format!("slice={spec} {r}\n"));
    }
    Ok((table, records))
}

fn run_eval(pred: &Path, gold: &Path, slice: Option<&str>) -> CliResult {
    let pred = read_corpus(pred)?;
    let gold = read_corpus(gold)?;
    let slices = match slice {
        Some(s) => vec![s.parse::<SliceSpec>().map_err(|e| usage(e.to_string()))?],
        None => analysis_slices(&gold),
    };
    let (table, records) = slice_table(&pred, &gold, &slices)?;
    print!("{table}{records}");
    Ok(())
}

fn analyze_predictions(pred: &Path, gold: &Path, out: Option<&Path>) -> CliResult {
    let pred = read_corpus(pred)?;
    let gold = read_corpus(gold)?;
    let (table, records) = slice_table(&pred, &gold, &analysis_slices(&gold))?;
    print!("{table}{records}");
    if let Some(out) = out {
        create_dir(out)?;
        write_file(&out.join("slices.txt"), &records)?;
    }
    Ok(())
}

fn analyze_checkpoint(ck: &Path, corpus: &Path, vectors: Option<&Path>, out: &Path) -> CliResult {
    let ck = Checkpoint::load(ck)?;
    let gold = read_corpus(corpus)?;
    let vectors = vectors.map(TokenVectors::load).transpose()?;
    let (pred, capped) = predict_corpus(&ck.model, &ck.labels, &ck.vocab, &gold, vectors.as_ref())?;
    if capped > 0 {
        eprintln!("warning: {capped} examples exceeded the decoder path cap and predict nothing");
    }
    create_dir(out)?;
    write_file(&out.join("predictions.jsonl"), &to_jsonl(&pred))?;
    let (table, records) = slice_table(&pred, &gold, &analysis_slices(&gold))?;
    print!("{table}{records}");
    println!("capped={capped}");
    write_file(&out.join("slices.txt"), &records)?;

    let mut dump = format!("{ATTENTION_HEADER}\n");
    for ex in &gold {
        // Fragment and gap cells of the gold grid; examples whose grid cannot
        // be built under the checkpoint's labels are skipped.
        let Ok((grid, _)) = encode_grid(ex, &ck.labels) else {
            continue;
        };
        let cells: Vec<(usize, usize)> = grid
            .labelled()
            .filter(|&(_, _, l)| l == LabelId::FRAG || l == LabelId::GAP)
            .map(|(i, j, _)| (i, j))
            .collect();
        if cells.is_empty() {
            continue;
        }
        let view = ck
            .model
            .attention(&model_input(ex, &ck.vocab, vectors.as_ref())?)?;
        dump.push_str(&attention_dump(ex.id(), &view, &cells)?);
    }
    write_file(&out.join("attention.tsv"), &dump)?;
    Ok(())
}
