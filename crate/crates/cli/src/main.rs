use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use treeattn::analysis::{parse_trees, read_trees, write_records};
use treeattn::corpus::{load_dataset, read_raw, synth_generate, write_raw, SynthSizes, SynthTask};
use treeattn::train::{
    evaluate, prepare_run, run_training, Checkpoint, EpochReport, RunConfig, Trainer,
};
use treeattn::trees::tree_stats;
use treeattn::verify::{run_suite, Suite};
use treeattn::{AttentionMode, Level};

#[derive(Parser)]
#[command(
    name = "treeattn",
    version,
    about = "Structured attention over dependency trees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Report accuracy, mean loss and per-class counts of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Decode the maximum spanning tree of every unit at one level.
    ParseTrees(ParseTreesArgs),
    /// Summarize a file of trees.
    TreeStats(TreeStatsArgs),
    /// Generate a synthetic document-classification task.
    Synth(SynthArgs),
    /// Run built-in self-checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training data (JSON Lines).
    #[arg(long)]
    train: PathBuf,
    /// Development data used for model selection and early stopping.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// JSON file with `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Attention mode, applied to `--level` or to both levels.
    #[arg(long)]
    mode: Option<AttentionMode>,
    #[arg(long, requires = "mode")]
    level: Option<Level>,
    /// Output directory for metrics.csv and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, conflicts_with_all = ["config", "mode", "seed"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Print the result as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ParseTreesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    level: Level,
    /// Include scores and marginals in every record.
    #[arg(long)]
    marginals: bool,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TreeStatsArgs {
    /// JSON Lines file with a `heads` array per line.
    trees: PathBuf,
    /// Trees to compare edges against, aligned line by line.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Also write the statistics as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "pairing")]
    task: SynthTask,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Directory that receives train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    train_size: usize,
    #[arg(long, default_value_t = 500)]
    dev_size: usize,
    #[arg(long, default_value_t = 500)]
    test_size: usize,
}

#[derive(Args)]
struct VerifyArgs {
    /// gradcheck, oracle or speed; every suite when omitted.
    suite: Option<Suite>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::ParseTrees(a) => parse_trees_cmd(a),
        Command::TreeStats(a) => tree_stats_cmd(a),
        Command::Synth(a) => synth(a),
        Command::Verify(a) => verify(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn log_epoch(r: &EpochReport) {
    let rows: Vec<String> = r
        .rows
        .iter()
        .map(|m| format!("{} loss {:.4} acc {:.4}", m.split, m.loss, m.accuracy))
        .collect();
    let mark = if r.improved { " *" } else { "" };
    eprintln!("epoch {:>3}  {}{mark}", r.epoch, rows.join("  "));
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn train(a: TrainArgs) -> Result<bool> {
    let (mut trainer, train, dev) = match &a.resume {
        Some(path) => {
            let trainer = Trainer::resume(load_checkpoint(path)?)?;
            let train = load_dataset(&a.train, Some(&trainer.vocab))?.examples;
            let dev = match &a.dev {
                Some(p) => Some(load_dataset(p, Some(&trainer.vocab))?.examples),
                None => None,
            };
            (trainer, train, dev)
        }
        None => {
            let mut run = match &a.config {
                Some(p) => RunConfig::from_file(p)
                    .with_context(|| format!("reading config {}", p.display()))?,
                None => RunConfig::default(),
            };
            if let Some(seed) = a.seed {
                run.train.seed = seed;
            }
            if let Some(mode) = a.mode {
                match a.level {
                    Some(level) => run.model.level_mut(level).mode = mode,
                    None => {
                        run.model.sentence.mode = mode;
                        run.model.document.mode = mode;
                    }
                }
            }
            let train_raw =
                read_raw(&a.train).with_context(|| format!("reading {}", a.train.display()))?;
            let dev_raw = match &a.dev {
                Some(p) => Some(read_raw(p).with_context(|| format!("reading {}", p.display()))?),
                None => None,
            };
            let skipped = train_raw.skipped + dev_raw.as_ref().map_or(0, |d| d.skipped);
            if skipped > 0 {
                eprintln!("warning: skipped {skipped} empty documents");
            }
            let prepared = prepare_run(run, &train_raw, dev_raw.as_ref())?;
            (prepared.trainer, prepared.train, prepared.dev)
        }
    };
    if let Some(epochs) = a.epochs {
        trainer.config.epochs = epochs;
    }
    let outcome = run_training(
        &mut trainer,
        &train,
        dev.as_deref(),
        Some(&a.out),
        log_epoch,
    )?;
    match (outcome.best_epoch, outcome.best_dev_accuracy) {
        (Some(e), Some(acc)) => eprintln!("best dev accuracy {acc:.4} at epoch {e}"),
        _ => eprintln!("finished {} epochs", trainer.progress.epoch),
    }
    eprintln!("wrote {}", a.out.display());
    Ok(true)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<bool> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.data, Some(&ckpt.vocab))?;
    let ev = evaluate(&ckpt.model, &data.examples)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&ev)?);
    } else {
        println!("examples   {}", ev.total);
        println!(
            "accuracy   {:.4} ({}/{})",
            ev.accuracy, ev.correct, ev.total
        );
        println!("mean loss  {:.6}", ev.mean_loss);
        println!("class  support  predicted  correct");
        for (c, counts) in ev.per_class.iter().enumerate() {
            println!(
                "{c:>5}  {:>7}  {:>9}  {:>7}",
                counts.support, counts.predicted, counts.correct
            );
        }
    }
    Ok(true)
}

fn parse_trees_cmd(a: ParseTreesArgs) -> Result<bool> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.data, Some(&ckpt.vocab))?;
    let records = parse_trees(&ckpt.model, &data.examples, a.level, a.marginals)?;
    match &a.out {
        Some(p) => {
            let mut w = BufWriter::new(
                File::create(p).with_context(|| format!("creating {}", p.display()))?,
            );
            write_records(&mut w, &records)?;
            w.flush()?;
            eprintln!("wrote {} trees to {}", records.len(), p.display());
        }
        None => {
            let mut w = BufWriter::new(io::stdout().lock());
            write_records(&mut w, &records)?;
            w.flush()?;
        }
    }
    Ok(true)
}

fn tree_stats_cmd(a: TreeStatsArgs) -> Result<bool> {
    let trees = read_trees(&a.trees).with_context(|| format!("reading {}", a.trees.display()))?;
    let reference = match &a.reference {
        Some(p) => Some(read_trees(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let stats = tree_stats(&trees, reference.as_deref())?;
    print!("{}", stats.to_table());
    if let Some(p) = &a.csv {
        fs::write(p, stats.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(true)
}

fn synth(a: SynthArgs) -> Result<bool> {
    let sizes = SynthSizes {
        train: a.train_size,
        dev: a.dev_size,
        test: a.test_size,
    };
    let splits = synth_generate(a.task, sizes, a.seed);
    fs::create_dir_all(&a.out)?;
    for (name, examples) in [
        ("train", &splits.train),
        ("dev", &splits.dev),
        ("test", &splits.test),
    ] {
        let path = a.out.join(format!("{name}.jsonl"));
        let mut w = BufWriter::new(File::create(&path)?);
        write_raw(&mut w, examples)?;
        w.flush()?;
        eprintln!("wrote {} examples to {}", examples.len(), path.display());
    }
    Ok(true)
}

fn verify(a: VerifyArgs) -> Result<bool> {
    let suites = match a.suite {
        Some(s) => vec![s],
        None => Suite::ALL.to_vec(),
    };
    let mut all = true;
    for suite in suites {
        let report = run_suite(suite)?;
        println!("{report}");
        all &= report.passed();
    }
    Ok(all)
}
