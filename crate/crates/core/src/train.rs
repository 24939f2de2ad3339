//! Training loop, evaluation and checkpoints.
//!
//! Every example gets its own tape. Gradients of a batch are summed in batch
//! order, averaged, regularized and applied with Adagrad. Batch order and
//! dropout masks are derived from the run seed, the epoch and the example
//! index, so a run (or a resumed run) is reproducible bit for bit.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{make_batches, Example, RawDataset, Vocabulary, DEFAULT_MIN_COUNT};
use crate::encoders::{GradBuffer, Model, ModelConfig, Task, NLI_CLASSES};
use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;

pub const ADAGRAD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Weight of `(l2 / 2) * |theta|^2`, summed over every non-embedding matrix.
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate on the dev set every this many epochs.
    pub eval_every: usize,
    /// Stop after this many evaluations without a dev accuracy improvement.
    pub patience: Option<usize>,
    /// Rescale the batch gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    /// Tokens need more than this many occurrences to enter the vocabulary.
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            l2: 1e-4,
            batch_size: 32,
            epochs: 10,
            seed: 1,
            eval_every: 1,
            patience: Some(5),
            clip_norm: None,
            min_count: DEFAULT_MIN_COUNT,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!(
                "l2 must be non-negative, got {}",
                self.l2
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch_size and eval_every must be positive".into(),
            ));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!(
                    "clip_norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

/// `accum += g*g; param -= lr * g / (sqrt(accum) + eps)`
pub fn adagrad_step(
    param: &mut Matrix,
    grad: &Matrix,
    accum: &mut Matrix,
    lr: f64,
    eps: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != accum.shape() {
        return Err(shape_err(
            "adagrad_step",
            format!(
                "param {:?}, grad {:?}, accumulator {:?}",
                param.shape(),
                grad.shape(),
                accum.shape()
            ),
        ));
    }
    adagrad_slice(param.data_mut(), grad.data(), accum.data_mut(), lr, eps);
    Ok(())
}

fn adagrad_slice(param: &mut [f64], grad: &[f64], accum: &mut [f64], lr: f64, eps: f64) {
    for ((p, g), a) in param.iter_mut().zip(grad).zip(accum.iter_mut()) {
        *a += g * g;
        *p -= lr * g / (a.sqrt() + eps);
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for stream `stream` of epoch `epoch` under run seed `seed`.
pub fn derive_seed(seed: u64, epoch: u64, stream: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ epoch) ^ stream)
}

const INIT_STREAM: u64 = u64::MAX;
const BATCH_STREAM: u64 = u64::MAX - 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassCounts {
    pub support: usize,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub per_class: Vec<ClassCounts>,
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

/// Accuracy, per-class counts and mean cross-entropy with dropout disabled.
pub fn evaluate(model: &Model, examples: &[Example]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = model.config().num_classes;
    let mut per_class = vec![
        ClassCounts {
            support: 0,
            predicted: 0,
            correct: 0,
        };
        classes
    ];
    let mut loss = 0.0;
    let mut correct = 0;
    for ex in examples {
        let label = ex.label();
        if label >= classes {
            return Err(Error::DimMismatch(format!(
                "label {label} but the model has {classes} classes"
            )));
        }
        let probs = model.predict(ex)?;
        let guess = argmax(&probs);
        loss -= probs[label].ln();
        per_class[label].support += 1;
        per_class[guess].predicted += 1;
        if guess == label {
            per_class[label].correct += 1;
            correct += 1;
        }
    }
    Ok(Evaluation {
        total: examples.len(),
        correct,
        accuracy: correct as f64 / examples.len() as f64,
        mean_loss: loss / examples.len() as f64,
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{}",
            self.epoch, self.split, self.loss, self.accuracy
        )
    }
}

/// Optimizer state that travels with a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Epochs completed.
    pub epoch: usize,
    pub best_dev_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Evaluations since the last improvement.
    pub stale: usize,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    accum: Vec<Matrix>,
    pub progress: Progress,
}

#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub rows: Vec<MetricRow>,
    pub improved: bool,
    pub stop: bool,
}

impl Trainer {
    /// Fresh model with parameters seeded from the run seed.
    pub fn new(model_config: ModelConfig, config: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config, derive_seed(config.seed, 0, INIT_STREAM))?;
        let accum = model
            .params()
            .values()
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Ok(Trainer {
            model,
            config,
            vocab,
            accum,
            progress: Progress {
                epoch: 0,
                best_dev_accuracy: None,
                best_epoch: None,
                stale: 0,
            },
        })
    }

    /// Checks a dataset against the model before any update happens.
    pub fn check_data(&self, examples: &[Example]) -> Result<()> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let cfg = self.model.config();
        for (i, ex) in examples.iter().enumerate() {
            if ex.label() >= cfg.num_classes {
                return Err(Error::DimMismatch(format!(
                    "example {i} has label {} but the model has {} classes",
                    ex.label(),
                    cfg.num_classes
                )));
            }
            if let Some(t) = ex.tokens().find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::DimMismatch(format!("example {i} has token id {t}")));
            }
        }
        Ok(())
    }

    fn apply(&mut self, mut grads: GradBuffer) -> Result<()> {
        let embed = self.model.embedding_id();
        let lr = self.config.learning_rate;
        for id in self.model.params().ids() {
            if id == embed || self.config.l2 == 0.0 {
                continue;
            }
            let decay = self.model.params().get(id).scale(self.config.l2);
            match &mut grads.dense[id.index()] {
                Some(g) => g.add_assign(&decay)?,
                slot @ None => *slot = Some(decay),
            }
        }
        if let Some(max) = self.config.clip_norm {
            let norm = grads.squared_norm().sqrt();
            if norm > max {
                grads.scale(max / norm);
            }
        }
        let params = self.model.params_mut();
        for id in params.ids().collect::<Vec<_>>() {
            if id == embed {
                continue;
            }
            if let Some(g) = &grads.dense[id.index()] {
                adagrad_step(
                    params.get_mut(id),
                    g,
                    &mut self.accum[id.index()],
                    lr,
                    ADAGRAD_EPS,
                )?;
            }
        }
        let table = params.get_mut(embed);
        let width = table.cols();
        let acc = &mut self.accum[embed.index()];
        for (&row, g) in &grads.embed_rows {
            let range = row * width..(row + 1) * width;
            adagrad_slice(
                &mut table.data_mut()[range.clone()],
                g,
                &mut acc.data_mut()[range],
                lr,
                ADAGRAD_EPS,
            );
        }
        Ok(())
    }

    /// Runs one epoch of updates; returns `(mean loss, accuracy)` of the
    /// training forward passes.
    pub fn train_epoch(&mut self, examples: &[Example]) -> Result<(f64, f64)> {
        let epoch = self.progress.epoch as u64 + 1;
        let lengths: Vec<usize> = examples.iter().map(Example::token_count).collect();
        let batches = make_batches(
            &lengths,
            self.config.batch_size,
            derive_seed(self.config.seed, epoch, BATCH_STREAM),
        );
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        for batch in &batches {
            let mut grads = self.model.empty_grads();
            for &i in batch {
                let ex = &examples[i];
                let mut tape = Tape::training(derive_seed(self.config.seed, epoch, i as u64));
                let bound = self.model.bind_example(&mut tape, ex)?;
                let log_probs = self.model.log_probs(&mut tape, &bound, ex)?;
                let loss = crate::encoders::nll(&mut tape, log_probs, ex.label())?;
                let value = tape.value(loss)[(0, 0)];
                if !value.is_finite() {
                    return Err(Error::NonFinite);
                }
                total_loss += value;
                if argmax(tape.value(log_probs).data()) == ex.label() {
                    correct += 1;
                }
                let g = tape.backward(loss)?;
                self.model.accumulate(&bound, &g, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            self.apply(grads)?;
        }
        self.progress.epoch += 1;
        let n = examples.len() as f64;
        Ok((total_loss / n, correct as f64 / n))
    }

    /// One epoch plus dev evaluation and early-stopping bookkeeping.
    pub fn step(&mut self, train: &[Example], dev: Option<&[Example]>) -> Result<EpochReport> {
        let (loss, accuracy) = self.train_epoch(train)?;
        let epoch = self.progress.epoch;
        let mut rows = vec![MetricRow {
            epoch,
            split: "train".into(),
            loss,
            accuracy,
        }];
        let mut improved = false;
        let mut stop = epoch >= self.config.epochs;
        if let Some(dev) = dev.filter(|_| epoch.is_multiple_of(self.config.eval_every) || stop) {
            let ev = evaluate(&self.model, dev)?;
            rows.push(MetricRow {
                epoch,
                split: "dev".into(),
                loss: ev.mean_loss,
                accuracy: ev.accuracy,
            });
            improved = self
                .progress
                .best_dev_accuracy
                .is_none_or(|b| ev.accuracy > b);
            if improved {
                self.progress.best_dev_accuracy = Some(ev.accuracy);
                self.progress.best_epoch = Some(epoch);
                self.progress.stale = 0;
            } else {
                self.progress.stale += 1;
            }
            if self
                .config
                .patience
                .is_some_and(|p| self.progress.stale >= p)
            {
                stop = true;
            }
        }
        Ok(EpochReport {
            epoch,
            rows,
            improved,
            stop,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            train: Some(self.config.clone()),
            progress: Some(self.progress.clone()),
            accumulators: Some(self.accum.clone()),
        }
    }

    /// Continues a run from a checkpoint that carries optimizer state.
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let (Some(config), Some(progress), Some(accum)) =
            (ckpt.train, ckpt.progress, ckpt.accumulators)
        else {
            return Err(Error::Checkpoint(
                "checkpoint has no optimizer state".into(),
            ));
        };
        Ok(Trainer {
            model: ckpt.model,
            config,
            vocab: ckpt.vocab,
            accum,
            progress,
        })
    }
}

/// A trainer plus its indexed data.
pub struct PreparedRun {
    pub trainer: Trainer,
    pub train: Vec<Example>,
    pub dev: Option<Vec<Example>>,
}

/// Builds the vocabulary from the training split, fills in the vocabulary
/// size and (when left at 0) the class count, then indexes both splits.
pub fn prepare_run(
    run: RunConfig,
    train: &RawDataset,
    dev: Option<&RawDataset>,
) -> Result<PreparedRun> {
    let RunConfig {
        mut model,
        train: config,
    } = run;
    if train.examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let vocab = train.build_vocab(config.min_count);
    model.vocab_size = vocab.len();
    if model.num_classes == 0 {
        model.num_classes = match model.task {
            Task::Nli => NLI_CLASSES,
            Task::Document => {
                let top = train.examples.iter().map(|e| e.label()).max().unwrap_or(0);
                (top + 1).max(2)
            }
        };
    }
    let train_ex = train.index(&vocab);
    let dev_ex = dev.map(|d| d.index(&vocab));
    let trainer = Trainer::new(model, config, vocab)?;
    trainer.check_data(&train_ex)?;
    if let Some(d) = &dev_ex {
        trainer.check_data(d)?;
    }
    Ok(PreparedRun {
        trainer,
        train: train_ex,
        dev: dev_ex,
    })
}

/// Artifacts written by [`run_training`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricRow>,
    pub best_epoch: Option<usize>,
    pub best_dev_accuracy: Option<f64>,
    pub metrics_path: Option<PathBuf>,
}

/// Trains until the epoch budget or early stopping ends the run. With
/// `out`, writes `metrics.csv`, `last.{json,bin}` after every epoch and
/// `best.{json,bin}` whenever dev accuracy improves.
pub fn run_training(
    trainer: &mut Trainer,
    train: &[Example],
    dev: Option<&[Example]>,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    trainer.check_data(train)?;
    if let Some(dev) = dev {
        trainer.check_data(dev)?;
    }
    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            let fresh = trainer.progress.epoch == 0 || !path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}")?;
            }
            Some((f, path))
        }
        None => None,
    };
    let mut rows = Vec::new();
    while trainer.progress.epoch < trainer.config.epochs {
        let report = trainer.step(train, dev)?;
        if let (Some(dir), Some((f, _))) = (out, metrics.as_mut()) {
            for r in &report.rows {
                writeln!(f, "{}", r.csv())?;
            }
            f.flush()?;
            let ckpt = trainer.checkpoint();
            ckpt.save(&dir.join("last"))?;
            if report.improved || dev.is_none() {
                ckpt.save(&dir.join("best"))?;
            }
        }
        on_epoch(&report);
        rows.extend(report.rows.iter().cloned());
        if report.stop {
            break;
        }
    }
    Ok(TrainOutcome {
        rows,
        best_epoch: trainer.progress.best_epoch,
        best_dev_accuracy: trainer.progress.best_dev_accuracy,
        metrics_path: metrics.map(|(_, p)| p),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vocabulary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    progress: Option<Progress>,
    params: Vec<Entry>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    accumulators: Option<Vec<Entry>>,
}

const FORMAT: &str = "treeattn-checkpoint";
const VERSION: u32 = 1;

/// A model with its vocabulary and, optionally, optimizer state.
///
/// Stored as `<stem>.json` (config, vocabulary, parameter names, shapes and
/// byte offsets) next to `<stem>.bin` (the matrices back to back).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub train: Option<TrainConfig>,
    pub progress: Option<Progress>,
    pub accumulators: Option<Vec<Matrix>>,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// `foo`, `foo.json` and `foo.bin` all name the checkpoint stem `foo`.
pub fn checkpoint_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

impl Checkpoint {
    pub fn save(&self, stem: &Path) -> Result<()> {
        let stem = checkpoint_stem(stem);
        let mut bin = BufWriter::new(File::create(with_ext(&stem, "bin"))?);
        let mut offset = 0u64;
        let mut write_all = |names: Vec<String>, mats: &[Matrix]| -> Result<Vec<Entry>> {
            let mut entries = Vec::with_capacity(mats.len());
            for (name, m) in names.into_iter().zip(mats) {
                m.write_to(&mut bin)?;
                entries.push(Entry {
                    name,
                    rows: m.rows(),
                    cols: m.cols(),
                    offset,
                });
                offset += m.encoded_len() as u64;
            }
            Ok(entries)
        };
        let names: Vec<String> = self
            .model
            .params()
            .iter()
            .map(|(n, _)| n.to_string())
            .collect();
        let params = write_all(names.clone(), self.model.params().values())?;
        let accumulators = match &self.accumulators {
            Some(acc) => Some(write_all(names, acc)?),
            None => None,
        };
        bin.flush()?;
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            config: self.model.config().clone(),
            vocab: self.vocab.clone(),
            train: self.train.clone(),
            progress: self.progress.clone(),
            params,
            accumulators,
        };
        let mut json = BufWriter::new(File::create(with_ext(&stem, "json"))?);
        serde_json::to_writer_pretty(&mut json, &manifest)?;
        json.write_all(b"\n")?;
        json.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let stem = checkpoint_stem(path);
        let manifest: Manifest =
            serde_json::from_reader(BufReader::new(File::open(with_ext(&stem, "json"))?))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        if manifest.vocab.len() != manifest.config.vocab_size {
            return Err(Error::DimMismatch(format!(
                "vocabulary has {} entries, config says {}",
                manifest.vocab.len(),
                manifest.config.vocab_size
            )));
        }
        let mut model = Model::new(manifest.config.clone(), 0)?;
        let mut bin = BufReader::new(File::open(with_ext(&stem, "bin"))?);
        let mut read = |entries: &[Entry]| -> Result<Vec<Matrix>> {
            if entries.len() != model.params().len() {
                return Err(Error::DimMismatch(format!(
                    "checkpoint lists {} matrices, the model has {}",
                    entries.len(),
                    model.params().len()
                )));
            }
            let mut out = Vec::with_capacity(entries.len());
            for (e, (name, expect)) in entries.iter().zip(model.params().iter()) {
                if e.name != name || (e.rows, e.cols) != expect.shape() {
                    return Err(Error::DimMismatch(format!(
                        "expected {name} {:?}, found {} ({}, {})",
                        expect.shape(),
                        e.name,
                        e.rows,
                        e.cols
                    )));
                }
                bin.seek(SeekFrom::Start(e.offset))?;
                let m = Matrix::read_from(&mut bin)?;
                if m.shape() != expect.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name} has shape {:?} on disk",
                        m.shape()
                    )));
                }
                out.push(m);
            }
            Ok(out)
        };
        let params = read(&manifest.params)?;
        let accumulators = manifest
            .accumulators
            .as_deref()
            .map(&mut read)
            .transpose()?;
        let mut extra = [0u8; 1];
        if bin.read(&mut extra)? != 0 && manifest.accumulators.is_some() {
            return Err(Error::Checkpoint(
                "trailing bytes after the last matrix".into(),
            ));
        }
        for (slot, m) in model.params_mut().values_mut().iter_mut().zip(params) {
            *slot = m;
        }
        Ok(Checkpoint {
            model,
            vocab: manifest.vocab,
            train: manifest.train,
            progress: manifest.progress,
            accumulators,
        })
    }
}
