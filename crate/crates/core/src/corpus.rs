//! Datasets, vocabularies, batching and synthetic tasks.
//!
//! Datasets are UTF-8 JSON Lines, one example per line:
//!
//! ```text
//! {"label": 2, "sentences": [["a", "b"], ["c"]]}
//! {"label": 0, "premise": ["a", "b"], "hypothesis": ["c"]}
//! ```
//!
//! Tokens are lowercased and split on whitespace.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::NLI_CLASSES;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Tokens must occur more than this many times to get their own id.
pub const DEFAULT_MIN_COUNT: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedDocument {
    pub label: usize,
    pub sentences: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub label: usize,
    pub premise: Vec<usize>,
    pub hypothesis: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Example {
    Document(TokenizedDocument),
    Pair(SentencePair),
}

impl Example {
    pub fn label(&self) -> usize {
        match self {
            Example::Document(d) => d.label,
            Example::Pair(p) => p.label,
        }
    }

    pub fn tokens(&self) -> Box<dyn Iterator<Item = &usize> + '_> {
        match self {
            Example::Document(d) => Box::new(d.sentences.iter().flatten()),
            Example::Pair(p) => Box::new(p.premise.iter().chain(&p.hypothesis)),
        }
    }

    pub fn token_count(&self) -> usize {
        match self {
            Example::Document(d) => d.sentences.iter().map(Vec::len).sum(),
            Example::Pair(p) => p.premise.len() + p.hypothesis.len(),
        }
    }
}

/// Token strings as read from disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawExample {
    Document {
        label: usize,
        sentences: Vec<Vec<String>>,
    },
    Pair {
        label: usize,
        premise: Vec<String>,
        hypothesis: Vec<String>,
    },
}

impl RawExample {
    pub fn label(&self) -> usize {
        match self {
            RawExample::Document { label, .. } | RawExample::Pair { label, .. } => *label,
        }
    }

    fn tokens(&self) -> Box<dyn Iterator<Item = &String> + '_> {
        match self {
            RawExample::Document { sentences, .. } => Box::new(sentences.iter().flatten()),
            RawExample::Pair {
                premise,
                hypothesis,
                ..
            } => Box::new(premise.iter().chain(hypothesis)),
        }
    }
}

fn tokenize(tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .flat_map(|t| t.split_whitespace().map(str::to_lowercase))
        .collect()
}

/// Lowercases and splits every token; drops empty sentences.
fn normalize(ex: RawExample) -> Option<RawExample> {
    match ex {
        RawExample::Document { label, sentences } => {
            let sentences: Vec<Vec<String>> = sentences
                .iter()
                .map(|s| tokenize(s))
                .filter(|s| !s.is_empty())
                .collect();
            (!sentences.is_empty()).then_some(RawExample::Document { label, sentences })
        }
        RawExample::Pair {
            label,
            premise,
            hypothesis,
        } => {
            let (premise, hypothesis) = (tokenize(&premise), tokenize(&hypothesis));
            (!premise.is_empty() && !hypothesis.is_empty()).then_some(RawExample::Pair {
                label,
                premise,
                hypothesis,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::from_tokens(Vec::new())
    }
}

impl Vocabulary {
    /// Reserved entries followed by `tokens` in id order.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(
            tokens
                .into_iter()
                .filter(|t| t != PAD_TOKEN && t != UNK_TOKEN),
        );
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens: all, index }
    }

    /// Keeps tokens seen more than `min_count` times, most frequent first,
    /// ties broken lexicographically.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(_, c)| c > min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Every entry, reserved ones included.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let tokens = Vec::<String>::deserialize(d)?;
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(D::Error::custom("vocabulary must start with <pad>, <unk>"));
        }
        Ok(Vocabulary::from_tokens(tokens[2..].to_vec()))
    }
}

/// Parsed file before id assignment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawDataset {
    pub examples: Vec<RawExample>,
    /// Examples dropped because nothing was left after tokenization.
    pub skipped: usize,
}

impl RawDataset {
    pub fn build_vocab(&self, min_count: usize) -> Vocabulary {
        Vocabulary::build(
            self.examples
                .iter()
                .flat_map(|e| e.tokens().map(String::as_str)),
            min_count,
        )
    }

    pub fn index(&self, vocab: &Vocabulary) -> Vec<Example> {
        let ids = |ts: &[String]| ts.iter().map(|t| vocab.id(t)).collect::<Vec<_>>();
        self.examples
            .iter()
            .map(|e| match e {
                RawExample::Document { label, sentences } => Example::Document(TokenizedDocument {
                    label: *label,
                    sentences: sentences.iter().map(|s| ids(s)).collect(),
                }),
                RawExample::Pair {
                    label,
                    premise,
                    hypothesis,
                } => Example::Pair(SentencePair {
                    label: *label,
                    premise: ids(premise),
                    hypothesis: ids(hypothesis),
                }),
            })
            .collect()
    }
}

pub fn parse_raw(reader: impl BufRead) -> Result<RawDataset> {
    let mut out = RawDataset::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let RawExample::Pair { label, .. } = raw {
            if label >= NLI_CLASSES {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("pair label {label} is not in 0..{NLI_CLASSES}"),
                });
            }
        }
        match normalize(raw) {
            Some(ex) => out.examples.push(ex),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

pub fn read_raw(path: &Path) -> Result<RawDataset> {
    parse_raw(BufReader::new(File::open(path)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub vocab: Vocabulary,
    pub skipped: usize,
}

/// Loads a dataset, building a vocabulary with the default threshold if
/// none is given.
pub fn load_dataset(path: &Path, vocab: Option<&Vocabulary>) -> Result<Dataset> {
    let raw = read_raw(path)?;
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => raw.build_vocab(DEFAULT_MIN_COUNT),
    };
    Ok(Dataset {
        examples: raw.index(&vocab),
        vocab,
        skipped: raw.skipped,
    })
}

/// Writes examples back as JSON Lines, spelling ids with `vocab`.
pub fn write_dataset(w: &mut impl Write, examples: &[Example], vocab: &Vocabulary) -> Result<()> {
    let spell = |ids: &[usize]| -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                vocab
                    .token(i)
                    .map(str::to_string)
                    .ok_or_else(|| Error::DimMismatch(format!("id {i} outside vocabulary")))
            })
            .collect()
    };
    for ex in examples {
        let raw = match ex {
            Example::Document(d) => RawExample::Document {
                label: d.label,
                sentences: d
                    .sentences
                    .iter()
                    .map(|s| spell(s))
                    .collect::<Result<_>>()?,
            },
            Example::Pair(p) => RawExample::Pair {
                label: p.label,
                premise: spell(&p.premise)?,
                hypothesis: spell(&p.hypothesis)?,
            },
        };
        serde_json::to_writer(&mut *w, &raw)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_raw(w: &mut impl Write, examples: &[RawExample]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut *w, ex)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Groups examples of similar length. `lengths[i]` is the token count of
/// example `i`; returns batches of indices.
pub fn make_batches(lengths: &[usize], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    batches
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    /// Does the x-marked sentence come before the y-marked one with at
    /// least `MIN_GAP` sentences between them?
    Pairing,
    /// Are there more x-marked than y-marked sentences?
    Counting,
    /// Does the x-marked sentence come before the y-marked one, at any
    /// distance?
    Order,
}

impl std::str::FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairing" => Ok(SynthTask::Pairing),
            "counting" => Ok(SynthTask::Counting),
            "order" => Ok(SynthTask::Order),
            other => Err(Error::Config(format!("unknown synthetic task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        SynthSizes {
            train: 5000,
            dev: 500,
            test: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSplits {
    pub train: Vec<RawExample>,
    pub dev: Vec<RawExample>,
    pub test: Vec<RawExample>,
}

pub const MARK_X: &str = "xmark";
pub const MARK_Y: &str = "ymark";
const FILLERS: usize = 30;
/// Smallest number of unmarked sentences between the two marked ones.
pub const MIN_GAP: usize = 2;

struct Generator {
    rng: ChaCha8Rng,
}

impl Generator {
    fn filler(&mut self) -> String {
        format!("w{:02}", self.rng.gen_range(0..FILLERS))
    }

    fn distractor(&mut self) -> Vec<String> {
        let len = self.rng.gen_range(3..=6);
        (0..len).map(|_| self.filler()).collect()
    }

    fn insert(&mut self, s: &mut Vec<String>, token: String) {
        let at = self.rng.gen_range(0..=s.len());
        s.insert(at, token);
    }

    fn marked(&mut self, marker: &str) -> Vec<String> {
        let len = self.rng.gen_range(3..=5);
        let mut s: Vec<String> = (0..len).map(|_| self.filler()).collect();
        self.insert(&mut s, marker.to_string());
        s
    }

    /// Two distinct positions `(first, second)` with `first < second`.
    fn ordered_pair(&mut self, n: usize) -> (usize, usize) {
        let first = self.rng.gen_range(0..n - 1);
        (first, self.rng.gen_range(first + 1..n))
    }

    /// Where the x and y markers go. Negatives are split evenly between
    /// "y comes first" and "x comes first but too close".
    fn pairing_positions(&mut self, n: usize, label: usize) -> (usize, usize) {
        if label == 1 {
            let x = self.rng.gen_range(0..n - MIN_GAP - 1);
            (x, self.rng.gen_range(x + MIN_GAP + 1..n))
        } else if self.rng.gen_bool(0.5) {
            let x = self.rng.gen_range(0..n - MIN_GAP);
            (x, x + self.rng.gen_range(1..=MIN_GAP))
        } else {
            let (y, x) = self.ordered_pair(n);
            (x, y)
        }
    }

    fn document(&mut self, task: SynthTask, label: usize) -> RawExample {
        let n = self.rng.gen_range(6..=10);
        let mut sentences: Vec<Vec<String>> = (0..n).map(|_| self.distractor()).collect();
        match task {
            SynthTask::Pairing => {
                let (x, y) = self.pairing_positions(n, label);
                sentences[x] = self.marked(MARK_X);
                sentences[y] = self.marked(MARK_Y);
            }
            SynthTask::Order => {
                let (i, j) = self.ordered_pair(n);
                let (x, y) = if label == 1 { (i, j) } else { (j, i) };
                sentences[x] = self.marked(MARK_X);
                sentences[y] = self.marked(MARK_Y);
            }
            SynthTask::Counting => {
                let total = self.rng.gen_range(3..=n.min(7));
                let big = total / 2 + 1;
                let (xs, ys) = if label == 1 {
                    (big, total - big)
                } else {
                    (total - big, big)
                };
                let mut slots: Vec<usize> = (0..n).collect();
                slots.shuffle(&mut self.rng);
                for (k, &slot) in slots.iter().take(total).enumerate() {
                    let marker = if k < xs { MARK_X } else { MARK_Y };
                    sentences[slot] = self.marked(marker);
                }
                debug_assert_eq!(xs + ys, total);
            }
        }
        RawExample::Document { label, sentences }
    }

    /// Exactly balanced labels in random order.
    fn split(&mut self, task: SynthTask, size: usize) -> Vec<RawExample> {
        let mut labels: Vec<usize> = (0..size).map(|i| i % 2).collect();
        labels.shuffle(&mut self.rng);
        labels.into_iter().map(|l| self.document(task, l)).collect()
    }
}

/// Binary document-classification data whose label depends on how two or
/// more sentences relate to each other.
pub fn synth_generate(task: SynthTask, sizes: SynthSizes, seed: u64) -> SynthSplits {
    let mut g = Generator {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    SynthSplits {
        train: g.split(task, sizes.train),
        dev: g.split(task, sizes.dev),
        test: g.split(task, sizes.test),
    }
}
