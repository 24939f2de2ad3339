//! Sentence and document encoders.
//!
//! Every level runs a bi-LSTM over its inputs, splits each output row into a
//! semantic and a structure part, optionally applies attention and pools the
//! result into one vector. The document model stacks two levels (tokens into
//! sentence vectors, sentence vectors into a document vector) and ends in a
//! softmax classifier. The NLI model encodes premise and hypothesis with the
//! sentence level only and compares them with soft alignment.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, uniform, AttentionVars, ChildContext};
use crate::autodiff::{Gradients, Tape, Var};
use crate::corpus::{Example, SentencePair, TokenizedDocument};
use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::mtt::{ScoreSet, TreeMarginals};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    None,
    Simple,
    #[default]
    Structured,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::None => "none",
            AttentionMode::Simple => "simple",
            AttentionMode::Structured => "structured",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionMode::None),
            "simple" => Ok(AttentionMode::Simple),
            "structured" => Ok(AttentionMode::Structured),
            other => Err(Error::Config(format!("unknown attention mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Document,
    Nli,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Sentence,
    Document,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Sentence => "sentence",
            Level::Document => "document",
        }
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence" => Ok(Level::Sentence),
            "document" => Ok(Level::Document),
            other => Err(Error::Config(format!("unknown level {other:?}"))),
        }
    }
}

/// Dimensions and attention mode of one encoder level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    /// Hidden size of each LSTM direction.
    pub hidden: usize,
    pub k_e: usize,
    pub k_s: usize,
    #[serde(default)]
    pub mode: AttentionMode,
}

impl LevelConfig {
    pub fn new(hidden: usize, k_e: usize, k_s: usize, mode: AttentionMode) -> Self {
        LevelConfig {
            hidden,
            k_e,
            k_s,
            mode,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.hidden == 0 || self.k_e == 0 || self.k_s == 0 {
            return Err(Error::Config(format!("{name} level has a zero dimension")));
        }
        if 2 * self.hidden != self.k_e + self.k_s {
            return Err(Error::Config(format!(
                "{name} level: 2 x hidden ({}) must equal k_e + k_s ({})",
                2 * self.hidden,
                self.k_e + self.k_s
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    /// Filled in from the vocabulary when training starts.
    #[serde(default)]
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub sentence: LevelConfig,
    /// Unused by the NLI model.
    pub document: LevelConfig,
    /// Filled in from the training labels for document tasks.
    #[serde(default)]
    pub num_classes: usize,
    pub input_dropout: f64,
    pub output_dropout: f64,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default = "default_max_sentence_len")]
    pub max_sentence_len: usize,
    #[serde(default = "default_max_document_len")]
    pub max_document_len: usize,
    #[serde(default)]
    pub child_context: ChildContext,
    /// Width of the NLI perceptrons.
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: usize,
}

fn default_max_sentence_len() -> usize {
    100
}

fn default_max_document_len() -> usize {
    60
}

fn default_mlp_hidden() -> usize {
    200
}

pub const NLI_CLASSES: usize = 3;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::document(0, 0)
    }
}

impl ModelConfig {
    pub fn document(vocab_size: usize, num_classes: usize) -> Self {
        let level = LevelConfig::new(50, 75, 25, AttentionMode::Structured);
        ModelConfig {
            task: Task::Document,
            vocab_size,
            embed_dim: 200,
            sentence: level,
            document: level,
            num_classes,
            input_dropout: 0.3,
            output_dropout: 0.3,
            pooling: Pooling::Max,
            max_sentence_len: default_max_sentence_len(),
            max_document_len: default_max_document_len(),
            child_context: ChildContext::Children,
            mlp_hidden: default_mlp_hidden(),
        }
    }

    pub fn nli(vocab_size: usize) -> Self {
        let level = LevelConfig::new(75, 100, 50, AttentionMode::Structured);
        ModelConfig {
            task: Task::Nli,
            vocab_size,
            embed_dim: 300,
            sentence: level,
            document: level,
            num_classes: NLI_CLASSES,
            input_dropout: 0.2,
            output_dropout: 0.2,
            pooling: Pooling::Max,
            max_sentence_len: default_max_sentence_len(),
            max_document_len: default_max_document_len(),
            child_context: ChildContext::Children,
            mlp_hidden: default_mlp_hidden(),
        }
    }

    /// Tiny document model used by gradient checks.
    pub fn toy(vocab_size: usize, num_classes: usize) -> Self {
        let level = LevelConfig::new(6, 8, 4, AttentionMode::Structured);
        ModelConfig {
            embed_dim: 8,
            sentence: level,
            document: level,
            input_dropout: 0.0,
            output_dropout: 0.0,
            mlp_hidden: 5,
            ..ModelConfig::document(vocab_size, num_classes)
        }
    }

    pub fn level(&self, level: Level) -> &LevelConfig {
        match level {
            Level::Sentence => &self.sentence,
            Level::Document => &self.document,
        }
    }

    pub fn level_mut(&mut self, level: Level) -> &mut LevelConfig {
        match level {
            Level::Sentence => &mut self.sentence,
            Level::Document => &mut self.document,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(
                "vocabulary must hold at least PAD and UNK".into(),
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        self.sentence.validate("sentence")?;
        match self.task {
            Task::Document => {
                self.document.validate("document")?;
                if self.num_classes < 2 {
                    return Err(Error::Config("need at least two classes".into()));
                }
            }
            Task::Nli => {
                if self.num_classes != NLI_CLASSES {
                    return Err(Error::Config(format!(
                        "NLI uses {NLI_CLASSES} classes, got {}",
                        self.num_classes
                    )));
                }
                if self.mlp_hidden == 0 {
                    return Err(Error::Config("mlp_hidden must be positive".into()));
                }
            }
        }
        for (name, rate) in [
            ("input_dropout", self.input_dropout),
            ("output_dropout", self.output_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!(
                    "{name} must lie in [0, 1), got {rate}"
                )));
            }
        }
        if self.max_sentence_len == 0 || self.max_document_len == 0 {
            return Err(Error::Config("length limits must be positive".into()));
        }
        Ok(())
    }
}

/// Index of a matrix in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter matrices in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    fn push(&mut self, name: String, value: Matrix) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }
}

/// One LSTM direction. Gate blocks are ordered input, forget, output, candidate.
#[derive(Clone, Copy, Debug)]
struct LstmIds {
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    w_p: ParamId,
    w_c: ParamId,
    w_a: ParamId,
    w_root: ParamId,
    w_update: ParamId,
    e_root: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LevelIds {
    fwd: LstmIds,
    bwd: LstmIds,
    attn: Option<AttnIds>,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
enum HeadIds {
    Document(Dense),
    Nli {
        f: [Dense; 2],
        g: [Dense; 2],
        h: [Dense; 2],
    },
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    embed: ParamId,
    sentence: LevelIds,
    document: Option<LevelIds>,
    head: HeadIds,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, rows: usize, cols: usize, scale: f64) -> ParamId {
        let m = uniform(rows, cols, scale, &mut self.rng);
        self.store.push(name, m)
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.store.push(name, Matrix::zeros(rows, cols))
    }

    fn lstm(&mut self, prefix: &str, input: usize, hidden: usize) -> LstmIds {
        let w_x = self.uniform(format!("{prefix}.w_x"), input, 4 * hidden, 0.1);
        let w_h = self.uniform(format!("{prefix}.w_h"), hidden, 4 * hidden, 0.1);
        let mut bias = Matrix::zeros(1, 4 * hidden);
        for k in hidden..2 * hidden {
            bias[(0, k)] = 1.0;
        }
        let b = self.store.push(format!("{prefix}.b"), bias);
        LstmIds { w_x, w_h, b }
    }

    fn level(&mut self, prefix: &str, input: usize, cfg: &LevelConfig) -> LevelIds {
        let fwd = self.lstm(&format!("{prefix}.lstm_fwd"), input, cfg.hidden);
        let bwd = self.lstm(&format!("{prefix}.lstm_bwd"), input, cfg.hidden);
        let attn = (cfg.mode != AttentionMode::None).then(|| {
            let (k_e, k_s) = (cfg.k_e, cfg.k_s);
            AttnIds {
                w_p: self.uniform(format!("{prefix}.attn.w_p"), k_s, k_s, 0.1),
                w_c: self.uniform(format!("{prefix}.attn.w_c"), k_s, k_s, 0.1),
                w_a: self.uniform(format!("{prefix}.attn.w_a"), k_s, k_s, 0.1),
                w_root: self.uniform(format!("{prefix}.attn.w_root"), 1, k_s, 0.1),
                w_update: self.uniform(format!("{prefix}.attn.w_update"), k_e, 3 * k_e, 0.1),
                e_root: self.uniform(format!("{prefix}.attn.e_root"), 1, k_e, 0.05),
            }
        });
        LevelIds { fwd, bwd, attn }
    }

    fn dense(&mut self, name: &str, input: usize, output: usize) -> Dense {
        Dense {
            w: self.uniform(format!("{name}.w"), input, output, 0.1),
            b: self.zeros(format!("{name}.b"), 1, output),
        }
    }
}

/// Per-level attention diagnostics: raw scores and tree marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDiag {
    pub scores: ScoreSet,
    pub marginals: TreeMarginals,
}

/// Output of one encoder level before pooling.
#[derive(Clone, Debug)]
pub struct LevelOutput {
    /// n x k_e updated semantic vectors.
    pub r: Var,
    pub diag: Option<AttentionDiag>,
}

#[derive(Clone, Debug)]
pub struct SentenceOutput {
    /// 1 x k_e sentence vector.
    pub v: Var,
    pub diag: Option<AttentionDiag>,
}

#[derive(Clone, Debug)]
pub struct DocumentOutput {
    /// 1 x k_e document vector.
    pub y: Var,
    pub sentences: Vec<Option<AttentionDiag>>,
    pub document: Option<AttentionDiag>,
}

/// Tape handles for one LSTM direction.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
}

enum EmbedRows {
    Full,
    Sparse(HashMap<usize, usize>, Vec<usize>),
}

/// Model parameters registered on a tape.
pub struct Bound {
    vars: Vec<Option<Var>>,
    embed_rows: EmbedRows,
}

impl Bound {
    fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("parameter bound on this tape")
    }
}

/// Accumulated gradients: dense for every weight, row-sparse for the embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    pub dense: Vec<Option<Matrix>>,
    pub embed_rows: BTreeMap<usize, Vec<f64>>,
}

impl GradBuffer {
    pub fn scale(&mut self, k: f64) {
        for m in self.dense.iter_mut().flatten() {
            *m = m.scale(k);
        }
        for row in self.embed_rows.values_mut() {
            row.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        let dense: f64 = self
            .dense
            .iter()
            .flatten()
            .map(|m| m.data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        let rows: f64 = self
            .embed_rows
            .values()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>())
            .sum();
        dense + rows
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fused LSTM gates: `z` is the 1 x 4h pre-activation, `c_prev` is 1 x h.
/// Returns `[h, c]` as a 1 x 2h row.
fn lstm_cell(tape: &mut Tape, z: Var, c_prev: Var) -> Var {
    let hd = tape.shape(c_prev).1;
    let zv = tape.value(z).data();
    let cp = tape.value(c_prev).data();
    let mut out = vec![0.0; 2 * hd];
    for k in 0..hd {
        let i = sigmoid(zv[k]);
        let f = sigmoid(zv[hd + k]);
        let o = sigmoid(zv[2 * hd + k]);
        let g = zv[3 * hd + k].tanh();
        let c = f * cp[k] + i * g;
        out[k] = o * c.tanh();
        out[hd + k] = c;
    }
    let value = Matrix::from_raw(1, 2 * hd, out);
    tape.custom(
        &[z, c_prev],
        value,
        Box::new(move |grad, inputs, y| {
            let (z, cp, y, g) = (inputs[0].data(), inputs[1].data(), y.data(), grad.data());
            let mut dz = vec![0.0; 4 * hd];
            let mut dcp = vec![0.0; hd];
            for k in 0..hd {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[hd + k]);
                let o = sigmoid(z[2 * hd + k]);
                let cand = z[3 * hd + k].tanh();
                let tc = y[hd + k].tanh();
                let dc = g[hd + k] + g[k] * o * (1.0 - tc * tc);
                dz[k] = dc * cand * i * (1.0 - i);
                dz[hd + k] = dc * cp[k] * f * (1.0 - f);
                dz[2 * hd + k] = g[k] * tc * o * (1.0 - o);
                dz[3 * hd + k] = dc * i * (1.0 - cand * cand);
                dcp[k] = dc * f;
            }
            vec![
                Matrix::from_raw(1, 4 * hd, dz),
                Matrix::from_raw(1, hd, dcp),
            ]
        }),
    )
}

fn lstm_direction(tape: &mut Tape, x: Var, p: &LstmVars, reverse: bool) -> Result<Var> {
    let (n, input) = tape.shape(x);
    let hd = tape.shape(p.w_h).0;
    if tape.shape(p.w_x) != (input, 4 * hd)
        || tape.shape(p.w_h) != (hd, 4 * hd)
        || tape.shape(p.b) != (1, 4 * hd)
    {
        return Err(shape_err(
            "bilstm_forward",
            format!(
                "input width {input}, w_x {:?}, w_h {:?}, b {:?}",
                tape.shape(p.w_x),
                tape.shape(p.w_h),
                tape.shape(p.b)
            ),
        ));
    }
    let xw = tape.matmul(x, p.w_x)?;
    let xw = tape.add_row_broadcast(xw, p.b)?;
    let mut c = tape.constant(Matrix::zeros(1, hd));
    let mut h_prev: Option<Var> = None;
    let mut states = vec![None; n];
    for step in 0..n {
        let t = if reverse { n - 1 - step } else { step };
        let mut z = tape.slice_rows(xw, t, 1)?;
        if let Some(hp) = h_prev {
            let rec = tape.matmul(hp, p.w_h)?;
            z = tape.add(z, rec)?;
        }
        let hc = lstm_cell(tape, z, c);
        let h = tape.slice_cols(hc, 0, hd)?;
        c = tape.slice_cols(hc, hd, hd)?;
        states[t] = Some(h);
        h_prev = Some(h);
    }
    let states: Vec<Var> = states.into_iter().flatten().collect();
    tape.concat_rows(&states)
}

/// Bidirectional LSTM over the rows of `x` (n x input); returns n x 2h with
/// the forward state in the first h columns.
pub fn bilstm_forward(tape: &mut Tape, x: Var, fwd: &LstmVars, bwd: &LstmVars) -> Result<Var> {
    if tape.shape(x).0 == 0 {
        return Err(Error::EmptyInput);
    }
    let f = lstm_direction(tape, x, fwd, false)?;
    let b = lstm_direction(tape, x, bwd, true)?;
    tape.concat_cols(&[f, b])
}

/// Pools the rows of `rs` into a single row.
pub fn pool(tape: &mut Tape, rs: Var, mode: Pooling) -> Var {
    match mode {
        Pooling::Max => tape.max_pool_rows(rs),
        Pooling::Mean => tape.mean_pool_rows(rs),
    }
}

fn sum_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.shape(x).0;
    let ones = tape.constant(Matrix::filled(1, n, 1.0));
    tape.matmul(ones, x)
}

fn one_hot(n: usize, k: usize) -> Matrix {
    let mut m = Matrix::zeros(1, n);
    m[(0, k)] = 1.0;
    m
}

/// Negative log-likelihood of `label` under 1 x C log-probabilities.
pub fn nll(tape: &mut Tape, log_probs: Var, label: usize) -> Result<Var> {
    let c = tape.shape(log_probs).1;
    if label >= c {
        return Err(Error::DimMismatch(format!(
            "label {label} with {c} classes"
        )));
    }
    let mask = tape.constant(one_hot(c, label));
    let picked = tape.mul(log_probs, mask)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0))
}

/// A two-level hierarchical classifier or an NLI pair model.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut init = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let embed = init.uniform("embed".into(), config.vocab_size, config.embed_dim, 0.05);
        let sentence = init.level("sentence", config.embed_dim, &config.sentence);
        let (document, head) = match config.task {
            Task::Document => {
                let doc = init.level("document", config.sentence.k_e, &config.document);
                let out = init.dense("output", config.document.k_e, config.num_classes);
                (Some(doc), HeadIds::Document(out))
            }
            Task::Nli => {
                let (k, m) = (config.sentence.k_e, config.mlp_hidden);
                let f = [init.dense("nli.f1", k, m), init.dense("nli.f2", m, m)];
                let g = [init.dense("nli.g1", 2 * k, m), init.dense("nli.g2", m, m)];
                let h = [
                    init.dense("nli.h1", 2 * m, m),
                    init.dense("nli.h2", m, NLI_CLASSES),
                ];
                (None, HeadIds::Nli { f, g, h })
            }
        };
        Ok(Model {
            config,
            params,
            layout: Layout {
                embed,
                sentence,
                document,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embedding_id(&self) -> ParamId {
        self.layout.embed
    }

    /// Turns dropout rates to zero, for deterministic gradient checks.
    pub fn without_dropout(mut self) -> Self {
        self.config.input_dropout = 0.0;
        self.config.output_dropout = 0.0;
        self
    }

    /// Registers every parameter, including the full embedding table.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .values()
            .iter()
            .map(|m| tape.param(m.clone()))
            .collect();
        self.bind_vars(vars)
    }

    /// Uses caller-registered variables, one per parameter in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound {
        assert_eq!(vars.len(), self.params.len(), "one variable per parameter");
        Bound {
            vars: vars.into_iter().map(Some).collect(),
            embed_rows: EmbedRows::Full,
        }
    }

    /// Registers the weights and only the embedding rows of `tokens`.
    pub fn bind_rows<'a>(
        &self,
        tape: &mut Tape,
        tokens: impl IntoIterator<Item = &'a usize>,
    ) -> Result<Bound> {
        let mut ids: Vec<usize> = tokens.into_iter().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        let table = self.params.get(self.layout.embed);
        if let Some(&bad) = ids.iter().find(|&&t| t >= table.rows()) {
            return Err(Error::DimMismatch(format!(
                "token id {bad} outside a vocabulary of {}",
                table.rows()
            )));
        }
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut rows = Vec::with_capacity(ids.len() * table.cols());
        for &t in &ids {
            rows.extend_from_slice(table.row(t));
        }
        let slice = Matrix::from_raw(ids.len(), table.cols(), rows);
        let mut vars: Vec<Option<Var>> = Vec::with_capacity(self.params.len());
        for id in self.params.ids() {
            vars.push(Some(if id == self.layout.embed {
                tape.param(slice.clone())
            } else {
                tape.param(self.params.get(id).clone())
            }));
        }
        let index = ids.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        Ok(Bound {
            vars,
            embed_rows: EmbedRows::Sparse(index, ids),
        })
    }

    /// Binding for evaluating a single example.
    pub fn bind_example(&self, tape: &mut Tape, ex: &Example) -> Result<Bound> {
        match ex {
            Example::Document(d) if d.sentences.is_empty() => return Err(Error::EmptyDocument),
            Example::Document(d) if d.sentences.iter().any(Vec::is_empty) => {
                return Err(Error::EmptySentence)
            }
            Example::Pair(p) if p.premise.is_empty() || p.hypothesis.is_empty() => {
                return Err(Error::EmptySentence)
            }
            _ => {}
        }
        let tokens: Vec<usize> = ex.tokens().copied().collect();
        self.bind_rows(tape, &tokens)
    }

    /// Adds the gradients of `b`'s parameters to `buf`.
    pub fn accumulate(&self, b: &Bound, grads: &Gradients, buf: &mut GradBuffer) -> Result<()> {
        for id in self.params.ids() {
            let g = grads.wrt(b.var(id));
            if id == self.layout.embed {
                match &b.embed_rows {
                    EmbedRows::Sparse(_, ids) => {
                        for (local, &t) in ids.iter().enumerate() {
                            let row = g.row(local);
                            let acc = buf
                                .embed_rows
                                .entry(t)
                                .or_insert_with(|| vec![0.0; row.len()]);
                            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                    }
                    EmbedRows::Full => {
                        for t in 0..g.rows() {
                            let row = g.row(t);
                            if row.iter().any(|v| *v != 0.0) {
                                let acc = buf
                                    .embed_rows
                                    .entry(t)
                                    .or_insert_with(|| vec![0.0; row.len()]);
                                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                            }
                        }
                    }
                }
                continue;
            }
            match &mut buf.dense[id.0] {
                Some(acc) => acc.add_assign(g)?,
                slot @ None => *slot = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub fn empty_grads(&self) -> GradBuffer {
        GradBuffer {
            dense: vec![None; self.params.len()],
            embed_rows: BTreeMap::new(),
        }
    }

    fn embed(&self, tape: &mut Tape, b: &Bound, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::EmptySentence);
        }
        let table = b.var(self.layout.embed);
        let x = match &b.embed_rows {
            EmbedRows::Full => {
                let rows = tape.shape(table).0;
                if let Some(&bad) = tokens.iter().find(|&&t| t >= rows) {
                    return Err(Error::DimMismatch(format!(
                        "token id {bad} outside a vocabulary of {rows}"
                    )));
                }
                tape.gather_rows(table, tokens)?
            }
            EmbedRows::Sparse(index, _) => {
                let local = tokens
                    .iter()
                    .map(|t| {
                        index.get(t).copied().ok_or_else(|| {
                            Error::DimMismatch(format!("token {t} not bound on this tape"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                tape.gather_rows(table, &local)?
            }
        };
        Ok(tape.dropout(x, self.config.input_dropout))
    }

    fn lstm_vars(b: &Bound, ids: &LstmIds) -> LstmVars {
        LstmVars {
            w_x: b.var(ids.w_x),
            w_h: b.var(ids.w_h),
            b: b.var(ids.b),
        }
    }

    fn attn_vars(b: &Bound, ids: &AttnIds) -> AttentionVars {
        AttentionVars {
            w_p: b.var(ids.w_p),
            w_c: b.var(ids.w_c),
            w_a: b.var(ids.w_a),
            w_root: b.var(ids.w_root),
            w_update: b.var(ids.w_update),
            e_root: b.var(ids.e_root),
        }
    }

    fn level_ids(&self, level: Level) -> Result<&LevelIds> {
        match level {
            Level::Sentence => Ok(&self.layout.sentence),
            Level::Document => self
                .layout
                .document
                .as_ref()
                .ok_or_else(|| Error::Config("the NLI model has no document level".into())),
        }
    }

    /// bi-LSTM, split, attention; `x` is n x input.
    pub fn level_forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        level: Level,
        x: Var,
    ) -> Result<LevelOutput> {
        let ids = *self.level_ids(level)?;
        let cfg = *self.config.level(level);
        let h = bilstm_forward(
            tape,
            x,
            &Self::lstm_vars(b, &ids.fwd),
            &Self::lstm_vars(b, &ids.bwd),
        )?;
        let (e, d) = attention::split_hidden(tape, h, cfg.k_e, cfg.k_s)?;
        let Some(attn) = ids.attn.as_ref() else {
            return Ok(LevelOutput { r: e, diag: None });
        };
        let w = Self::attn_vars(b, attn);
        match cfg.mode {
            AttentionMode::None => unreachable!("no attention weights without attention"),
            AttentionMode::Simple => {
                let (r, _) = attention::simple_attention(tape, e, d, &w)?;
                Ok(LevelOutput { r, diag: None })
            }
            AttentionMode::Structured => {
                let out =
                    attention::structured_attention(tape, e, d, &w, self.config.child_context)?;
                let scores = ScoreSet::new(
                    tape.value(out.f).clone(),
                    tape.value(out.f_root).data().to_vec(),
                )?;
                let marginals = TreeMarginals {
                    a: tape.value(out.a).clone(),
                    a_root: tape.value(out.a_root).data().to_vec(),
                };
                Ok(LevelOutput {
                    r: out.r,
                    diag: Some(AttentionDiag { scores, marginals }),
                })
            }
        }
    }

    fn truncate_sentence<'a>(&self, tokens: &'a [usize]) -> &'a [usize] {
        &tokens[..tokens.len().min(self.config.max_sentence_len)]
    }

    /// Encodes one sentence into a 1 x k_e vector.
    pub fn sentence_encode(
        &self,
        tape: &mut Tape,
        b: &Bound,
        tokens: &[usize],
    ) -> Result<SentenceOutput> {
        let x = self.embed(tape, b, self.truncate_sentence(tokens))?;
        let out = self.level_forward(tape, b, Level::Sentence, x)?;
        Ok(SentenceOutput {
            v: pool(tape, out.r, self.config.pooling),
            diag: out.diag,
        })
    }

    /// Encodes a document (a list of sentences) into a 1 x k_e vector.
    pub fn document_encode(
        &self,
        tape: &mut Tape,
        b: &Bound,
        sentences: &[Vec<usize>],
    ) -> Result<DocumentOutput> {
        if sentences.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let sentences = &sentences[..sentences.len().min(self.config.max_document_len)];
        let mut vs = Vec::with_capacity(sentences.len());
        let mut diags = Vec::with_capacity(sentences.len());
        for s in sentences {
            let out = self.sentence_encode(tape, b, s)?;
            vs.push(out.v);
            diags.push(out.diag);
        }
        let v = tape.concat_rows(&vs)?;
        let out = self.level_forward(tape, b, Level::Document, v)?;
        Ok(DocumentOutput {
            y: pool(tape, out.r, self.config.pooling),
            sentences: diags,
            document: out.diag,
        })
    }

    fn dense(&self, tape: &mut Tape, b: &Bound, layer: &Dense, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b.var(layer.w))?;
        tape.add_row_broadcast(y, b.var(layer.b))
    }

    /// Two linear layers, each followed by a ReLU unless `last_linear`.
    fn perceptron(
        &self,
        tape: &mut Tape,
        b: &Bound,
        layers: &[Dense; 2],
        x: Var,
        last_linear: bool,
    ) -> Result<Var> {
        let h = self.dense(tape, b, &layers[0], x)?;
        let h = tape.relu(h);
        let o = self.dense(tape, b, &layers[1], h)?;
        Ok(if last_linear { o } else { tape.relu(o) })
    }

    /// 1 x C class logits of a document vector.
    pub fn document_logits(&self, tape: &mut Tape, b: &Bound, y: Var) -> Result<Var> {
        let HeadIds::Document(out) = &self.layout.head else {
            return Err(Error::Config("not a document model".into()));
        };
        let y = tape.dropout(y, self.config.output_dropout);
        self.dense(tape, b, out, y)
    }

    /// Log-probabilities over the three NLI classes.
    pub fn nli_forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        premise: &[usize],
        hypothesis: &[usize],
    ) -> Result<Var> {
        let HeadIds::Nli { f, g, h } = self.layout.head else {
            return Err(Error::Config("not an NLI model".into()));
        };
        let xp = self.embed(tape, b, self.truncate_sentence(premise))?;
        let rp = self.level_forward(tape, b, Level::Sentence, xp)?.r;
        let xh = self.embed(tape, b, self.truncate_sentence(hypothesis))?;
        let rh = self.level_forward(tape, b, Level::Sentence, xh)?.r;

        let fp = self.perceptron(tape, b, &f, rp, false)?;
        let fh = self.perceptron(tape, b, &f, rh, false)?;
        let fh_t = tape.transpose(fh);
        let o = tape.matmul(fp, fh_t)?;
        let to_premise = tape.softmax_row(o);
        let beta = tape.matmul(to_premise, rh)?;
        let o_t = tape.transpose(o);
        let to_hypothesis = tape.softmax_row(o_t);
        let alpha = tape.matmul(to_hypothesis, rp)?;

        let cp = tape.concat_cols(&[rp, beta])?;
        let gp = self.perceptron(tape, b, &g, cp, false)?;
        let vp = sum_rows(tape, gp)?;
        let ch = tape.concat_cols(&[rh, alpha])?;
        let gh = self.perceptron(tape, b, &g, ch, false)?;
        let vh = sum_rows(tape, gh)?;

        let joined = tape.concat_cols(&[vp, vh])?;
        let joined = tape.dropout(joined, self.config.output_dropout);
        let logits = self.perceptron(tape, b, &h, joined, true)?;
        Ok(tape.log_softmax_row(logits))
    }

    /// 1 x C log-probabilities for any example.
    pub fn log_probs(&self, tape: &mut Tape, b: &Bound, ex: &Example) -> Result<Var> {
        match (ex, self.config.task) {
            (Example::Document(doc), Task::Document) => {
                let y = self.document_encode(tape, b, &doc.sentences)?.y;
                let logits = self.document_logits(tape, b, y)?;
                Ok(tape.log_softmax_row(logits))
            }
            (Example::Pair(pair), Task::Nli) => {
                self.nli_forward(tape, b, &pair.premise, &pair.hypothesis)
            }
            _ => Err(Error::Config(
                "example kind does not match the model task".into(),
            )),
        }
    }

    /// Cross-entropy loss of one example.
    pub fn loss(&self, tape: &mut Tape, b: &Bound, ex: &Example) -> Result<Var> {
        let lp = self.log_probs(tape, b, ex)?;
        nll(tape, lp, ex.label())
    }

    /// Class probabilities with dropout disabled.
    pub fn predict(&self, ex: &Example) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.bind_example(&mut tape, ex)?;
        let lp = self.log_probs(&mut tape, &b, ex)?;
        Ok(tape.value(lp).data().iter().map(|v| v.exp()).collect())
    }

    /// Attention diagnostics of a document under evaluation mode.
    pub fn document_diagnostics(&self, doc: &TokenizedDocument) -> Result<DocumentOutput> {
        let mut tape = Tape::new();
        let ex = Example::Document(doc.clone());
        let b = self.bind_example(&mut tape, &ex)?;
        self.document_encode(&mut tape, &b, &doc.sentences)
    }

    /// Sentence-level diagnostics of both sides of a pair.
    pub fn pair_diagnostics(&self, pair: &SentencePair) -> Result<[Option<AttentionDiag>; 2]> {
        let mut tape = Tape::new();
        let ex = Example::Pair(pair.clone());
        let b = self.bind_example(&mut tape, &ex)?;
        let mut out = [None, None];
        for (slot, tokens) in out.iter_mut().zip([&pair.premise, &pair.hypothesis]) {
            let x = self.embed(&mut tape, &b, self.truncate_sentence(tokens))?;
            *slot = self.level_forward(&mut tape, &b, Level::Sentence, x)?.diag;
        }
        Ok(out)
    }
}

/// Softmax over `y W + b`; `y` is 1 x k, `w` is k x C and `b` is 1 x C.
pub fn classify(y: &Matrix, w: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    if y.rows() != 1 || w.rows() != y.cols() || b.shape() != (1, w.cols()) {
        return Err(shape_err(
            "classify",
            format!("y {:?}, w {:?}, b {:?}", y.shape(), w.shape(), b.shape()),
        ));
    }
    let logits = y.matmul(w)?.add(b)?;
    let max = logits
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.data().iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|v| v / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, grad_check_with, GradCheckOptions, Stencil};
    use crate::mtt::compute_marginals;
    use rand::Rng;

    fn seeded(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix {
        uniform(rows, cols, scale, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn naive_sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Step-by-step recurrence over plain vectors.
    fn naive_lstm(
        x: &Matrix,
        w_x: &Matrix,
        w_h: &Matrix,
        b: &Matrix,
        reverse: bool,
    ) -> Vec<Vec<f64>> {
        let n = x.rows();
        let hd = w_h.rows();
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut out = vec![vec![]; n];
        let order: Vec<usize> = if reverse {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        };
        for t in order {
            let mut z = b.row(0).to_vec();
            for (q, zq) in z.iter_mut().enumerate() {
                for k in 0..x.cols() {
                    *zq += x[(t, k)] * w_x[(k, q)];
                }
                for k in 0..hd {
                    *zq += h[k] * w_h[(k, q)];
                }
            }
            for k in 0..hd {
                let i = naive_sigmoid(z[k]);
                let f = naive_sigmoid(z[hd + k]);
                let o = naive_sigmoid(z[2 * hd + k]);
                let g = z[3 * hd + k].tanh();
                c[k] = f * c[k] + i * g;
                h[k] = o * c[k].tanh();
            }
            out[t] = h.clone();
        }
        out
    }

    fn lstm_params(input: usize, hd: usize, seed: u64) -> [Matrix; 3] {
        [
            seeded(input, 4 * hd, seed, 0.5),
            seeded(hd, 4 * hd, seed + 1, 0.5),
            seeded(1, 4 * hd, seed + 2, 0.5),
        ]
    }

    fn run_bilstm(x: &Matrix, fwd: &[Matrix; 3], bwd: &[Matrix; 3]) -> Matrix {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut bind = |p: &[Matrix; 3]| LstmVars {
            w_x: tape.param(p[0].clone()),
            w_h: tape.param(p[1].clone()),
            b: tape.param(p[2].clone()),
        };
        let (f, b) = (bind(fwd), bind(bwd));
        let h = bilstm_forward(&mut tape, xv, &f, &b).unwrap();
        tape.value(h).clone()
    }

    #[test]
    fn zero_lstm_gives_zero_output() {
        let x = Matrix::zeros(4, 3);
        let zero = [
            Matrix::zeros(3, 8),
            Matrix::zeros(2, 8),
            Matrix::zeros(1, 8),
        ];
        let h = run_bilstm(&x, &zero, &zero);
        assert_eq!(h.shape(), (4, 4));
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_concatenates_both_directions() {
        let x = seeded(1, 3, 1, 1.0);
        let (fwd, bwd) = (lstm_params(3, 2, 10), lstm_params(3, 2, 20));
        let h = run_bilstm(&x, &fwd, &bwd);
        assert_eq!(h.shape(), (1, 4));
        let f = naive_lstm(&x, &fwd[0], &fwd[1], &fwd[2], false);
        let b = naive_lstm(&x, &bwd[0], &bwd[1], &bwd[2], true);
        let expect = [f[0].clone(), b[0].clone()].concat();
        for (got, want) in h.row(0).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_naive_recurrence() {
        let x = seeded(3, 4, 2, 1.0);
        let (fwd, bwd) = (lstm_params(4, 3, 30), lstm_params(4, 3, 40));
        let h = run_bilstm(&x, &fwd, &bwd);
        let f = naive_lstm(&x, &fwd[0], &fwd[1], &fwd[2], false);
        let b = naive_lstm(&x, &bwd[0], &bwd[1], &bwd[2], true);
        for t in 0..3 {
            let expect = [f[t].clone(), b[t].clone()].concat();
            for (got, want) in h.row(t).iter().zip(&expect) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilstm_rejects_bad_shapes() {
        let x = seeded(3, 5, 2, 1.0);
        let p = lstm_params(4, 3, 30);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let v = LstmVars {
            w_x: tape.param(p[0].clone()),
            w_h: tape.param(p[1].clone()),
            b: tape.param(p[2].clone()),
        };
        assert!(matches!(
            bilstm_forward(&mut tape, xv, &v, &v),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn bilstm_gradients_match_finite_differences() {
        let x = seeded(4, 3, 3, 1.0);
        let mut params = vec![x];
        params.extend(lstm_params(3, 2, 50));
        params.extend(lstm_params(3, 2, 60));
        let report = grad_check(
            |tape, v| {
                let f = LstmVars {
                    w_x: v[1],
                    w_h: v[2],
                    b: v[3],
                };
                let b = LstmVars {
                    w_x: v[4],
                    w_h: v[5],
                    b: v[6],
                };
                let h = bilstm_forward(tape, v[0], &f, &b)?;
                let h = tape.tanh(h);
                let w = tape.constant(seeded(4, 1, 9, 1.0));
                let s = tape.matmul(h, w)?;
                Ok(tape.sum(s))
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn pooling() {
        let mut tape = Tape::new();
        let m = tape.constant(Matrix::from_rows(&[vec![1.0, -2.0], vec![0.0, 5.0]]).unwrap());
        let max = pool(&mut tape, m, Pooling::Max);
        assert_eq!(tape.value(max).data(), &[1.0, 5.0]);

        let one = tape.constant(Matrix::from_rows(&[vec![3.0, -1.0]]).unwrap());
        for mode in [Pooling::Max, Pooling::Mean] {
            let p = pool(&mut tape, one, mode);
            assert_eq!(tape.value(p).data(), &[3.0, -1.0]);
        }

        let x = seeded(7, 5, 4, 3.0);
        let xv = tape.constant(x.clone());
        let mean = pool(&mut tape, xv, Pooling::Mean);
        for c in 0..5 {
            let mut total = 0.0;
            for r in 0..7 {
                total += x[(r, c)];
            }
            assert!((tape.value(mean)[(0, c)] - total / 7.0).abs() < 1e-15);
        }
    }

    const EXTRAPOLATED: GradCheckOptions = GradCheckOptions {
        h: 1e-3,
        tol: 1e-4,
        stencil: Stencil::Ridders,
    };

    /// Moves every parameter away from its small initial scale so that
    /// gradients are well above finite-difference noise.
    fn jittered(mut model: Model, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in model.params_mut().values_mut() {
            for v in m.data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        model
    }

    fn toy(mode: AttentionMode) -> Model {
        let mut cfg = ModelConfig::toy(12, 3);
        cfg.sentence.mode = mode;
        cfg.document.mode = mode;
        Model::new(cfg, 5).unwrap()
    }

    fn param<'a>(m: &'a Model, name: &str) -> &'a Matrix {
        m.params().get(m.params().id_of(name).unwrap())
    }

    fn split_row(h: &[f64], k_e: usize) -> (Vec<f64>, Vec<f64>) {
        (h[..k_e].to_vec(), h[k_e..].to_vec())
    }

    fn matvec(w: &Matrix, x: &[f64]) -> Vec<f64> {
        (0..w.rows())
            .map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    #[test]
    fn single_token_sentence_uses_root_context_only() {
        let model = toy(AttentionMode::Structured);
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let out = model.sentence_encode(&mut tape, &b, &[4]).unwrap();
        let diag = out.diag.unwrap();
        assert_eq!(diag.marginals.a_root, vec![1.0]);

        let emb = Matrix::from_rows(&[param(&model, "embed").row(4).to_vec()]).unwrap();
        let p = |n: &str| param(&model, &format!("sentence.{n}")).clone();
        let h = run_bilstm(
            &emb,
            &[p("lstm_fwd.w_x"), p("lstm_fwd.w_h"), p("lstm_fwd.b")],
            &[p("lstm_bwd.w_x"), p("lstm_bwd.w_h"), p("lstm_bwd.b")],
        );
        let (e, _) = split_row(h.row(0), 8);
        let joined = [e, p("attn.e_root").row(0).to_vec(), vec![0.0; 8]].concat();
        let expect: Vec<f64> = matvec(&p("attn.w_update"), &joined)
            .iter()
            .map(|v| v.tanh())
            .collect();
        for (got, want) in tape.value(out.v).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn no_attention_pools_semantic_vectors() {
        let model = toy(AttentionMode::None);
        assert!(model.params().iter().all(|(n, _)| !n.contains("attn")));
        let tokens = [2, 5, 7, 3];
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let out = model.sentence_encode(&mut tape, &b, &tokens).unwrap();
        assert!(out.diag.is_none());

        let emb = param(&model, "embed");
        let x = Matrix::from_rows(
            &tokens
                .iter()
                .map(|&t| emb.row(t).to_vec())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let p = |n: &str| param(&model, &format!("sentence.{n}")).clone();
        let h = run_bilstm(
            &x,
            &[p("lstm_fwd.w_x"), p("lstm_fwd.w_h"), p("lstm_fwd.b")],
            &[p("lstm_bwd.w_x"), p("lstm_bwd.w_h"), p("lstm_bwd.b")],
        );
        for c in 0..8 {
            let want = (0..4).map(|r| h[(r, c)]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(tape.value(out.v)[(0, c)], want);
        }

        let doc = TokenizedDocument {
            label: 0,
            sentences: vec![vec![2, 3], vec![4]],
        };
        let out = model.document_diagnostics(&doc).unwrap();
        assert!(out.document.is_none());
        assert!(out.sentences.iter().all(Option::is_none));
    }

    #[test]
    fn five_token_sentence_matches_composition() {
        let model = toy(AttentionMode::Structured);
        let tokens = [2, 9, 4, 4, 11];
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let out = model.sentence_encode(&mut tape, &b, &tokens).unwrap();

        let emb = param(&model, "embed");
        let x = Matrix::from_rows(
            &tokens
                .iter()
                .map(|&t| emb.row(t).to_vec())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let p = |n: &str| param(&model, &format!("sentence.{n}")).clone();
        let h = run_bilstm(
            &x,
            &[p("lstm_fwd.w_x"), p("lstm_fwd.w_h"), p("lstm_fwd.b")],
            &[p("lstm_bwd.w_x"), p("lstm_bwd.w_h"), p("lstm_bwd.b")],
        );
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..5).map(|r| split_row(h.row(r), 8)).collect();
        let d = Matrix::from_rows(&rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>()).unwrap();
        let attn = attention::AttentionParams {
            w_p: p("attn.w_p"),
            w_c: p("attn.w_c"),
            w_a: p("attn.w_a"),
            w_root: p("attn.w_root"),
            w_update: p("attn.w_update"),
            e_root: p("attn.e_root"),
        };
        let marg = compute_marginals(&attention::score_set(&d, &attn).unwrap()).unwrap();
        let mut pooled = vec![f64::NEG_INFINITY; 8];
        for i in 0..5 {
            let mut parent = attn
                .e_root
                .row(0)
                .iter()
                .map(|v| v * marg.a_root[i])
                .collect::<Vec<_>>();
            let mut child = vec![0.0; 8];
            for k in 0..5 {
                for c in 0..8 {
                    parent[c] += marg.a[(k, i)] * rows[k].0[c];
                    child[c] += marg.a[(i, k)] * rows[k].0[c];
                }
            }
            let joined = [rows[i].0.clone(), parent, child].concat();
            for (c, v) in matvec(&attn.w_update, &joined).iter().enumerate() {
                pooled[c] = pooled[c].max(v.tanh());
            }
        }
        for (got, want) in tape.value(out.v).data().iter().zip(&pooled) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!(out.diag.unwrap().marginals.max_abs_diff(&marg).unwrap() < 1e-12);
    }

    #[test]
    fn long_inputs_are_truncated() {
        let mut cfg = ModelConfig::toy(12, 2);
        cfg.max_sentence_len = 3;
        cfg.max_document_len = 2;
        let model = Model::new(cfg, 1).unwrap();
        let long = TokenizedDocument {
            label: 0,
            sentences: vec![vec![2, 3, 4, 5, 6], vec![7, 8], vec![9]],
        };
        let out = model.document_diagnostics(&long).unwrap();
        assert_eq!(out.sentences.len(), 2);
        assert_eq!(out.sentences[0].as_ref().unwrap().scores.n(), 3);
        assert_eq!(out.document.unwrap().scores.n(), 2);
    }

    #[test]
    fn one_sentence_document_has_trivial_tree() {
        let model = toy(AttentionMode::Structured);
        let doc = TokenizedDocument {
            label: 1,
            sentences: vec![vec![3, 4, 5]],
        };
        let out = model.document_diagnostics(&doc).unwrap();
        assert_eq!(out.document.unwrap().marginals.a_root, vec![1.0]);
        assert!(matches!(
            model.document_diagnostics(&TokenizedDocument {
                label: 0,
                sentences: vec![]
            }),
            Err(Error::EmptyDocument)
        ));
        assert!(matches!(
            model.document_diagnostics(&TokenizedDocument {
                label: 0,
                sentences: vec![vec![2], vec![]]
            }),
            Err(Error::EmptySentence)
        ));
    }

    #[test]
    fn identical_sentences_give_identical_document_inputs() {
        let model = toy(AttentionMode::Simple);
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let s = vec![3, 6, 2];
        let v1 = model.sentence_encode(&mut tape, &b, &s).unwrap().v;
        let v2 = model.sentence_encode(&mut tape, &b, &s).unwrap().v;
        assert_eq!(tape.value(v1), tape.value(v2));

        let rows = tape.concat_rows(&[v1, v2, v1]).unwrap();
        let d = tape.slice_cols(rows, 0, 4).unwrap();
        let w = Model::attn_vars(&b, model.layout.document.unwrap().attn.as_ref().unwrap());
        let (_, weights) = attention::simple_attention(&mut tape, rows, d, &w).unwrap();
        for &v in tape.value(weights).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn classify_is_a_distribution() {
        let y = seeded(1, 6, 1, 2.0);
        let uniform_probs = classify(&y, &Matrix::zeros(6, 4), &Matrix::zeros(1, 4)).unwrap();
        assert!(uniform_probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let w = uniform(6, 5, rng.gen_range(0.1..20.0), &mut rng);
            let b = uniform(1, 5, 1.0, &mut rng);
            let probs = classify(&y, &w, &b).unwrap();
            assert!(probs.iter().all(|&p| p >= 0.0));
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let logits = y.matmul(&w).unwrap().add(&b).unwrap();
            let argmax =
                |v: &[f64]| (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best });
            assert_eq!(argmax(&probs), argmax(logits.data()));
        }
        assert!(classify(&y, &Matrix::zeros(5, 2), &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn predictions_are_distributions() {
        let model = toy(AttentionMode::Structured);
        let doc = Example::Document(TokenizedDocument {
            label: 2,
            sentences: vec![vec![3, 4], vec![5, 6, 7], vec![8]],
        });
        let p = model.predict(&doc).unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn toy_docs() -> Vec<TokenizedDocument> {
        vec![
            TokenizedDocument {
                label: 2,
                sentences: vec![vec![2, 5, 7, 3, 9], vec![4, 4], vec![11, 10, 6], vec![8]],
            },
            TokenizedDocument {
                label: 0,
                sentences: vec![vec![3, 1, 6]],
            },
        ]
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for mode in [
            AttentionMode::Structured,
            AttentionMode::Simple,
            AttentionMode::None,
        ] {
            let model = jittered(toy(mode), 77);
            for doc in toy_docs() {
                let ex = Example::Document(doc);
                let report = grad_check_with(
                    |tape, vars| {
                        let b = model.bind_vars(vars.to_vec());
                        model.loss(tape, &b, &ex)
                    },
                    model.params().values(),
                    &EXTRAPOLATED,
                )
                .unwrap();
                assert!(
                    report.passed,
                    "{mode}: {:?}",
                    report.failures().collect::<Vec<_>>()
                );
            }
        }
    }

    #[test]
    fn sparse_and_full_bindings_agree() {
        let model = toy(AttentionMode::Structured);
        let ex = Example::Document(toy_docs().remove(0));

        let mut tape = Tape::new();
        let full = model.bind(&mut tape);
        let loss = model.loss(&mut tape, &full, &ex).unwrap();
        let mut dense = model.empty_grads();
        model
            .accumulate(&full, &tape.backward(loss).unwrap(), &mut dense)
            .unwrap();

        let mut tape2 = Tape::new();
        let sparse = model.bind_example(&mut tape2, &ex).unwrap();
        let loss2 = model.loss(&mut tape2, &sparse, &ex).unwrap();
        assert_eq!(tape.value(loss), tape2.value(loss2));
        let mut rows = model.empty_grads();
        model
            .accumulate(&sparse, &tape2.backward(loss2).unwrap(), &mut rows)
            .unwrap();
        assert_eq!(dense, rows);
        assert!(rows.embed_rows.keys().all(|t| ex.tokens().any(|u| u == t)));
    }

    #[test]
    fn vocabulary_permutation_leaves_outputs_unchanged() {
        let model = toy(AttentionMode::Structured);
        let v = model.config().vocab_size;
        let mut perm: Vec<usize> = (0..v).collect();
        perm.rotate_left(5);
        let mut permuted = model.clone();
        let embed = model.params().get(model.embedding_id());
        let mut moved = Matrix::zeros(embed.rows(), embed.cols());
        for (old, &new) in perm.iter().enumerate() {
            moved.row_mut(new).copy_from_slice(embed.row(old));
        }
        *permuted.params_mut().get_mut(model.embedding_id()) = moved;
        for doc in toy_docs() {
            let renamed = TokenizedDocument {
                label: doc.label,
                sentences: doc
                    .sentences
                    .iter()
                    .map(|s| s.iter().map(|&t| perm[t]).collect())
                    .collect(),
            };
            let a = model.predict(&Example::Document(doc)).unwrap();
            let b = permuted.predict(&Example::Document(renamed)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn out_of_range_tokens_are_rejected() {
        let model = toy(AttentionMode::None);
        let ex = Example::Document(TokenizedDocument {
            label: 0,
            sentences: vec![vec![2, 99]],
        });
        assert!(matches!(model.predict(&ex), Err(Error::DimMismatch(_))));
        let wrong_label = Example::Document(TokenizedDocument {
            label: 7,
            sentences: vec![vec![2]],
        });
        let mut tape = Tape::new();
        let b = model.bind_example(&mut tape, &wrong_label).unwrap();
        assert!(model.loss(&mut tape, &b, &wrong_label).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::toy(10, 2);
        assert!(cfg.validate().is_ok());
        cfg.document.k_s = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::toy(10, 2);
        cfg.input_dropout = 1.0;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::document(100, 5).validate().is_ok());
        assert!(ModelConfig::nli(100).validate().is_ok());
        let json = serde_json::to_string(&ModelConfig::nli(100)).unwrap();
        assert_eq!(
            serde_json::from_str::<ModelConfig>(&json).unwrap(),
            ModelConfig::nli(100)
        );
    }

    fn toy_nli() -> Model {
        let mut cfg = ModelConfig::nli(12);
        cfg.embed_dim = 5;
        cfg.sentence = LevelConfig::new(5, 6, 4, AttentionMode::Structured);
        cfg.mlp_hidden = 4;
        cfg.input_dropout = 0.0;
        cfg.output_dropout = 0.0;
        Model::new(cfg, 8).unwrap()
    }

    #[test]
    fn nli_alignment_is_symmetric_for_identical_sides() {
        let model = toy_nli();
        let HeadIds::Nli { f, .. } = model.layout.head else {
            unreachable!()
        };
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let s = [3, 7, 2, 9];
        let xp = model.embed(&mut tape, &b, &s).unwrap();
        let rp = model
            .level_forward(&mut tape, &b, Level::Sentence, xp)
            .unwrap()
            .r;
        let xh = model.embed(&mut tape, &b, &s).unwrap();
        let rh = model
            .level_forward(&mut tape, &b, Level::Sentence, xh)
            .unwrap()
            .r;
        let fp = model.perceptron(&mut tape, &b, &f, rp, false).unwrap();
        let fh = model.perceptron(&mut tape, &b, &f, rh, false).unwrap();
        let fh_t = tape.transpose(fh);
        let o = tape.matmul(fp, fh_t).unwrap();
        let o = tape.value(o);
        assert_eq!(o, &o.transpose());

        let pair = Example::Pair(SentencePair {
            label: 1,
            premise: s.to_vec(),
            hypothesis: vec![4, 5],
        });
        let probs = model.predict(&pair).unwrap();
        assert_eq!(probs.len(), NLI_CLASSES);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nli_gradients_match_finite_differences() {
        let model = jittered(toy_nli(), 78);
        let ex = Example::Pair(SentencePair {
            label: 2,
            premise: vec![2, 3, 4, 5],
            hypothesis: vec![6, 7, 8, 9],
        });
        let report = grad_check_with(
            |tape, vars| {
                let b = model.bind_vars(vars.to_vec());
                model.loss(tape, &b, &ex)
            },
            model.params().values(),
            &EXTRAPOLATED,
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.failures().collect::<Vec<_>>());
    }

    #[test]
    fn task_mismatch_is_an_error() {
        let model = toy_nli();
        let doc = Example::Document(toy_docs().remove(1));
        assert!(matches!(model.predict(&doc), Err(Error::Config(_))));
    }
}
