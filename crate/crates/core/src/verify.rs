//! Self-checks: gradient checks, oracle sweeps and forward-pass timings.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_with, GradCheckOptions, GradCheckReport, Stencil, Tape, Var};
use crate::corpus::{Example, SentencePair, TokenizedDocument};
use crate::encoders::{AttentionMode, Model, ModelConfig, Pooling};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mtt::{brute_force_marginals, compute_marginals, ScoreSet};
use crate::trees::{brute_force_best_tree, chu_liu_edmonds};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Oracle,
    Speed,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Gradcheck, Suite::Oracle, Suite::Speed];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Oracle => "oracle",
            Suite::Speed => "speed",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown verify suite {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "[{status}] {}: {}", c.name, c.detail)?;
        }
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{} {status}", self.suite.name())
    }
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Gradcheck => gradcheck_suite()?,
        Suite::Oracle => oracle_suite()?,
        Suite::Speed => {
            let report = speed(30, 50, 7)?;
            vec![Check {
                name: "structured/none forward time at n=30".into(),
                passed: report.structured_ratio() <= SPEED_RATIO_LIMIT,
                detail: report.to_string(),
            }]
        }
    };
    Ok(SuiteReport { suite, checks })
}

// ---------------------------------------------------------------------------
// Gradient checks

/// Ridders-extrapolated central differences with a step large enough to
/// stay clear of rounding noise.
pub const MODEL_GRAD_CHECK: GradCheckOptions = GradCheckOptions {
    h: 1e-3,
    tol: 1e-4,
    stencil: Stencil::Ridders,
};

/// A toy document model (embed 8, hidden 6, k_e 8, k_s 4) whose parameters
/// are moved off their small initial scale so gradients dominate
/// finite-difference noise.
pub fn toy_document_model(mode: AttentionMode, seed: u64) -> Result<Model> {
    toy_document_model_with(mode, Pooling::Max, seed)
}

pub fn toy_document_model_with(mode: AttentionMode, pooling: Pooling, seed: u64) -> Result<Model> {
    let mut cfg = ModelConfig::toy(12, 3);
    cfg.sentence.mode = mode;
    cfg.document.mode = mode;
    cfg.pooling = pooling;
    let model = Model::new(cfg, seed)?;
    Ok(jittered(model, seed))
}

pub fn toy_pair_model(mode: AttentionMode, seed: u64) -> Result<Model> {
    let mut cfg = ModelConfig::toy(12, crate::encoders::NLI_CLASSES);
    cfg.task = crate::encoders::Task::Nli;
    cfg.sentence.mode = mode;
    cfg.document.mode = mode;
    let model = Model::new(cfg, seed)?;
    Ok(jittered(model, seed))
}

fn jittered(mut model: Model, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a17);
    for m in model.params_mut().values_mut() {
        for v in m.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    model
}

/// Up to 4 sentences of up to 5 tokens each.
pub fn toy_documents() -> Vec<TokenizedDocument> {
    vec![
        TokenizedDocument {
            label: 2,
            sentences: vec![vec![2, 5, 7, 3, 9], vec![4, 4], vec![11, 10, 6], vec![8]],
        },
        TokenizedDocument {
            label: 0,
            sentences: vec![vec![3, 1, 6]],
        },
        TokenizedDocument {
            label: 1,
            sentences: vec![vec![7], vec![9, 2, 2, 5]],
        },
    ]
}

pub fn toy_pairs() -> Vec<SentencePair> {
    vec![SentencePair {
        label: 1,
        premise: vec![2, 5, 7, 3],
        hypothesis: vec![9, 4, 11],
    }]
}

/// Checks every parameter of `model` on the loss of `ex`.
pub fn model_grad_check(
    model: &Model,
    ex: &Example,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    grad_check_with(
        |tape, vars| {
            let b = model.bind_vars(vars.to_vec());
            model.loss(tape, &b, ex)
        },
        model.params().values(),
        opts,
    )
}

/// `tanh` whose backward rule drops the square on the output.
fn corrupted_tanh(tape: &mut Tape, x: Var) -> Var {
    let value = tape.value(x).map(f64::tanh);
    tape.custom(
        &[x],
        value,
        Box::new(|g, _, y| vec![g.hadamard(&y.map(|y| 1.0 - y)).expect("same shape")]),
    )
}

/// Gradient check of a small network that uses a corrupted backward rule.
/// A working checker must report failure.
pub fn corrupted_rule_check() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = uniform_matrix(3, 4, 1.0, &mut rng);
    let x = uniform_matrix(2, 3, 1.0, &mut rng);
    grad_check_with(
        |tape, vars| {
            let x = tape.constant(x.clone());
            let h = tape.matmul(x, vars[0])?;
            let h = corrupted_tanh(tape, h);
            Ok(tape.sum(h))
        },
        &[w],
        &MODEL_GRAD_CHECK,
    )
}

/// Jitter seed of the max-pooling checks. Max pooling is not differentiable
/// where two candidates tie, and a finite difference that straddles such a
/// tie disagrees with the gradient; this seed gives a point clear of ties.
pub const GRAD_CHECK_SEED: u64 = 1;

fn document_check(mode: AttentionMode, pooling: Pooling, seeds: &[u64]) -> Result<Check> {
    let mut passed = true;
    let mut worst = 0.0f64;
    let mut count = 0;
    for &seed in seeds {
        let model = toy_document_model_with(mode, pooling, seed)?;
        for doc in toy_documents() {
            let r = model_grad_check(&model, &Example::Document(doc), &MODEL_GRAD_CHECK)?;
            passed &= r.passed;
            worst = worst.max(r.max_rel_error());
            count = r.params.len();
        }
    }
    let pooling = match pooling {
        Pooling::Max => "max",
        Pooling::Mean => "mean",
    };
    Ok(Check {
        name: format!(
            "document model, mode={mode}, {pooling} pooling, {} point(s)",
            seeds.len()
        ),
        passed,
        detail: format!("max relative error {worst:.2e} over {count} parameters"),
    })
}

fn gradcheck_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let summarize = |r: &GradCheckReport| {
        format!(
            "max relative error {:.2e} over {} parameters",
            r.max_rel_error(),
            r.params.len()
        )
    };
    for mode in [
        AttentionMode::Structured,
        AttentionMode::Simple,
        AttentionMode::None,
    ] {
        checks.push(document_check(mode, Pooling::Max, &[GRAD_CHECK_SEED])?);
        checks.push(document_check(mode, Pooling::Mean, &[1, 2, 3, 4, 5])?);
    }
    let model = toy_pair_model(AttentionMode::Structured, GRAD_CHECK_SEED)?;
    let r = model_grad_check(
        &model,
        &Example::Pair(toy_pairs().remove(0)),
        &MODEL_GRAD_CHECK,
    )?;
    checks.push(Check {
        name: "sentence-pair model, mode=structured".into(),
        passed: r.passed,
        detail: summarize(&r),
    });
    let control = corrupted_rule_check()?;
    checks.push(Check {
        name: "negative control (corrupted backward rule is caught)".into(),
        passed: !control.passed,
        detail: summarize(&control),
    });
    Ok(checks)
}

// ---------------------------------------------------------------------------
// Oracle sweeps

fn uniform_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

/// Scores drawn uniformly from `[-scale, scale)`.
pub fn random_scores(n: usize, scale: f64, rng: &mut impl Rng) -> ScoreSet {
    let f = uniform_matrix(n, n, scale, rng);
    let f_root = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    ScoreSet::new(f, f_root).expect("finite square scores")
}

/// Largest entrywise gap between the determinant-based marginals and tree
/// enumeration, over `cases` random score sets for each `n`.
pub fn marginal_sweep(ns: impl IntoIterator<Item = usize>, cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for n in ns {
        for _ in 0..cases {
            let s = random_scores(n, 3.0, &mut rng);
            let fast = compute_marginals(&s)?;
            let slow = brute_force_marginals(&s)?;
            worst = worst.max(fast.max_abs_diff(&slow).expect("same size"));
        }
    }
    Ok(worst)
}

/// Largest deviations of per-unit head mass and total root mass from one.
pub fn normalization_sweep(n: usize, cases: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut column, mut root) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let m = compute_marginals(&random_scores(n, 3.0, &mut rng))?;
        for mass in m.head_mass() {
            column = column.max((mass - 1.0).abs());
        }
        root = root.max((m.a_root.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((column, root))
}

/// Largest marginal change under constant shifts of the pair and root scores.
pub fn shift_sweep(n: usize, cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let s = random_scores(n, 3.0, &mut rng);
        let base = compute_marginals(&s)?;
        let (df, droot) = (rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        for shifted in [
            s.shifted(df, 0.0),
            s.shifted(0.0, droot),
            s.shifted(df, droot),
        ] {
            let m = compute_marginals(&shifted)?;
            worst = worst.max(base.max_abs_diff(&m).expect("same size"));
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeSweep {
    pub instances: usize,
    /// Instances whose brute-force maximum was unique.
    pub unique: usize,
    pub score_mismatches: usize,
    /// Unique-maximum instances where the decoded heads differ.
    pub structure_mismatches: usize,
}

impl DecodeSweep {
    pub fn passed(&self) -> bool {
        self.score_mismatches == 0 && self.structure_mismatches == 0
    }
}

/// Compares Chu-Liu-Edmonds against exhaustive search.
pub fn decode_sweep(
    ns: impl IntoIterator<Item = usize>,
    cases: usize,
    seed: u64,
) -> Result<DecodeSweep> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DecodeSweep::default();
    for n in ns {
        for _ in 0..cases {
            let s = random_scores(n, 3.0, &mut rng);
            let fast = chu_liu_edmonds(&s)?;
            let (best, unique) = brute_force_best_tree(&s)?;
            out.instances += 1;
            if fast.score != best.score {
                out.score_mismatches += 1;
            }
            if unique {
                out.unique += 1;
                if fast.heads != best.heads {
                    out.structure_mismatches += 1;
                }
            }
        }
    }
    Ok(out)
}

fn oracle_suite() -> Result<Vec<Check>> {
    let marg = marginal_sweep(1..=6, 200, 1)?;
    let (column, root) = normalization_sweep(40, 100, 2)?;
    let shift = shift_sweep(8, 100, 3)?;
    let decode = decode_sweep(2..=6, 1000, 4)?;
    Ok(vec![
        Check {
            name: "marginals vs enumeration, n=1..6".into(),
            passed: marg < 1e-9,
            detail: format!("max abs error {marg:.2e}"),
        },
        Check {
            name: "head mass sums to one, n=40".into(),
            passed: column < 1e-10 && root < 1e-10,
            detail: format!("column {column:.2e}, root {root:.2e}"),
        },
        Check {
            name: "shift invariance".into(),
            passed: shift < 1e-10,
            detail: format!("max change {shift:.2e}"),
        },
        Check {
            name: "Chu-Liu-Edmonds vs exhaustive search, n=2..6".into(),
            passed: decode.passed(),
            detail: format!(
                "{} instances ({} unique), {} score and {} structure mismatches",
                decode.instances,
                decode.unique,
                decode.score_mismatches,
                decode.structure_mismatches
            ),
        },
    ])
}

// ---------------------------------------------------------------------------
// Speed

pub const SPEED_RATIO_LIMIT: f64 = 3.0;

#[derive(Clone, Copy, Debug)]
pub struct SpeedReport {
    pub n: usize,
    pub reps: usize,
    /// Median seconds per sentence pair.
    pub none: f64,
    pub simple: f64,
    pub structured: f64,
}

impl SpeedReport {
    pub fn simple_ratio(&self) -> f64 {
        self.simple / self.none
    }

    pub fn structured_ratio(&self) -> f64 {
        self.structured / self.none
    }
}

impl fmt::Display for SpeedReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} none {:.6}s simple {:.6}s structured {:.6}s per instance; simple/none {:.2}, structured/none {:.2}",
            self.n,
            self.none,
            self.simple,
            self.structured,
            self.simple_ratio(),
            self.structured_ratio()
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Median forward-pass time of the sentence-pair model at default sizes,
/// with premise and hypothesis both `n` tokens long.
pub fn speed(n: usize, reps: usize, seed: u64) -> Result<SpeedReport> {
    const VOCAB: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<Example> = (0..reps.max(1))
        .map(|_| {
            let mut sentence = || (0..n).map(|_| rng.gen_range(2..VOCAB)).collect();
            Example::Pair(SentencePair {
                label: 0,
                premise: sentence(),
                hypothesis: sentence(),
            })
        })
        .collect();
    let time = |mode: AttentionMode| -> Result<f64> {
        let mut cfg = ModelConfig::nli(VOCAB);
        cfg.sentence.mode = mode;
        let model = Model::new(cfg, seed)?.without_dropout();
        model.predict(&pairs[0])?;
        let mut samples = Vec::with_capacity(pairs.len());
        for ex in &pairs {
            let start = Instant::now();
            std::hint::black_box(model.predict(ex)?);
            samples.push(start.elapsed().as_secs_f64());
        }
        Ok(median(samples))
    };
    Ok(SpeedReport {
        n,
        reps: pairs.len(),
        none: time(AttentionMode::None)?,
        simple: time(AttentionMode::Simple)?,
        structured: time(AttentionMode::Structured)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("fast".parse::<Suite>().is_err());
    }

    #[test]
    fn corrupted_rule_is_reported() {
        let r = corrupted_rule_check().unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error() > 1e-2);
    }

    #[test]
    fn small_sweeps_pass() {
        assert!(marginal_sweep(1..=4, 10, 9).unwrap() < 1e-9);
        let (column, root) = normalization_sweep(12, 5, 9).unwrap();
        assert!(column < 1e-10 && root < 1e-10);
        assert!(shift_sweep(5, 5, 9).unwrap() < 1e-10);
        assert!(decode_sweep(2..=4, 50, 9).unwrap().passed());
    }

    #[test]
    fn toy_models_pass_the_gradient_check() {
        let model = toy_document_model(AttentionMode::Structured, 2).unwrap();
        let doc = Example::Document(toy_documents().remove(2));
        assert!(
            model_grad_check(&model, &doc, &MODEL_GRAD_CHECK)
                .unwrap()
                .passed
        );
    }

    #[test]
    fn speed_report_has_three_timings_and_two_ratios() {
        let r = speed(5, 3, 1).unwrap();
        assert!(r.none > 0.0 && r.simple > 0.0 && r.structured > 0.0);
        let text = r.to_string();
        assert_eq!(text.matches("s per instance").count(), 1);
        assert!(text.contains("simple/none") && text.contains("structured/none"));
    }

    #[test]
    fn report_lists_every_check() {
        let report = SuiteReport {
            suite: Suite::Oracle,
            checks: vec![
                Check {
                    name: "a".into(),
                    passed: true,
                    detail: "ok".into(),
                },
                Check {
                    name: "b".into(),
                    passed: false,
                    detail: "off".into(),
                },
            ],
        };
        let text = report.to_string();
        assert!(text.contains("[PASS] a: ok") && text.contains("[FAIL] b: off"));
        assert!(text.ends_with("oracle FAIL"));
    }
}
