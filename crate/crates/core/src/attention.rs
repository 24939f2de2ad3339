//! Intra-sequence attention layers.
//!
//! Sequences are nxk matrices, one row per unit. Each bi-LSTM output row is
//! split into a semantic part `e` (first `k_e` columns) and a structure part
//! `d` (last `k_s` columns). Scores are computed from `d` only:
//!
//! ```text
//! f[i][j]   = tanh(W_p d_i)^T W_a tanh(W_c d_j)
//! f_root[i] = w_root . d_i
//! ```
//!
//! Simple attention normalizes each row of `f` with a softmax. Structured
//! attention turns `(f, f_root)` into tree marginals and mixes parent and
//! child context into every unit:
//!
//! ```text
//! p_i = sum_k a[k][i] e_k + a_root[i] e_root
//! c_i = sum_k a[i][k] e_k
//! r_i = tanh(W_update [e_i, p_i, c_i])
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::mtt::{self, ScoreSet};

/// How the children context `c_i` is gathered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChildContext {
    /// `c_i = sum_k a[i][k] e_k`
    #[default]
    Children,
    /// `c_i = (sum_k a[i][k]) e_i`, the formula as printed.
    Literal,
}

/// Plain-valued attention weights for one level.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// k_s x k_s, parent projection.
    pub w_p: Matrix,
    /// k_s x k_s, child projection.
    pub w_c: Matrix,
    /// k_s x k_s, bilinear form.
    pub w_a: Matrix,
    /// 1 x k_s, root scores.
    pub w_root: Matrix,
    /// k_e x 3k_e, semantic update.
    pub w_update: Matrix,
    /// 1 x k_e, embedding of the artificial root.
    pub e_root: Matrix,
}

pub(crate) fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Matrix::from_raw(rows, cols, data)
}

impl AttentionParams {
    pub fn init(k_e: usize, k_s: usize, rng: &mut impl Rng) -> Self {
        AttentionParams {
            w_p: uniform(k_s, k_s, 0.1, rng),
            w_c: uniform(k_s, k_s, 0.1, rng),
            w_a: uniform(k_s, k_s, 0.1, rng),
            w_root: uniform(1, k_s, 0.1, rng),
            w_update: uniform(k_e, 3 * k_e, 0.1, rng),
            e_root: uniform(1, k_e, 0.05, rng),
        }
    }

    pub fn named(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("w_p", &self.w_p),
            ("w_c", &self.w_c),
            ("w_a", &self.w_a),
            ("w_root", &self.w_root),
            ("w_update", &self.w_update),
            ("e_root", &self.e_root),
        ]
    }

    /// Registers every weight on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            w_p: tape.param(self.w_p.clone()),
            w_c: tape.param(self.w_c.clone()),
            w_a: tape.param(self.w_a.clone()),
            w_root: tape.param(self.w_root.clone()),
            w_update: tape.param(self.w_update.clone()),
            e_root: tape.param(self.e_root.clone()),
        }
    }
}

/// Attention weights registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_p: Var,
    pub w_c: Var,
    pub w_a: Var,
    pub w_root: Var,
    pub w_update: Var,
    pub e_root: Var,
}

/// Splits nxk bi-LSTM outputs into semantic (nxk_e) and structure (nxk_s) parts.
pub fn split_hidden(tape: &mut Tape, h: Var, k_e: usize, k_s: usize) -> Result<(Var, Var)> {
    let k = tape.shape(h).1;
    if k_e == 0 || k_s == 0 || k_e + k_s != k {
        return Err(shape_err(
            "split_hidden",
            format!("cannot split {k} columns into k_e={k_e} and k_s={k_s}"),
        ));
    }
    Ok((tape.slice_cols(h, 0, k_e)?, tape.slice_cols(h, k_e, k_s)?))
}

/// nxn pair scores from nxk_s structure vectors.
pub fn pair_scores(tape: &mut Tape, d: Var, w_p: Var, w_c: Var, w_a: Var) -> Result<Var> {
    let wp_t = tape.transpose(w_p);
    let wc_t = tape.transpose(w_c);
    let parents = tape.matmul(d, wp_t)?;
    let parents = tape.tanh(parents);
    let children = tape.matmul(d, wc_t)?;
    let children = tape.tanh(children);
    let left = tape.matmul(parents, w_a)?;
    let children_t = tape.transpose(children);
    tape.matmul(left, children_t)
}

/// Pair scores (nxn) and root scores (1xn).
pub fn bilinear_scores(tape: &mut Tape, d: Var, w: &AttentionVars) -> Result<(Var, Var)> {
    let f = pair_scores(tape, d, w.w_p, w.w_c, w.w_a)?;
    let d_t = tape.transpose(d);
    let f_root = tape.matmul(w.w_root, d_t)?;
    Ok((f, f_root))
}

/// Score set for plain structure vectors (one row per unit).
pub fn score_set(d: &Matrix, params: &AttentionParams) -> Result<ScoreSet> {
    let mut tape = Tape::new();
    let dv = tape.constant(d.clone());
    let w = params.bind(&mut tape);
    let (f, f_root) = bilinear_scores(&mut tape, dv, &w)?;
    ScoreSet::new(tape.value(f).clone(), tape.value(f_root).data().to_vec())
}

/// Structure-aware update of the semantic vectors `e` (nxk_e) given marginals
/// `a` (nxn) and `a_root` (1xn). Returns nxk_e.
pub fn structured_update(
    tape: &mut Tape,
    e: Var,
    a: Var,
    a_root: Var,
    w: &AttentionVars,
    child: ChildContext,
) -> Result<Var> {
    let (n, k_e) = tape.shape(e);
    if tape.shape(a) != (n, n) || tape.shape(a_root) != (1, n) {
        return Err(shape_err(
            "structured_update",
            format!(
                "{n} units but marginals are {:?} and {:?}",
                tape.shape(a),
                tape.shape(a_root)
            ),
        ));
    }
    let a_t = tape.transpose(a);
    let from_units = tape.matmul(a_t, e)?;
    let root_t = tape.transpose(a_root);
    let from_root = tape.matmul(root_t, w.e_root)?;
    let parents = tape.add(from_units, from_root)?;
    let children = match child {
        ChildContext::Children => tape.matmul(a, e)?,
        ChildContext::Literal => {
            let ones_col = tape.constant(Matrix::filled(n, 1, 1.0));
            let ones_row = tape.constant(Matrix::filled(1, k_e, 1.0));
            let mass = tape.matmul(a, ones_col)?;
            let mass = tape.matmul(mass, ones_row)?;
            tape.mul(mass, e)?
        }
    };
    let joined = tape.concat_cols(&[e, parents, children])?;
    let w_t = tape.transpose(w.w_update);
    let r = tape.matmul(joined, w_t)?;
    Ok(tape.tanh(r))
}

/// Output of [`structured_attention`].
#[derive(Clone, Copy, Debug)]
pub struct StructuredOutput {
    pub r: Var,
    pub f: Var,
    pub f_root: Var,
    pub a: Var,
    pub a_root: Var,
}

/// Scores, marginals and update in one step.
///
/// If the root-adjusted Laplacian is numerically singular, the scores are
/// clamped to `[-CLAMP, CLAMP]` and the marginals recomputed once.
pub fn structured_attention(
    tape: &mut Tape,
    e: Var,
    d: Var,
    w: &AttentionVars,
    child: ChildContext,
) -> Result<StructuredOutput> {
    const CLAMP: f64 = 10.0;
    let (f, f_root) = bilinear_scores(tape, d, w)?;
    let (a, a_root) = match mtt::marginals_on_tape(tape, f, f_root) {
        Err(Error::SingularMatrix) => {
            let fc = tape.clamp(f, -CLAMP, CLAMP);
            let rc = tape.clamp(f_root, -CLAMP, CLAMP);
            mtt::marginals_on_tape(tape, fc, rc)?
        }
        other => other?,
    };
    let r = structured_update(tape, e, a, a_root, w, child)?;
    Ok(StructuredOutput {
        r,
        f,
        f_root,
        a,
        a_root,
    })
}

/// Row-softmax attention over pair scores of `d`; returns `(r, weights)` with
/// `r_i = sum_j a_ij u_j`.
pub fn simple_attention(tape: &mut Tape, u: Var, d: Var, w: &AttentionVars) -> Result<(Var, Var)> {
    if tape.shape(u).0 != tape.shape(d).0 {
        return Err(shape_err(
            "simple_attention",
            format!(
                "{:?} values vs {:?} structure vectors",
                tape.shape(u),
                tape.shape(d)
            ),
        ));
    }
    let f = pair_scores(tape, d, w.w_p, w.w_c, w.w_a)?;
    let weights = tape.softmax_row(f);
    Ok((tape.matmul(weights, u)?, weights))
}
