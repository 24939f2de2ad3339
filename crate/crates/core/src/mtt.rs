//! Marginals of the distribution over non-projective dependency trees.
//!
//! Units `0..n` attach either to another unit or to an artificial root, and
//! exactly one unit attaches to the root. A tree's weight is
//! `exp(sum of its edge scores + the root score of its root child)`. Edge and
//! root marginals come from the inverse of the root-adjusted Laplacian:
//!
//! ```text
//! A[i][j]    = exp(f[i][j]) for i != j, 0 on the diagonal
//! L[i][j]    = sum_k A[k][j] if i == j, -A[i][j] otherwise
//! Lbar       = L with row 0 replaced by exp(f_root[j])
//! a[i][j]    = [j != 0] A[i][j] inv(Lbar)[j][j] - [i != 0] A[i][j] inv(Lbar)[j][i]
//! a_root[j]  = exp(f_root[j]) inv(Lbar)[j][0]
//! ```
//!
//! and `det(Lbar)` is the partition function. Before exponentiating, every
//! column `j` (the scores of all edges entering unit `j`, root edge included)
//! is shifted by the maximum over its word edges, and the root scores are then
//! shifted together by their maximum. Each tree contains exactly one edge
//! entering each unit and exactly one root edge, so both shifts change every
//! tree weight by the same factor and the marginals are unaffected.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{self, Matrix};

/// Largest `n` accepted by the enumeration oracle.
pub const ENUMERATION_LIMIT: usize = 7;

/// Unnormalized pair scores `f[i][j]` (i heads j) and root scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    f: Matrix,
    f_root: Vec<f64>,
}

impl ScoreSet {
    pub fn new(f: Matrix, f_root: Vec<f64>) -> Result<Self> {
        if !f.is_square() || f.rows() != f_root.len() {
            return Err(shape_err(
                "ScoreSet::new",
                format!("f is {:?}, f_root has {} entries", f.shape(), f_root.len()),
            ));
        }
        if !f.is_finite() || f_root.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(ScoreSet { f, f_root })
    }

    pub fn n(&self) -> usize {
        self.f_root.len()
    }

    pub fn f(&self) -> &Matrix {
        &self.f
    }

    pub fn f_root(&self) -> &[f64] {
        &self.f_root
    }

    /// Multiplies every score by `k`.
    pub fn scaled(&self, k: f64) -> ScoreSet {
        ScoreSet {
            f: self.f.scale(k),
            f_root: self.f_root.iter().map(|v| v * k).collect(),
        }
    }

    /// Adds `df` to every pair score and `droot` to every root score.
    pub fn shifted(&self, df: f64, droot: f64) -> ScoreSet {
        ScoreSet {
            f: self.f.map(|v| v + df),
            f_root: self.f_root.iter().map(|v| v + droot).collect(),
        }
    }

    /// Sum of the scores of the edges in `heads` (`None` = attached to root).
    pub fn tree_score(&self, heads: &[Option<usize>]) -> f64 {
        heads
            .iter()
            .enumerate()
            .map(|(j, h)| match h {
                Some(i) => self.f[(*i, j)],
                None => self.f_root[j],
            })
            .sum()
    }

    /// Stabilizing shifts: per-column maxima over incoming word edges, and
    /// one global shift for the root row applied after the column shift.
    fn shifts(&self) -> Shifts {
        let n = self.n();
        let columns: Vec<f64> = (0..n)
            .map(|j| {
                (0..n)
                    .filter(|&i| i != j)
                    .map(|i| self.f[(i, j)])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let root = (0..n)
            .map(|j| self.f_root[j] - columns[j])
            .fold(f64::NEG_INFINITY, f64::max);
        Shifts { columns, root }
    }
}

struct Shifts {
    columns: Vec<f64>,
    root: f64,
}

impl Shifts {
    /// Total log-weight removed from every tree.
    fn total(&self) -> f64 {
        self.columns.iter().sum::<f64>() + self.root
    }

    fn root_row(&self) -> Vec<f64> {
        self.columns.iter().map(|c| c + self.root).collect()
    }
}

/// Edge marginals `a[i][j] = P(i heads j)` and root marginals `a_root[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeMarginals {
    #[serde(with = "matrix_rows")]
    pub a: Matrix,
    pub a_root: Vec<f64>,
}

impl TreeMarginals {
    pub fn n(&self) -> usize {
        self.a_root.len()
    }

    /// `sum_i a[i][j] + a_root[j]` for every unit `j`.
    pub fn head_mass(&self) -> Vec<f64> {
        (0..self.n())
            .map(|j| (0..self.n()).map(|i| self.a[(i, j)]).sum::<f64>() + self.a_root[j])
            .collect()
    }

    pub fn max_abs_diff(&self, other: &TreeMarginals) -> Option<f64> {
        if self.n() != other.n() {
            return None;
        }
        let edges = self.a.max_abs_diff(&other.a)?;
        let roots = self
            .a_root
            .iter()
            .zip(&other.a_root)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        Some(edges.max(roots))
    }
}

mod matrix_rows {
    use super::Matrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = (0..m.rows()).map(|r| m.row(r)).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Matrix::from_rows(&rows).map_err(D::Error::custom)
    }
}

fn single_unit() -> TreeMarginals {
    TreeMarginals {
        a: Matrix::zeros(1, 1),
        a_root: vec![1.0],
    }
}

/// Stabilized weights: returns `(A, root weights, Lbar)`.
fn root_laplacian(s: &ScoreSet, shifts: &Shifts) -> (Matrix, Vec<f64>, Matrix) {
    let n = s.n();
    let shift = &shifts.columns;
    let root_shift = shifts.root_row();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                a[(i, j)] = (s.f[(i, j)] - shift[j]).exp();
            }
        }
    }
    let root: Vec<f64> = (0..n)
        .map(|j| (s.f_root[j] - root_shift[j]).exp())
        .collect();
    let mut lbar = a.scale(-1.0);
    for j in 0..n {
        lbar[(j, j)] = (0..n).map(|i| a[(i, j)]).sum();
    }
    lbar.row_mut(0).copy_from_slice(&root);
    (a, root, lbar)
}

/// Exact edge and root marginals over single-root non-projective trees.
pub fn compute_marginals(s: &ScoreSet) -> Result<TreeMarginals> {
    let n = s.n();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if n == 1 {
        return Ok(single_unit());
    }
    let (a, root, lbar) = root_laplacian(s, &s.shifts());
    let inv = linalg::invert(&lbar)?;
    let mut marg = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut v = 0.0;
            if j != 0 {
                v += a[(i, j)] * inv[(j, j)];
            }
            if i != 0 {
                v -= a[(i, j)] * inv[(j, i)];
            }
            marg[(i, j)] = v;
        }
    }
    let a_root = (0..n).map(|j| root[j] * inv[(j, 0)]).collect();
    Ok(TreeMarginals { a: marg, a_root })
}

/// Log of the total weight of all single-root trees.
pub fn log_partition(s: &ScoreSet) -> Result<f64> {
    match s.n() {
        0 => Err(Error::EmptyInput),
        1 => Ok(s.f_root[0]),
        _ => {
            let shifts = s.shifts();
            let (_, _, lbar) = root_laplacian(s, &shifts);
            let (logdet, sign) = linalg::log_det(&lbar)?;
            if sign <= 0.0 {
                return Err(Error::SingularMatrix);
            }
            Ok(logdet + shifts.total())
        }
    }
}

/// Differentiable marginals: `f` is nxn, `f_root` is 1xn. Returns `(a, a_root)`
/// with shapes nxn and 1xn.
pub fn marginals_on_tape(tape: &mut Tape, f: Var, f_root: Var) -> Result<(Var, Var)> {
    let (n, m) = tape.shape(f);
    if n != m || tape.shape(f_root) != (1, n) {
        return Err(shape_err(
            "marginals_on_tape",
            format!("f is {:?}, f_root is {:?}", (n, m), tape.shape(f_root)),
        ));
    }
    if n == 1 {
        let a = tape.constant(Matrix::zeros(1, 1));
        let a_root = tape.constant(Matrix::scalar(1.0));
        return Ok((a, a_root));
    }
    let scores = ScoreSet::new(tape.value(f).clone(), tape.value(f_root).data().to_vec())?;
    // The shifts are treated as constants; marginals do not depend on them.
    let shifts = scores.shifts();
    let col_shift = Matrix::from_raw(1, n, shifts.columns.iter().map(|c| -c).collect());
    let root_shift = Matrix::from_raw(1, n, shifts.root_row().iter().map(|c| -c).collect());

    let mut off_diag = Matrix::filled(n, n, 1.0);
    let mut col_mask = Matrix::filled(n, n, 1.0);
    let mut row_mask = Matrix::filled(n, n, 1.0);
    for i in 0..n {
        off_diag[(i, i)] = 0.0;
        col_mask[(i, 0)] = 0.0;
        row_mask[(0, i)] = 0.0;
    }
    let mut e0 = Matrix::zeros(n, 1);
    e0[(0, 0)] = 1.0;

    let col_shift = tape.constant(col_shift);
    let root_shift = tape.constant(root_shift);
    let ones_col = tape.constant(Matrix::filled(n, 1, 1.0));
    let ones_row = tape.constant(Matrix::filled(1, n, 1.0));
    let eye = tape.constant(Matrix::identity(n));
    let off_diag = tape.constant(off_diag);
    let col_mask = tape.constant(col_mask);
    let row_mask = tape.constant(row_mask);
    let e0 = tape.constant(e0);

    let fs = tape.add_row_broadcast(f, col_shift)?;
    let ef = tape.exp(fs);
    let a = tape.mul(ef, off_diag)?;
    let rs = tape.add(f_root, root_shift)?;
    let root = tape.exp(rs);

    let col_sums = tape.matmul(ones_row, a)?;
    let spread = tape.matmul(ones_col, col_sums)?;
    let degree = tape.mul(spread, eye)?;
    let lap = tape.sub(degree, a)?;
    let lap = tape.mul(lap, row_mask)?;
    let root_row = tape.matmul(e0, root)?;
    let lbar = tape.add(lap, root_row)?;
    let inv = tape.matrix_inverse(lbar)?;

    let inv_diag = tape.mul(inv, eye)?;
    let inv_diag = tape.matmul(ones_row, inv_diag)?;
    let inv_diag = tape.matmul(ones_col, inv_diag)?;
    let inv_diag = tape.mul(inv_diag, col_mask)?;
    let first = tape.mul(a, inv_diag)?;
    let inv_t = tape.transpose(inv);
    let inv_t = tape.mul(inv_t, row_mask)?;
    let second = tape.mul(a, inv_t)?;
    let marg = tape.sub(first, second)?;

    let inv_col0 = tape.matmul(inv, e0)?;
    let inv_col0 = tape.transpose(inv_col0);
    let a_root = tape.mul(root, inv_col0)?;
    Ok((marg, a_root))
}

/// Calls `visit` with the head vector of every single-root tree over `n` units.
///
/// Every unit picks a head among the root and the other units; assignments
/// with a cycle or with more than one root child are skipped.
pub fn for_each_tree(n: usize, mut visit: impl FnMut(&[Option<usize>])) -> Result<()> {
    if n > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            n,
            limit: ENUMERATION_LIMIT,
        });
    }
    if n == 0 {
        return Ok(());
    }
    // choice[j] in 0..n: value n means root, otherwise the head unit.
    let mut choice = vec![0usize; n];
    let mut heads = vec![None; n];
    loop {
        let valid = choice.iter().enumerate().all(|(j, &c)| c != j)
            && choice.iter().filter(|&&c| c == n).count() == 1;
        if valid {
            for (h, &c) in heads.iter_mut().zip(&choice) {
                *h = (c < n).then_some(c);
            }
            if is_acyclic(&heads) {
                visit(&heads);
            }
        }
        // Odometer increment over {0..=n}^n.
        let mut k = 0;
        loop {
            if k == n {
                return Ok(());
            }
            choice[k] += 1;
            if choice[k] <= n {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

/// True when following heads from every unit reaches the root.
pub fn is_acyclic(heads: &[Option<usize>]) -> bool {
    let n = heads.len();
    (0..n).all(|start| {
        let mut cur = start;
        for _ in 0..=n {
            match heads[cur] {
                None => return true,
                Some(h) if h < n => cur = h,
                Some(_) => return false,
            }
        }
        false
    })
}

/// Marginals by explicit enumeration of every single-root tree (`n <= 7`).
pub fn brute_force_marginals(s: &ScoreSet) -> Result<TreeMarginals> {
    let n = s.n();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    // Reference score keeps the exponentials in range.
    let mut best = f64::NEG_INFINITY;
    for_each_tree(n, |heads| best = best.max(s.tree_score(heads)))?;
    let mut total = 0.0;
    let mut edge = Matrix::zeros(n, n);
    let mut root = vec![0.0; n];
    for_each_tree(n, |heads| {
        let w = (s.tree_score(heads) - best).exp();
        total += w;
        for (j, h) in heads.iter().enumerate() {
            match h {
                Some(i) => edge[(*i, j)] += w,
                None => root[j] += w,
            }
        }
    })?;
    Ok(TreeMarginals {
        a: edge.scale(1.0 / total),
        a_root: root.iter().map(|w| w / total).collect(),
    })
}

/// Log partition function by enumeration (`n <= 7`).
pub fn brute_force_log_partition(s: &ScoreSet) -> Result<f64> {
    let mut scores = Vec::new();
    for_each_tree(s.n(), |heads| scores.push(s.tree_score(heads)))?;
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(best + scores.iter().map(|v| (v - best).exp()).sum::<f64>().ln())
}
