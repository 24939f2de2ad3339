//! Dense row-major matrices and the handful of factorizations the model needs.

use std::fmt;
use std::io::{Read, Write};
use std::ops::{Index, IndexMut};

use crate::error::{shape_err, Error, Result};

/// Pivots smaller than this are treated as exact zeros.
pub const PIVOT_EPS: f64 = 1e-300;

/// `invert` refuses matrices whose smallest/largest pivot ratio falls below this.
pub const MIN_PIVOT_RATIO: f64 = 1e-14;

/// Dense real matrix in row-major order.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{:.6}", self[(r, c)])?;
            }
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// All-zero matrix. Panics on a zero dimension.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Checked constructor: positive dimensions, matching length, finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(shape_err(
                "from_vec",
                format!("zero dimension {rows}x{cols}"),
            ));
        }
        if data.len() != rows * cols {
            return Err(shape_err(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(data: Vec<f64>) -> Result<Self> {
        Self::from_vec(1, data.len(), data)
    }

    pub fn column_vector(data: Vec<f64>) -> Result<Self> {
        Self::from_vec(data.len(), 1, data)
    }

    pub fn scalar(v: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    /// Builds a matrix without validating entries; dimensions must still agree.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 matrix.
    pub fn as_scalar(&self) -> Option<f64> {
        (self.rows == 1 && self.cols == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|v| v * k)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "add_assign",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_raw(n, m, out))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Matrix) -> Option<f64> {
        (self.shape() == other.shape()).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        })
    }

    /// Writes the checkpoint encoding: rows and cols as little-endian u64,
    /// then the entries as little-endian f64 in row-major order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Matrix> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let rows = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let cols = u64::from_le_bytes(word) as usize;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| shape_err("read_from", "dimension overflow"))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        Matrix::from_vec(rows, cols, data)
    }

    /// Size in bytes of the serialized form.
    pub fn encoded_len(&self) -> usize {
        16 + 8 * self.data.len()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Packed LU factors of a row-permuted square matrix: `P·A = L·U`.
#[derive(Clone, Debug)]
pub struct LuFactors {
    /// Strict lower triangle holds L (unit diagonal implied), upper triangle holds U.
    pub lu: Matrix,
    /// Row `i` of `P·A` is row `pivots[i]` of `A`.
    pub pivots: Vec<usize>,
    /// Parity of the permutation.
    pub sign: f64,
}

impl LuFactors {
    pub fn n(&self) -> usize {
        self.lu.rows()
    }

    pub fn lower(&self) -> Matrix {
        let n = self.n();
        let mut l = Matrix::identity(n);
        for i in 0..n {
            for j in 0..i {
                l[(i, j)] = self.lu[(i, j)];
            }
        }
        l
    }

    pub fn upper(&self) -> Matrix {
        let n = self.n();
        let mut u = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                u[(i, j)] = self.lu[(i, j)];
            }
        }
        u
    }

    /// The permutation applied to `a`, as an explicit matrix.
    pub fn permutation(&self) -> Matrix {
        let n = self.n();
        let mut p = Matrix::zeros(n, n);
        for (i, &src) in self.pivots.iter().enumerate() {
            p[(i, src)] = 1.0;
        }
        p
    }

    fn diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n()).map(|i| self.lu[(i, i)])
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n();
        let mut x: Vec<f64> = self.pivots.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = self.lu.row(i);
            let s: f64 = row[..i].iter().zip(&x[..i]).map(|(l, v)| l * v).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            let s: f64 = row[i + 1..]
                .iter()
                .zip(&x[i + 1..])
                .map(|(u, v)| u * v)
                .sum();
            x[i] = (x[i] - s) / row[i];
        }
        b.copy_from_slice(&x);
    }
}

fn require_square(a: &Matrix, op: &'static str) -> Result<()> {
    if a.is_square() {
        Ok(())
    } else {
        Err(shape_err(
            op,
            format!("expected square matrix, got {:?}", a.shape()),
        ))
    }
}

/// LU factorization with partial pivoting (Doolittle, max-magnitude pivot per column).
pub fn lu_decompose(a: &Matrix) -> Result<LuFactors> {
    require_square(a, "lu_decompose")?;
    if !a.is_finite() {
        return Err(Error::NonFinite);
    }
    let n = a.rows();
    let mut lu = a.clone();
    let mut pivots: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;

    for k in 0..n {
        let (p, pmag) = (k..n)
            .map(|r| (r, lu[(r, k)].abs()))
            .fold(
                (k, -1.0),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            );
        if pmag < PIVOT_EPS {
            return Err(Error::SingularMatrix);
        }
        if p != k {
            for c in 0..n {
                lu.data.swap(k * n + c, p * n + c);
            }
            pivots.swap(k, p);
            sign = -sign;
        }
        let pivot = lu[(k, k)];
        for r in k + 1..n {
            let factor = lu[(r, k)] / pivot;
            lu[(r, k)] = factor;
            if factor == 0.0 {
                continue;
            }
            for c in k + 1..n {
                let u = lu[(k, c)];
                lu[(r, c)] -= factor * u;
            }
        }
    }
    Ok(LuFactors { lu, pivots, sign })
}

/// Inverse via LU solves against the identity columns.
pub fn invert(a: &Matrix) -> Result<Matrix> {
    let f = lu_decompose(a)?;
    let (min, max) = f
        .diagonal()
        .map(f64::abs)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if min / max < MIN_PIVOT_RATIO {
        return Err(Error::SingularMatrix);
    }
    let n = a.rows();
    let mut inv = Matrix::zeros(n, n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        col.fill(0.0);
        col[j] = 1.0;
        f.solve_in_place(&mut col);
        for (i, v) in col.iter().enumerate() {
            inv[(i, j)] = *v;
        }
    }
    Ok(inv)
}

/// `(log|det a|, sign)`; singular input yields `(-inf, 0)`.
pub fn log_det(a: &Matrix) -> Result<(f64, f64)> {
    require_square(a, "log_det")?;
    match lu_decompose(a) {
        Ok(f) => {
            let mut sign = f.sign;
            let mut acc = 0.0;
            for u in f.diagonal() {
                acc += u.abs().ln();
                sign *= u.signum();
            }
            Ok((acc, sign))
        }
        Err(Error::SingularMatrix) => Ok((f64::NEG_INFINITY, 0.0)),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(n, m, (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn well_conditioned(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mut a = random(n, n, rng);
        for i in 0..n {
            a[(i, i)] += n as f64;
        }
        a
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    fn cofactor_det(a: &Matrix) -> f64 {
        let n = a.rows();
        if n == 1 {
            return a[(0, 0)];
        }
        (0..n)
            .map(|c| {
                let minor: Vec<f64> = (1..n)
                    .flat_map(|r| (0..n).filter(move |&cc| cc != c).map(move |cc| (r, cc)))
                    .map(|idx| a[idx])
                    .collect();
                let minor = Matrix::from_vec(n - 1, n - 1, minor).unwrap();
                let sgn = if c % 2 == 0 { 1.0 } else { -1.0 };
                sgn * a[(0, c)] * cofactor_det(&minor)
            })
            .sum()
    }

    #[test]
    fn lu_of_identity_is_trivial() {
        let f = lu_decompose(&Matrix::identity(3)).unwrap();
        assert_eq!(f.lower(), Matrix::identity(3));
        assert_eq!(f.upper(), Matrix::identity(3));
        assert_eq!(f.pivots, vec![0, 1, 2]);
        assert_eq!(f.sign, 1.0);
    }

    #[test]
    fn lu_swaps_rows_of_permutation_matrix() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let f = lu_decompose(&a).unwrap();
        assert_eq!(f.pivots, vec![1, 0]);
        assert_eq!(f.sign, -1.0);
    }

    #[test]
    fn lu_rejects_rank_deficient() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(lu_decompose(&a), Err(Error::SingularMatrix)));
        assert!(matches!(invert(&a), Err(Error::SingularMatrix)));
    }

    #[test]
    fn lu_reconstructs_permuted_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..12 {
            let a = random(n, n, &mut rng);
            let f = lu_decompose(&a).unwrap();
            let pa = f.permutation().matmul(&a).unwrap();
            let recon = f.lower().matmul(&f.upper()).unwrap();
            let rel = pa.max_abs_diff(&recon).unwrap() / a.max_abs();
            assert!(rel < 1e-10, "n={n} rel={rel}");
        }
    }

    #[test]
    fn invert_simple_cases() {
        assert_eq!(invert(&Matrix::identity(3)).unwrap(), Matrix::identity(3));
        let d = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let inv = invert(&d).unwrap();
        assert_eq!(
            inv,
            Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.25]]).unwrap()
        );
    }

    #[test]
    fn invert_multiplies_back_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = well_conditioned(5, &mut rng);
        let prod = a.matmul(&invert(&a).unwrap()).unwrap();
        assert!(prod.max_abs_diff(&Matrix::identity(5)).unwrap() < 1e-8);
    }

    #[test]
    fn invert_guards_ill_conditioning() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1e-16]]).unwrap();
        assert!(matches!(invert(&a), Err(Error::SingularMatrix)));
    }

    #[test]
    fn log_det_cases() {
        assert_eq!(log_det(&Matrix::identity(4)).unwrap(), (0.0, 1.0));
        let d = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let (l, s) = log_det(&d).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-15);
        assert_eq!(s, 1.0);
        let sing = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(log_det(&sing).unwrap(), (f64::NEG_INFINITY, 0.0));
    }

    #[test]
    fn log_det_matches_cofactor_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=4 {
            for _ in 0..20 {
                let a = random(n, n, &mut rng);
                let det = cofactor_det(&a);
                let (l, s) = log_det(&a).unwrap();
                let rel = (s * l.exp() - det).abs() / det.abs();
                assert!(rel < 1e-10, "n={n} det={det} rel={rel}");
            }
        }
    }

    #[test]
    fn matmul_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(4, 4, &mut rng);
        assert_eq!(a.matmul(&Matrix::identity(4)).unwrap(), a);
        let b = random(4, 4, &mut rng);
        assert_eq!(a.matmul(&b).unwrap(), naive_matmul(&a, &b));
        let x = random(2, 3, &mut rng);
        let y = random(3, 2, &mut rng);
        assert_eq!(x.matmul(&y).unwrap().shape(), (2, 2));
        assert!(matches!(x.matmul(&x), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(x.add(&y), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite)
        ));
        assert!(Matrix::from_vec(2, 2, vec![1.0]).is_err());
        assert!(Matrix::from_vec(0, 2, vec![]).is_err());
    }

    #[test]
    fn serialization_layout() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), m.encoded_len());
        assert_eq!(&buf[..8], &1u64.to_le_bytes());
        assert_eq!(&buf[8..16], &3u64.to_le_bytes());
        assert_eq!(&buf[16..24], &1.0f64.to_le_bytes());
        assert_eq!(Matrix::read_from(&mut buf.as_slice()).unwrap(), m);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn inverse_is_two_sided(n in 1usize..=50, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = well_conditioned(n, &mut rng);
                let inv = invert(&a).unwrap();
                let err = a.matmul(&inv).unwrap().max_abs_diff(&Matrix::identity(n)).unwrap();
                prop_assert!(err < 1e-8);
            }

            #[test]
            fn log_det_is_multiplicative(n in 1usize..=12, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = well_conditioned(n, &mut rng);
                let b = well_conditioned(n, &mut rng);
                let (la, sa) = log_det(&a).unwrap();
                let (lb, sb) = log_det(&b).unwrap();
                let (lab, sab) = log_det(&a.matmul(&b).unwrap()).unwrap();
                prop_assert!((lab - la - lb).abs() < 1e-8);
                prop_assert_eq!(sab, sa * sb);
            }

            #[test]
            fn serialization_round_trips(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random(rows, cols, &mut rng);
                let mut buf = Vec::new();
                m.write_to(&mut buf).unwrap();
                prop_assert_eq!(Matrix::read_from(&mut buf.as_slice()).unwrap(), m);
            }
        }
    }
}
