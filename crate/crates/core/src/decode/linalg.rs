//! Dense kernels that count every scalar multiplication, addition
//! (subtractions included) and division they perform. Square roots are
//! counted as divisions.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub mult: u64,
    pub add: u64,
    pub div: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.mult + self.add + self.div
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, o: Self) {
        self.mult += o.mult;
        self.add += o.add;
        self.div += o.div;
    }
}

impl std::ops::Add for OpCounts {
    type Output = OpCounts;
    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

pub fn matmul(a: &DMatrix<f64>, b: &DMatrix<f64>, ops: &mut OpCounts) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.nrows(), "matmul shapes");
    let (m, n, p) = (a.nrows(), a.ncols(), b.ncols());
    let mut c = DMatrix::zeros(m, p);
    for i in 0..m {
        for j in 0..p {
            let mut s = a[(i, 0)] * b[(0, j)];
            for k in 1..n {
                s += a[(i, k)] * b[(k, j)];
            }
            c[(i, j)] = s;
        }
    }
    ops.mult += (m * n * p) as u64;
    ops.add += (m * (n - 1) * p) as u64;
    c
}

pub fn matvec(a: &DMatrix<f64>, x: &DVector<f64>, ops: &mut OpCounts) -> DVector<f64> {
    assert_eq!(a.ncols(), x.len(), "matvec shapes");
    let (m, n) = (a.nrows(), a.ncols());
    let y = DVector::from_fn(m, |i, _| {
        let mut s = a[(i, 0)] * x[0];
        for k in 1..n {
            s += a[(i, k)] * x[k];
        }
        s
    });
    ops.mult += (m * n) as u64;
    ops.add += (m * (n - 1)) as u64;
    y
}

pub fn add_mat(a: &DMatrix<f64>, b: &DMatrix<f64>, ops: &mut OpCounts) -> DMatrix<f64> {
    ops.add += a.len() as u64;
    a + b
}

pub fn sub_mat(a: &DMatrix<f64>, b: &DMatrix<f64>, ops: &mut OpCounts) -> DMatrix<f64> {
    ops.add += a.len() as u64;
    a - b
}

pub fn add_vec(a: &DVector<f64>, b: &DVector<f64>, ops: &mut OpCounts) -> DVector<f64> {
    ops.add += a.len() as u64;
    a + b
}

pub fn sub_vec(a: &DVector<f64>, b: &DVector<f64>, ops: &mut OpCounts) -> DVector<f64> {
    ops.add += a.len() as u64;
    a - b
}

/// `I - m` for square `m`; only the diagonal costs a subtraction, but the
/// whole matrix is counted as one elementwise pass.
pub fn identity_minus(m: &DMatrix<f64>, ops: &mut OpCounts) -> DMatrix<f64> {
    let n = m.nrows();
    sub_mat(&DMatrix::identity(n, n), m, ops)
}

/// Averages mirrored off-diagonal pairs in place.
pub fn symmetrize(p: &mut DMatrix<f64>, ops: &mut OpCounts) {
    let n = p.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = (p[(i, j)] + p[(j, i)]) * 0.5;
            p[(i, j)] = v;
            p[(j, i)] = v;
            ops.add += 1;
            ops.mult += 1;
        }
    }
}

/// Closed-form inverse of a 2×2 matrix: the determinant costs two
/// multiplications and a subtraction, each entry of the adjugate one
/// division by it.
pub fn inverse_2x2(m: &DMatrix<f64>, ops: &mut OpCounts) -> Option<DMatrix<f64>> {
    assert_eq!(m.shape(), (2, 2));
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    ops.mult += 2;
    ops.add += 1;
    if !det.is_finite() || det.abs() <= f64::EPSILON * m.amax().powi(2) {
        return None;
    }
    ops.div += 4;
    Some(DMatrix::from_row_slice(
        2,
        2,
        &[m[(1, 1)] / det, -m[(0, 1)] / det, -m[(1, 0)] / det, m[(0, 0)] / det],
    ))
}

/// Closed-form inverse of a 3×3 matrix via the adjugate.
pub fn inverse_3x3(m: &DMatrix<f64>, ops: &mut OpCounts) -> Option<DMatrix<f64>> {
    assert_eq!(m.shape(), (3, 3));
    let c = |i: usize, j: usize| {
        let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
        let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
        m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)]
    };
    let cof = DMatrix::from_fn(3, 3, c);
    ops.mult += 18;
    ops.add += 9;
    let det = m[(0, 0)] * cof[(0, 0)] + m[(0, 1)] * cof[(0, 1)] + m[(0, 2)] * cof[(0, 2)];
    ops.mult += 3;
    ops.add += 2;
    if !det.is_finite() || det.abs() <= f64::EPSILON * m.amax().powi(3) {
        return None;
    }
    ops.div += 9;
    Some(DMatrix::from_fn(3, 3, |i, j| cof[(j, i)] / det))
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(s: &DMatrix<f64>, ops: &mut OpCounts) -> Option<DMatrix<f64>> {
    let n = s.nrows();
    assert_eq!(n, s.ncols());
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        ops.mult += j as u64;
        ops.add += j as u64;
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        ops.div += 1;
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut v = s[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
            ops.mult += j as u64;
            ops.add += j as u64;
            ops.div += 1;
        }
    }
    Some(l)
}

/// Solves `S X = B` by forward and back substitution on the Cholesky factor.
pub fn spd_solve(s: &DMatrix<f64>, b: &DMatrix<f64>, ops: &mut OpCounts) -> Option<DMatrix<f64>> {
    let l = cholesky(s, ops)?;
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut v = x[(i, c)];
            for k in 0..i {
                v -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = v / l[(i, i)];
            ops.mult += i as u64;
            ops.add += i as u64;
            ops.div += 1;
        }
        for i in (0..n).rev() {
            let mut v = x[(i, c)];
            for k in i + 1..n {
                v -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = v / l[(i, i)];
            ops.mult += (n - 1 - i) as u64;
            ops.add += (n - 1 - i) as u64;
            ops.div += 1;
        }
    }
    Some(x)
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky
/// factor `L`: `S^-1 = L^-T L^-1`. Returns `None` if `s` is not positive
/// definite.
pub fn spd_inverse(s: &DMatrix<f64>, ops: &mut OpCounts) -> Option<DMatrix<f64>> {
    let n = s.nrows();
    let l = cholesky(s, ops)?;
    // M = L^-1 by forward substitution, one reciprocal per row.
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let r = 1.0 / l[(i, i)];
        ops.div += 1;
        m[(i, i)] = r;
        for j in 0..i {
            let mut acc = l[(i, j)] * m[(j, j)];
            for k in j + 1..i {
                acc += l[(i, k)] * m[(k, j)];
            }
            ops.mult += (i - j) as u64;
            ops.add += (i - j - 1) as u64;
            m[(i, j)] = -acc * r;
            ops.mult += 1;
        }
    }
    // S^-1 = M^T M, upper triangle computed and mirrored.
    let mut inv = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = m[(j, i)] * m[(j, j)];
            for k in j + 1..n {
                acc += m[(k, i)] * m[(k, j)];
            }
            ops.mult += (n - j) as u64;
            ops.add += (n - j - 1) as u64;
            inv[(i, j)] = acc;
            inv[(j, i)] = acc;
        }
    }
    Some(inv)
}

/// Inverse for the small state-space matrices: closed form up to 3×3,
/// Cholesky otherwise.
pub fn small_inverse(m: &DMatrix<f64>, ops: &mut OpCounts) -> Option<DMatrix<f64>> {
    match m.nrows() {
        1 => {
            ops.div += 1;
            (m[(0, 0)] != 0.0 && m[(0, 0)].is_finite()).then(|| DMatrix::from_element(1, 1, 1.0 / m[(0, 0)]))
        }
        2 => inverse_2x2(m, ops),
        3 => inverse_3x3(m, ops),
        _ => spd_inverse(m, ops),
    }
}
