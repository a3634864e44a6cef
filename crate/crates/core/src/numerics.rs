//! Small dense linear algebra over `f64`.
//!
//! Everything downstream works on a handful of tiny matrices (layer weights of
//! a few dozen rows), so a row-major `Vec<f64>` with explicit loops is all we
//! need.

use std::fmt;

use crate::error::{Error, Result};

/// Sphere-membership tolerance for unit-norm checks.
pub const TAU_NORM: f64 = 1e-8;

/// Default step for central finite differences.
pub const FD_STEP: f64 = 1e-5;

pub type Vector = Vec<f64>;

/// Dense row-major matrix with finite entries.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "Matrix::from_rows",
                left: (rows.len(), cols),
                right: (1, bad.len()),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut data = Vec::with_capacity(u.len() * v.len());
        for &a in u {
            data.extend(v.iter().map(|&b| a * b));
        }
        Self {
            rows: u.len(),
            cols: v.len(),
            data,
        }
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::Shape {
                op: "matvec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        Ok(self.mul_vec(v))
    }

    pub(crate) fn mul_vec(&self, v: &[f64]) -> Vector {
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `Mᵀ v`, without forming the transpose.
    pub(crate) fn mul_vec_transposed(&self, v: &[f64]) -> Vector {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += vr * m;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.get(r, c);
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_dot(self).sqrt()
    }

    /// Frobenius inner product `⟨self, other⟩_F`. Shapes must agree.
    pub fn frobenius_dot(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        dot(&self.data, &other.data)
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * c).collect())
    }

    /// Entrywise division; `m.divided(n)` is exactly rounded, unlike `m.scaled(1.0 / n)`.
    pub fn divided(&self, d: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v / d).collect())
    }

    pub fn scale_mut(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "sub",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = self.clone();
        out.axpy(-1.0, other);
        Ok(out)
    }

    /// Euclidean norm of each row.
    pub fn row_norms(&self) -> Vector {
        (0..self.rows).map(|r| norm(self.row(r))).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vector> {
    m.matvec(v)
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.frobenius_norm()
}

/// Component of `direction` orthogonal to the unit-norm `v` in the Frobenius
/// inner product: `direction − ⟨v, direction⟩_F · v`.
pub fn tangent_project(direction: &Matrix, v: &Matrix) -> Result<Matrix> {
    if direction.shape() != v.shape() {
        return Err(Error::Shape {
            op: "tangent_project",
            left: direction.shape(),
            right: v.shape(),
        });
    }
    let n = v.frobenius_norm();
    if (n - 1.0).abs() > TAU_NORM {
        return Err(Error::NotNormalized { norm: n });
    }
    Ok(remove_radial(direction, v))
}

/// Like [`tangent_project`] but for any nonzero `v`: removes the component
/// along `v / ‖v‖`.
pub(crate) fn remove_radial(direction: &Matrix, v: &Matrix) -> Matrix {
    let vv = v.frobenius_dot(v);
    let mut out = direction.clone();
    if vv > 0.0 {
        out.axpy(-direction.frobenius_dot(v) / vv, v);
    }
    out
}

/// Central-difference gradient of a scalar function of a matrix.
pub fn finite_diff_grad<F>(func: F, at: &Matrix, h: f64) -> Matrix
where
    F: Fn(&Matrix) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = at.clone();
    let mut grad = Matrix::zeros(at.rows, at.cols);
    for i in 0..at.data.len() {
        let x0 = at.data[i];
        probe.data[i] = x0 + h;
        let up = func(&probe);
        probe.data[i] = x0 - h;
        let down = func(&probe);
        probe.data[i] = x0;
        grad.data[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &Matrix, b: &[f64]) -> Result<Vector> {
    let n = a.rows;
    if a.cols != n || b.len() != n {
        return Err(Error::Shape {
            op: "solve_linear",
            left: a.shape(),
            right: (b.len(), 1),
        });
    }
    let mut m = a.data.clone();
    let mut x = b.to_vec();
    let scale = m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap_or(col);
        if m[pivot * n + col].abs() <= scale * 1e-14 {
            return Err(Error::Singular);
        }
        if pivot != col {
            for c in 0..n {
                m.swap(pivot * n + c, col * n + c);
            }
            x.swap(pivot, col);
        }
        let p = m[col * n + col];
        for r in col + 1..n {
            let factor = m[r * n + col] / p;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                m[r * n + c] -= factor * m[col * n + c];
            }
            x[r] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        let tail: f64 = (col + 1..n).map(|c| m[col * n + c] * x[c]).sum();
        x[col] = (x[col] - tail) / m[col * n + col];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matvec_examples() {
        assert_eq!(matvec(&Matrix::identity(2), &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
        assert_eq!(
            matvec(&m(&[&[1.0, 2.0], &[0.0, 1.0]]), &[1.0, 1.0]).unwrap(),
            vec![3.0, 1.0]
        );
        assert_eq!(matvec(&Matrix::zeros(3, 2), &[7.0, -2.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn matvec_reports_both_shapes() {
        let err = matvec(&Matrix::zeros(3, 2), &[1.0, 2.0, 3.0]).unwrap_err();
        match err {
            Error::Shape { left, right, .. } => {
                assert_eq!(left, (3, 2));
                assert_eq!(right, (3, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_non_finite_entries() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&Matrix::identity(2)), 2f64.sqrt());
        assert_eq!(frobenius_norm(&m(&[&[3.0, 4.0]])), 5.0);
        assert_eq!(frobenius_norm(&Matrix::zeros(4, 4)), 0.0);
    }

    #[test]
    fn tangent_project_examples() {
        let v = m(&[&[0.6, 0.0], &[0.0, 0.8]]);
        let p = tangent_project(&v, &v).unwrap();
        assert!(p.frobenius_norm() < 1e-15);

        let g = m(&[&[0.8, 5.0], &[-2.0, -0.6]]);
        assert_eq!(g.frobenius_dot(&v), 0.0);
        assert_eq!(tangent_project(&g, &v).unwrap(), g);

        assert!(matches!(tangent_project(&g, &g), Err(Error::NotNormalized { .. })));
    }

    #[test]
    fn finite_diff_linear_and_quadratic() {
        let a = m(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let x = m(&[&[0.3, 0.1], &[-0.7, 2.0]]);
        let g = finite_diff_grad(|z| a.frobenius_dot(z), &x, FD_STEP);
        assert!(g.sub(&a).unwrap().frobenius_norm() < 1e-9);

        let g = finite_diff_grad(|z| z.frobenius_dot(z), &x, FD_STEP);
        assert!(g.sub(&x.scaled(2.0)).unwrap().frobenius_norm() < 1e-9);
    }

    #[test]
    fn solve_small_system() {
        let a = m(&[&[0.0, 2.0], &[3.0, 1.0]]);
        let x = solve_linear(&a, &[4.0, 5.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
        assert!(matches!(
            solve_linear(&m(&[&[1.0, 2.0], &[2.0, 4.0]]), &[1.0, 1.0]),
            Err(Error::Singular)
        ));
    }

    #[test]
    fn matmul_and_transpose_agree() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = a.transpose();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab, m(&[&[14.0, 32.0], &[32.0, 77.0]]));
        assert_eq!(a.mul_vec_transposed(&[1.0, -1.0]), vec![-3.0, -3.0, -3.0]);
    }

    fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn frobenius_is_absolutely_homogeneous(a in matrix_strategy(3, 4), c in -5.0f64..5.0) {
            let lhs = a.scaled(c).frobenius_norm();
            let rhs = c.abs() * a.frobenius_norm();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
        }

        #[test]
        fn tangent_projection_is_orthogonal_and_idempotent(
            g in matrix_strategy(3, 4),
            v in matrix_strategy(3, 4),
        ) {
            let n = v.frobenius_norm();
            prop_assume!(n > 1e-3);
            let v = v.scaled(1.0 / n);
            let once = tangent_project(&g, &v).unwrap();
            let twice = tangent_project(&once, &v).unwrap();
            prop_assert!(once.frobenius_dot(&v).abs() < 1e-12 * (1.0 + g.frobenius_norm()));
            prop_assert!(twice.sub(&once).unwrap().frobenius_norm() < 1e-12 * (1.0 + g.frobenius_norm()));
        }
    }
}
