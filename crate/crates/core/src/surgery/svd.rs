//! Truncated SVD via cyclic Jacobi on the smaller Gram matrix, in f64.

use crate::error::{Error, Result};

/// Dense row-major f64 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("Matrix::from_vec", &[rows, cols], &[data.len()]));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.at(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul extents");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.at(k, j);
                }
            }
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "sub extents");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.at(i, j)).collect()
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (unsorted, diagonal order) and eigenvectors as columns.
pub fn jacobi_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if a.rows != a.cols {
        return Err(Error::dim("jacobi_eigen", &[a.rows, a.cols], &[a.cols, a.rows]));
    }
    let n = a.rows;
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let total: f64 = m.data.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return Ok((vec![0.0; n], v));
    }
    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.at(i, j).powi(2))
            .sum();
        if off <= 1e-30 * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J, V ← V J
                for k in 0..n {
                    let (akp, akq) = (m.at(k, p), m.at(k, q));
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (m.at(p, k), m.at(q, k));
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.at(k, p), v.at(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    Ok(((0..n).map(|i| m.at(i, i)).collect(), v))
}

/// Top-`r` singular triplets of `M ≈ U diag(s) Vᵀ`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `[m × r]`, orthonormal columns.
    pub u: Matrix,
    /// Descending, non-negative.
    pub s: Vec<f64>,
    /// `[n × r]`, orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows {
            for j in 0..us.cols {
                us.data[i * us.cols + j] *= self.s[j];
            }
        }
        us.matmul(&self.v.transpose())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fills columns `from..` of `basis` with unit vectors orthogonal to all earlier columns.
fn complete_orthonormal(basis: &mut Matrix, from: usize) {
    let n = basis.rows;
    let mut candidate = 0;
    for j in from..basis.cols {
        loop {
            assert!(candidate < n, "cannot complete basis: more columns than rows");
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for k in 0..j {
                    let col = basis.column(k);
                    let proj = dot(&e, &col);
                    for (x, c) in e.iter_mut().zip(&col) {
                        *x -= proj * c;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                for (i, x) in e.iter().enumerate() {
                    basis.set(i, j, x / norm);
                }
                break;
            }
        }
    }
}

/// Truncated SVD. The eigendecomposition runs on `MᵀM` when `n ≤ m` and on
/// `MMᵀ` otherwise; the other factor is recovered by projection. Each `v`
/// column is sign-canonicalized so its first non-negligible entry is positive.
pub fn truncated_svd(m: &Matrix, r: usize) -> Result<Svd> {
    let (rows, cols) = (m.rows, m.cols);
    if r == 0 || r > rows.min(cols) {
        return Err(Error::Config(format!(
            "rank {r} out of range for a {rows}x{cols} matrix"
        )));
    }
    let mt = m.transpose();
    let tall = cols <= rows;
    let gram = if tall { mt.matmul(m) } else { m.matmul(&mt) };
    let (vals, vecs) = jacobi_eigen(&gram)?;

    let mut order: Vec<usize> = (0..vals.len()).collect();
    // Stable sort keeps the original eigen index order among ties.
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(r);

    let s: Vec<f64> = order.iter().map(|&i| vals[i].max(0.0).sqrt()).collect();
    let (small_dim, big_dim) = if tall { (cols, rows) } else { (rows, cols) };
    let mut near = Matrix::zeros(small_dim, r);
    for (j, &i) in order.iter().enumerate() {
        for k in 0..small_dim {
            near.set(k, j, vecs.at(k, i));
        }
    }
    // far = (M or Mᵀ) · near / s
    let proj = if tall { m.matmul(&near) } else { mt.matmul(&near) };
    let mut far = Matrix::zeros(big_dim, r);
    let s_max = s.first().copied().unwrap_or(0.0);
    let tol = s_max * 1e-12 * (rows.max(cols) as f64);
    let mut rank = r;
    for j in 0..r {
        if s[j] <= tol || s[j] == 0.0 {
            rank = j;
            break;
        }
        for k in 0..big_dim {
            far.set(k, j, proj.at(k, j) / s[j]);
        }
    }
    let mut s = s;
    for x in s.iter_mut().skip(rank) {
        *x = 0.0;
    }
    complete_orthonormal(&mut far, rank);

    let (mut u, mut v) = if tall { (far, near) } else { (near, far) };
    for j in 0..r {
        let first = (0..v.rows).map(|k| v.at(k, j)).find(|x| x.abs() > 1e-12);
        if first.is_some_and(|x| x < 0.0) {
            for k in 0..v.rows {
                v.set(k, j, -v.at(k, j));
            }
            for k in 0..u.rows {
                u.set(k, j, -u.at(k, j));
            }
        }
    }
    Ok(Svd { u, s, v })
}
