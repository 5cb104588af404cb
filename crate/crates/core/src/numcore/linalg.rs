//! Dense small matrices and symmetric eigenvalues.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square `n × n` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    n: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(n: usize) -> Self {
        Mat {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Mat::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let n = rows.len();
        let mut m = Mat::zeros(n);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), n, "Mat::from_rows needs a square matrix");
            m.data[i * n..(i + 1) * n].copy_from_slice(r);
        }
        m
    }

    pub fn from_vec(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n);
        Mat { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = Mat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                for j in 0..n {
                    out.data[i * n + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j) * v[j]).sum())
            .collect()
    }

    pub fn add(&self, other: &Mat) -> Mat {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Mat {
        Mat {
            n: self.n,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.n, other.n);
        Mat {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_dot(&self, other: &Mat) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// `n × n × n` array, index order `[i][j][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    n: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize) -> Self {
        Tensor3 {
            n,
            data: vec![0.0; n * n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.n + j) * self.n + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.n + j) * self.n + k] = v;
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
/// Two eigenvalues closer than this in magnitude count as a crossing.
pub const CROSSING_TOL: f64 = 1e-10;

/// Eigen-decomposition of a symmetric matrix: eigenvalues and the matching
/// unit eigenvectors (as rows of the returned list). Uses the closed form
/// for `n ≤ 2` and cyclic Jacobi rotations otherwise.
pub fn sym_eigen(m: &Mat) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if !m.is_symmetric() {
        return Err(Error::NotSymmetric);
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("symmetric eigenproblem input".into()));
    }
    Ok(sym_eigen_unchecked(m))
}

fn sym_eigen_unchecked(m: &Mat) -> (Vec<f64>, Vec<Vec<f64>>) {
    match m.n() {
        0 => (vec![], vec![]),
        1 => (vec![m.get(0, 0)], vec![vec![1.0]]),
        2 => eigen2(m.get(0, 0), m.get(0, 1), m.get(1, 1)),
        _ => jacobi(m),
    }
}

fn eigen2(a: f64, b: f64, c: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mean = 0.5 * (a + c);
    let half = 0.5 * (a - c);
    let d = half.hypot(b);
    let l1 = mean - d;
    let l2 = mean + d;
    if b == 0.0 {
        // Already diagonal; keep axis order so that ties resolve to index 0.
        return (vec![a, c], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }
    let vec_for = |l: f64| {
        let u = [b, l - a];
        let w = [l - c, b];
        let (x, y) = if u[0].hypot(u[1]) >= w[0].hypot(w[1]) {
            (u[0], u[1])
        } else {
            (w[0], w[1])
        };
        let norm = x.hypot(y);
        vec![x / norm, y / norm]
    };
    (vec![l1, l2], vec![vec_for(l1), vec_for(l2)])
}

fn jacobi(m: &Mat) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = m.n();
    let mut a = m.clone();
    let mut v = Mat::identity(n);
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let values = (0..n).map(|i| a.get(i, i)).collect();
    let vectors = (0..n).map(|j| (0..n).map(|i| v.get(i, j)).collect()).collect();
    (values, vectors)
}

/// Smallest absolute eigenvalue of a symmetric matrix, which for symmetric
/// input equals `inf_{‖u‖≤1} ‖m u‖`.
pub fn smallest_abs_eigenvalue(m: &Mat) -> Result<f64> {
    let (values, _) = sym_eigen(m)?;
    Ok(values.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs())))
}

/// Signed eigenvalue of smallest magnitude and its unit eigenvector.
///
/// The input must be symmetric; this is not checked. At magnitude ties
/// (within [`CROSSING_TOL`]) the first eigenvalue in solver order wins.
pub fn sym_smallest_abs_eigenpair(m: &Mat) -> (f64, Vec<f64>) {
    let (values, vectors) = sym_eigen_unchecked(m);
    let mut best = 0;
    for i in 1..values.len() {
        if values[i].abs() < values[best].abs() - CROSSING_TOL {
            best = i;
        }
    }
    (values[best], vectors[best].clone())
}
