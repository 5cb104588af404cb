//! Row-major 2-D arrays and the operation set shared by plain evaluation and
//! the reverse-mode tape.
//!
//! Batched quantities use rows for samples and columns for features. Small
//! per-sample matrices (g, Φ, ...) are carried entry by entry as `[B, 1]`
//! columns, so the same arithmetic works for a single sample or a batch.

use std::fmt;

use super::linalg::{sym_smallest_abs_eigenpair, Mat};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]{:?}", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length does not match shape");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(1, 1, vec![value])
    }

    pub fn column(values: Vec<f64>) -> Self {
        let rows = values.len();
        Tensor::new(rows, 1, values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Only valid for `[1, 1]` tensors.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| {
            if v.is_nan() {
                f64::NAN
            } else {
                m.max(v.abs())
            }
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · otherᵀ` for `self: [m, k]`, `other: [n, k]`.
    pub fn matmul_t(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            let o = &mut out[i * n..(i + 1) * n];
            for (j, oj) in o.iter_mut().enumerate() {
                let b = &other.data[j * k..(j + 1) * k];
                *oj = dot(a, b);
            }
        }
        Tensor::new(m, n, out)
    }

    /// `self · other` for `self: [m, k]`, `other: [k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let o = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[p * n..(p + 1) * n];
                for (oj, bj) in o.iter_mut().zip(b) {
                    *oj += a * bj;
                }
            }
        }
        Tensor::new(m, n, out)
    }

    /// `selfᵀ · other` for `self: [k, m]`, `other: [k, n]`.
    pub fn t_matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a = &self.data[p * m..(p + 1) * m];
            let b = &other.data[p * n..(p + 1) * n];
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let o = &mut out[i * n..(i + 1) * n];
                for (oj, bj) in o.iter_mut().zip(b) {
                    *oj += ai * bj;
                }
            }
        }
        Tensor::new(m, n, out)
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn col_tensor(&self, j: usize) -> Tensor {
        assert!(j < self.cols, "column index out of range");
        Tensor::column((0..self.rows).map(|r| self.get(r, j)).collect())
    }

    pub fn hcat_tensors(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "hcat of nothing");
        let rows = parts[0].rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                assert_eq!(p.rows, rows, "hcat row mismatch");
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor::new(rows, cols, data)
    }

    /// Sums a broadcast gradient back down to `shape`.
    pub fn reduce_to(&self, shape: (usize, usize)) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let (r, c) = shape;
        assert!(
            (r == self.rows || r == 1) && (c == self.cols || c == 1),
            "cannot reduce {:?} to {:?}",
            self.shape(),
            shape
        );
        let mut out = Tensor::zeros(r, c);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let oi = if r == 1 { 0 } else { i };
                let oj = if c == 1 { 0 } else { j };
                out.data[oi * c + oj] += self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible broadcast shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

pub(crate) fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = broadcast_shape(a.shape(), b.shape());
    if a.shape() == b.shape() {
        return Tensor::new(r, c, a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect());
    }
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let ai = if a.rows == 1 { 0 } else { i };
        let bi = if b.rows == 1 { 0 } else { i };
        for j in 0..c {
            let aj = if a.cols == 1 { 0 } else { j };
            let bj = if b.cols == 1 { 0 } else { j };
            data.push(f(a.data[ai * a.cols + aj], b.data[bi * b.cols + bj]));
        }
    }
    Tensor::new(r, c, data)
}

/// Smooth elementwise functions known to both backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Softplus,
    Sigmoid,
    Sinh,
    Cosh,
    Exp,
    Square,
}

impl Unary {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Sinh => x.sinh(),
            Unary::Cosh => x.cosh(),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
        }
    }

    /// Derivative at `x`; `y` is the already computed `apply(x)`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Sinh => x.cosh(),
            Unary::Cosh => x.sinh(),
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Operations available on batched arrays, implemented by [`Tensor`] for
/// plain evaluation and by [`super::Var`] for recorded evaluation.
///
/// Binary arithmetic broadcasts dimensions of size one.
pub trait TensorLike: Clone {
    fn shape(&self) -> (usize, usize);

    /// Snapshot of the current value.
    fn to_tensor(&self) -> Tensor;

    /// Largest absolute entry of the value (NaN if any entry is NaN).
    fn max_abs(&self) -> f64;

    /// Brings a constant into the same evaluation context as `self`.
    fn lift(&self, value: Tensor) -> Self;

    fn add(&self, other: &Self) -> Self;
    fn sub(&self, other: &Self) -> Self;
    fn mul(&self, other: &Self) -> Self;
    fn div(&self, other: &Self) -> Self;
    fn neg(&self) -> Self;
    fn scale(&self, c: f64) -> Self;
    fn offset(&self, c: f64) -> Self;

    /// `self · wᵀ`, with `self: [B, in]` and `w: [out, in]`.
    fn matmul_t(&self, w: &Self) -> Self;

    fn unary(&self, op: Unary) -> Self;

    /// `max(self, lo)` elementwise; the gradient passes where `self > lo`.
    fn clamp_min(&self, lo: f64) -> Self;

    fn col(&self, j: usize) -> Self;
    fn hcat(parts: &[Self]) -> Self;

    /// Sum of all entries as a `[1, 1]` value.
    fn sum(&self) -> Self;

    /// Smallest absolute eigenvalue per row of a batch of symmetric `n × n`
    /// matrices given as `n(n+1)/2` upper-triangle columns (row-major order).
    fn smallest_abs_eig(packed: &[Self], n: usize) -> Self;

    fn mean(&self) -> Self {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c) as f64)
    }

    fn square(&self) -> Self {
        self.unary(Unary::Square)
    }
}

impl TensorLike for Tensor {
    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn to_tensor(&self) -> Tensor {
        self.clone()
    }

    fn max_abs(&self) -> f64 {
        Tensor::max_abs(self)
    }

    fn lift(&self, value: Tensor) -> Self {
        value
    }

    fn add(&self, other: &Self) -> Self {
        broadcast_zip(self, other, |a, b| a + b)
    }

    fn sub(&self, other: &Self) -> Self {
        broadcast_zip(self, other, |a, b| a - b)
    }

    fn mul(&self, other: &Self) -> Self {
        broadcast_zip(self, other, |a, b| a * b)
    }

    fn div(&self, other: &Self) -> Self {
        broadcast_zip(self, other, |a, b| a / b)
    }

    fn neg(&self) -> Self {
        self.map_values(|v| -v)
    }

    fn scale(&self, c: f64) -> Self {
        self.map_values(|v| v * c)
    }

    fn offset(&self, c: f64) -> Self {
        self.map_values(|v| v + c)
    }

    fn matmul_t(&self, w: &Self) -> Self {
        Tensor::matmul_t(self, w)
    }

    fn unary(&self, op: Unary) -> Self {
        self.map_values(|v| op.apply(v))
    }

    fn clamp_min(&self, lo: f64) -> Self {
        self.map_values(|v| v.max(lo))
    }

    fn col(&self, j: usize) -> Self {
        self.col_tensor(j)
    }

    fn hcat(parts: &[Self]) -> Self {
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::hcat_tensors(&refs)
    }

    fn sum(&self) -> Self {
        Tensor::scalar(self.sum_all())
    }

    fn smallest_abs_eig(packed: &[Self], n: usize) -> Self {
        let refs: Vec<&Tensor> = packed.iter().collect();
        let (values, _) = batched_smallest_abs_eig(&refs, n);
        Tensor::column(values)
    }
}

/// Returns per-row `|λ_min|` and the gradient weights `sign(λ) ∂λ/∂packed`.
pub(crate) fn batched_smallest_abs_eig(packed: &[&Tensor], n: usize) -> (Vec<f64>, Vec<f64>) {
    let m = n * (n + 1) / 2;
    assert_eq!(packed.len(), m, "packed symmetric matrix needs n(n+1)/2 columns");
    let rows = packed[0].rows;
    let mut values = Vec::with_capacity(rows);
    let mut weights = Vec::with_capacity(rows * m);
    let mut mat = Mat::zeros(n);
    for r in 0..rows {
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                let v = packed[k].data[r];
                mat.set(i, j, v);
                mat.set(j, i, v);
                k += 1;
            }
        }
        let (lambda, vec) = sym_smallest_abs_eigenpair(&mat);
        values.push(lambda.abs());
        let sign = if lambda < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            for j in i..n {
                let w = if i == j { vec[i] * vec[i] } else { 2.0 * vec[i] * vec[j] };
                weights.push(sign * w);
            }
        }
    }
    (values, weights)
}
