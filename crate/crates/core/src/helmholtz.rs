//! Helmholtz conditions as a differentiable loss.
//!
//! For `ẍ = f(t, x, ẋ)` and a symmetric multiplier `g(t, x, ẋ)`:
//!
//! - `Φ  = ½ d/dt(∂f/∂ẋ) − ∂f/∂x − (½ ∂f/∂ẋ)²`
//! - `R1 = gΦ − (gΦ)ᵀ`
//! - `R2 = dg/dt + ½ (∂f/∂ẋ)ᵀ g + ½ g ∂f/∂ẋ`
//! - `R3[i][j][k] = ∂g_ij/∂ẋ_k − ∂g_ik/∂ẋ_j`
//!
//! The ODE is an Euler-Lagrange equation iff a non-singular `g` makes all
//! three vanish. The loss divides every residual entry by the smallest
//! absolute eigenvalue of `g` (clamped at [`LAMBDA_CLAMP`]) before squaring,
//! so shrinking `g` towards singularity does not help.
//!
//! The batched functions work on `n × n` matrices stored entry by entry as
//! `[B, 1]` columns and run on any [`TensorLike`] backend.

use crate::error::Result;
use crate::evalstats::smooth_curve;
use crate::numcore::{
    jacobians_of_f, metric_partials, Acceleration, FPartials, GPartials, Mat, MetricField, Tensor, Tensor3,
    TensorLike,
};

pub const LAMBDA_CLAMP: f64 = 1e-6;
/// Smoothing constant used by [`lagrangianity_report`].
pub const REPORT_EMA_ALPHA: f64 = 0.02;

/// Batched partials of `f`, each entry a `[B, 1]` column.
#[derive(Debug, Clone)]
pub struct BatchF<T> {
    pub n: usize,
    pub dfdx: Vec<T>,
    pub dfdv: Vec<T>,
    pub ddt_dfdv: Vec<T>,
}

/// Batched metric field and its derivatives, each entry a `[B, 1]` column.
#[derive(Debug, Clone)]
pub struct BatchG<T> {
    pub n: usize,
    /// Full `n × n`, row-major; mirrored entries are the same value.
    pub g: Vec<T>,
    pub dgdt: Vec<T>,
    /// `dgdv[k][i * n + j] = ∂g_ij/∂ẋ_k`
    pub dgdv: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct BatchResiduals<T> {
    pub n: usize,
    pub r1: Vec<T>,
    pub r2: Vec<T>,
    /// `r3[(i * n + j) * n + k]`
    pub r3: Vec<T>,
    pub lambda_min: T,
}

impl<T: TensorLike> BatchF<T> {
    pub fn from_partials(parts: &[&FPartials], lift: impl Fn(Tensor) -> T) -> Self {
        let n = parts[0].dfdx.n();
        let column = |m: &dyn Fn(&FPartials) -> &Mat, i: usize, j: usize| {
            lift(Tensor::column(parts.iter().map(|p| m(p).get(i, j)).collect()))
        };
        let mut dfdx = Vec::with_capacity(n * n);
        let mut dfdv = Vec::with_capacity(n * n);
        let mut ddt = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                dfdx.push(column(&|p| &p.dfdx, i, j));
                dfdv.push(column(&|p| &p.dfdv, i, j));
                ddt.push(column(&|p| &p.ddt_dfdv, i, j));
            }
        }
        BatchF {
            n,
            dfdx,
            dfdv,
            ddt_dfdv: ddt,
        }
    }
}

impl<T: TensorLike> BatchG<T> {
    pub fn from_partials(parts: &[&GPartials], lift: impl Fn(Tensor) -> T) -> Self {
        let n = parts[0].g.n();
        let col = |f: &dyn Fn(&GPartials) -> f64| lift(Tensor::column(parts.iter().map(|p| f(p)).collect()));
        let mut g = Vec::with_capacity(n * n);
        let mut dgdt = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                g.push(col(&|p| p.g.get(i, j)));
                dgdt.push(col(&|p| p.dgdt.get(i, j)));
            }
        }
        let dgdv = (0..n)
            .map(|k| {
                (0..n * n)
                    .map(|ij| col(&|p| p.dgdv.get(ij / n, ij % n, k)))
                    .collect()
            })
            .collect();
        BatchG { n, g, dgdt, dgdv }
    }

    /// Upper triangle in row-major order.
    pub fn packed(&self) -> Vec<T> {
        let n = self.n;
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                out.push(self.g[i * n + j].clone());
            }
        }
        out
    }
}

fn matmul<T: TensorLike>(a: &[T], b: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = a[i * n].mul(&b[j]);
            for k in 1..n {
                acc = acc.add(&a[i * n + k].mul(&b[k * n + j]));
            }
            out.push(acc);
        }
    }
    out
}

fn transpose<T: Clone>(a: &[T], n: usize) -> Vec<T> {
    (0..n * n).map(|ij| a[(ij % n) * n + ij / n].clone()).collect()
}

/// `Φ` for a batch.
pub fn phi_batch<T: TensorLike>(f: &BatchF<T>) -> Vec<T> {
    let n = f.n;
    let b2 = matmul(&f.dfdv, &f.dfdv, n);
    (0..n * n)
        .map(|ij| {
            f.ddt_dfdv[ij]
                .scale(0.5)
                .sub(&f.dfdx[ij])
                .sub(&b2[ij].scale(0.25))
        })
        .collect()
}

pub fn residuals_batch<T: TensorLike>(g: &BatchG<T>, f: &BatchF<T>) -> BatchResiduals<T> {
    let n = g.n;
    let phi = phi_batch(f);
    let gphi = matmul(&g.g, &phi, n);
    let gphi_t = transpose(&gphi, n);
    let r1 = gphi.iter().zip(&gphi_t).map(|(a, b)| a.sub(b)).collect();

    let bt_g = matmul(&transpose(&f.dfdv, n), &g.g, n);
    let g_b = matmul(&g.g, &f.dfdv, n);
    let r2 = (0..n * n)
        .map(|ij| g.dgdt[ij].add(&bt_g[ij].add(&g_b[ij]).scale(0.5)))
        .collect();

    let mut r3 = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                r3.push(g.dgdv[k][i * n + j].sub(&g.dgdv[j][i * n + k]));
            }
        }
    }
    let lambda_min = T::smallest_abs_eig(&g.packed(), n);
    BatchResiduals {
        n,
        r1,
        r2,
        r3,
        lambda_min,
    }
}

fn sum_squares<T: TensorLike>(entries: &[T]) -> T {
    let mut acc = entries[0].square();
    for e in &entries[1..] {
        acc = acc.add(&e.square());
    }
    acc
}

/// Normalized per-sample loss, `[B, 1]`.
pub fn per_sample_loss<T: TensorLike>(res: &BatchResiduals<T>) -> T {
    let n = res.n as f64;
    let raw = sum_squares(&res.r1)
        .scale(1.0 / (n * n))
        .add(&sum_squares(&res.r2).scale(1.0 / (n * n)))
        .add(&sum_squares(&res.r3).scale(1.0 / (n * n * n)));
    let lam = res.lambda_min.clamp_min(LAMBDA_CLAMP);
    raw.div(&lam.square())
}

/// `L_H` of a batch as a `[1, 1]` value.
pub fn loss_batch<T: TensorLike>(res: &BatchResiduals<T>) -> T {
    per_sample_loss(res).mean()
}

/// Residuals at a single point.
#[derive(Debug, Clone, PartialEq)]
pub struct HelmholtzResiduals {
    pub r1: Mat,
    pub r2: Mat,
    pub r3: Tensor3,
    pub lambda_min: f64,
    /// Whether the entries were already divided by the clamped `λ_min`.
    pub normalized: bool,
}

impl HelmholtzResiduals {
    pub fn max_abs(&self) -> f64 {
        self.r1.max_abs().max(self.r2.max_abs()).max(self.r3.max_abs())
    }

    pub fn normalized(&self) -> HelmholtzResiduals {
        if self.normalized {
            return self.clone();
        }
        let s = 1.0 / self.lambda_min.max(LAMBDA_CLAMP);
        let n = self.r1.n();
        let mut r3 = Tensor3::zeros(n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    r3.set(i, j, k, self.r3.get(i, j, k) * s);
                }
            }
        }
        HelmholtzResiduals {
            r1: self.r1.scale(s),
            r2: self.r2.scale(s),
            r3,
            lambda_min: self.lambda_min,
            normalized: true,
        }
    }
}

fn to_mat(cols: &[Tensor], n: usize) -> Mat {
    Mat::from_vec(n, cols.iter().map(Tensor::item).collect())
}

pub fn phi(fp: &FPartials) -> Mat {
    let n = fp.dfdx.n();
    to_mat(&phi_batch(&BatchF::from_partials(&[fp], |t| t)), n)
}

pub fn residuals(gp: &GPartials, fp: &FPartials) -> HelmholtzResiduals {
    let n = gp.g.n();
    let g = BatchG::from_partials(&[gp], |t| t);
    let f = BatchF::from_partials(&[fp], |t| t);
    let res = residuals_batch(&g, &f);
    let mut r3 = Tensor3::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                r3.set(i, j, k, res.r3[(i * n + j) * n + k].item());
            }
        }
    }
    HelmholtzResiduals {
        r1: to_mat(&res.r1, n),
        r2: to_mat(&res.r2, n),
        r3,
        lambda_min: res.lambda_min.item(),
        normalized: false,
    }
}

/// Residuals of an analytic metric field against an analytic system.
pub fn residuals_at<G: MetricField, A: Acceleration>(
    g: &G,
    f: &A,
    t: f64,
    x: &[f64],
    v: &[f64],
) -> Result<HelmholtzResiduals> {
    let fp = jacobians_of_f(f, t, x, v)?;
    let gp = metric_partials(g, t, x, v, &fp.f)?;
    Ok(residuals(&gp, &fp))
}

/// Mean over samples of the normalized per-sample loss.
pub fn helmholtz_loss(res: &[HelmholtzResiduals]) -> f64 {
    assert!(!res.is_empty(), "helmholtz_loss of an empty batch");
    let total: f64 = res
        .iter()
        .map(|r| {
            let n = r.r1.n() as f64;
            let sq = |d: &[f64]| d.iter().map(|v| v * v).sum::<f64>();
            let raw = sq(r.r1.data()) / (n * n) + sq(r.r2.data()) / (n * n) + sq(r.r3.data()) / (n * n * n);
            if r.normalized {
                raw
            } else {
                raw / r.lambda_min.max(LAMBDA_CLAMP).powi(2)
            }
        })
        .sum();
    total / res.len() as f64
}

/// Ratio of the smoothed first to the smoothed last loss value.
pub fn lagrangianity_report(history: &[f64]) -> f64 {
    assert!(history.len() >= 2, "need at least two loss values");
    let s = smooth_curve(history, REPORT_EMA_ALPHA);
    s[0] / s[s.len() - 1]
}
