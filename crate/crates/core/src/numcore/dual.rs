//! Forward-mode scalars carrying first and second derivatives along `N`
//! seed directions.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::tensor::{sigmoid, softplus};

/// Real-like scalar accepted by the analytic systems, parsed expressions and
/// the scalar MLP forward pass.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(v: f64) -> Self;
    fn value(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn sinh(self) -> Self;
    fn cosh(self) -> Self;
    fn softplus(self) -> Self;
    fn powi(self, k: i32) -> Self;

    fn scale(self, c: f64) -> Self {
        self * Self::constant(c)
    }
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sinh(self) -> Self {
        f64::sinh(self)
    }
    fn cosh(self) -> Self {
        f64::cosh(self)
    }
    fn softplus(self) -> Self {
        softplus(self)
    }
    fn powi(self, k: i32) -> Self {
        f64::powi(self, k)
    }
}

/// Value with gradient and (symmetric) Hessian along `N` seed directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual2<const N: usize> {
    pub value: f64,
    pub first: [f64; N],
    pub second: [[f64; N]; N],
}

impl<const N: usize> Dual2<N> {
    pub fn constant(value: f64) -> Self {
        Dual2 {
            value,
            first: [0.0; N],
            second: [[0.0; N]; N],
        }
    }

    /// Variable whose first derivative along direction `d` is `seed[d]`.
    pub fn seeded(value: f64, seed: [f64; N]) -> Self {
        Dual2 {
            value,
            first: seed,
            second: [[0.0; N]; N],
        }
    }

    /// Variable aligned with seed direction `dir`.
    pub fn variable(value: f64, dir: usize) -> Self {
        let mut seed = [0.0; N];
        seed[dir] = 1.0;
        Dual2::seeded(value, seed)
    }

    /// Applies a scalar function given its value and first two derivatives
    /// at `self.value`.
    #[inline]
    fn chain(self, f0: f64, f1: f64, f2: f64) -> Self {
        let mut out = Dual2::constant(f0);
        for i in 0..N {
            out.first[i] = f1 * self.first[i];
            for j in 0..N {
                out.second[i][j] = f2 * self.first[i] * self.first[j] + f1 * self.second[i][j];
            }
        }
        out
    }

    pub fn recip(self) -> Self {
        let v = self.value;
        self.chain(1.0 / v, -1.0 / (v * v), 2.0 / (v * v * v))
    }

    /// `self^other`, valid for positive base.
    pub fn pow(self, other: Self) -> Self {
        (other * self.ln()).exp()
    }
}

impl<const N: usize> Add for Dual2<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: Self) -> Self {
        self.value += o.value;
        for i in 0..N {
            self.first[i] += o.first[i];
            for j in 0..N {
                self.second[i][j] += o.second[i][j];
            }
        }
        self
    }
}

impl<const N: usize> Sub for Dual2<N> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl<const N: usize> Neg for Dual2<N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.value = -self.value;
        for i in 0..N {
            self.first[i] = -self.first[i];
            for j in 0..N {
                self.second[i][j] = -self.second[i][j];
            }
        }
        self
    }
}

impl<const N: usize> Mul for Dual2<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut out = Dual2::constant(self.value * o.value);
        for i in 0..N {
            out.first[i] = self.first[i] * o.value + self.value * o.first[i];
            for j in 0..N {
                out.second[i][j] = self.second[i][j] * o.value
                    + self.value * o.second[i][j]
                    + self.first[i] * o.first[j]
                    + self.first[j] * o.first[i];
            }
        }
        out
    }
}

impl<const N: usize> Div for Dual2<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        self * o.recip()
    }
}

impl<const N: usize> Scalar for Dual2<N> {
    fn constant(v: f64) -> Self {
        Dual2::constant(v)
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn sin(self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.chain(s, c, -s)
    }
    fn cos(self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.chain(c, -s, -c)
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, e)
    }
    fn ln(self) -> Self {
        let v = self.value;
        self.chain(v.ln(), 1.0 / v, -1.0 / (v * v))
    }
    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.value))
    }
    fn sinh(self) -> Self {
        let (s, c) = (self.value.sinh(), self.value.cosh());
        self.chain(s, c, s)
    }
    fn cosh(self) -> Self {
        let (s, c) = (self.value.sinh(), self.value.cosh());
        self.chain(c, s, c)
    }
    fn softplus(self) -> Self {
        let s = sigmoid(self.value);
        self.chain(softplus(self.value), s, s * (1.0 - s))
    }
    fn powi(self, k: i32) -> Self {
        let v = self.value;
        let kf = k as f64;
        let d1 = if k == 0 { 0.0 } else { kf * v.powi(k - 1) };
        let d2 = if k == 0 || k == 1 { 0.0 } else { kf * (kf - 1.0) * v.powi(k - 2) };
        self.chain(v.powi(k), d1, d2)
    }
}
