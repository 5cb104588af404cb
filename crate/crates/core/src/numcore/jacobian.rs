//! Partial derivatives of accelerations and metric fields via [`Dual2`].
//!
//! All second derivatives needed downstream are directional: the total time
//! derivative along a trajectory is the derivative along
//! `w = (∂t, ẋ·∂x, f·∂ẋ)`, so seeding `w` as its own direction gives
//! `d/dt ∂f/∂ẋ` as a single mixed second derivative.

use super::dual::{Dual2, Scalar};
use super::linalg::{Mat, Tensor3};
use crate::error::{Error, Result};

/// A right-hand side `ẍ = f(t, x, ẋ)`.
pub trait Acceleration {
    fn dim(&self) -> usize;

    fn accel<S: Scalar>(&self, t: S, x: &[S], v: &[S]) -> Result<Vec<S>>;
}

/// A symmetric matrix field `g(t, x, ẋ)`, returned row-major (`n × n`).
pub trait MetricField {
    fn dim(&self) -> usize;

    fn metric<S: Scalar>(&self, t: S, x: &[S], v: &[S]) -> Result<Vec<S>>;
}

/// Partials of `f` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct FPartials {
    pub f: Vec<f64>,
    pub dfdt: Vec<f64>,
    /// `[i][k] = ∂f_i/∂x_k`
    pub dfdx: Mat,
    /// `[i][k] = ∂f_i/∂ẋ_k`
    pub dfdv: Mat,
    /// `d/dt (∂f/∂ẋ) = ∂²f/∂t∂ẋ + (∂²f/∂x∂ẋ)·ẋ + (∂²f/∂ẋ∂ẋ)·f`
    pub ddt_dfdv: Mat,
}

/// Partials of a metric field at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct GPartials {
    pub g: Mat,
    /// Total time derivative `∂g/∂t + (∂g/∂x)·ẋ + (∂g/∂ẋ)·f`.
    pub dgdt: Mat,
    /// `[i][j][k] = ∂g_ij/∂ẋ_k`
    pub dgdv: Tensor3,
}

type D3 = Dual2<3>;

fn check_finite(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_dims(n: usize, x: &[f64], v: &[f64]) -> Result<()> {
    if x.len() != n || v.len() != n {
        return Err(Error::shape(format!(
            "state of dimension {n} expected, got x: {}, v: {}",
            x.len(),
            v.len()
        )));
    }
    Ok(())
}

/// All first partials of `f` plus `d/dt ∂f/∂ẋ`, computed in `n + 1`
/// forward passes over three seed directions.
pub fn jacobians_of_f<A: Acceleration>(f: &A, t: f64, x: &[f64], v: &[f64]) -> Result<FPartials> {
    let n = f.dim();
    check_dims(n, x, v)?;
    let f0 = f.accel(t, x, v)?;
    check_finite(f0.iter().copied(), "f")?;

    let mut dfdx = Mat::zeros(n);
    let mut dfdv = Mat::zeros(n);
    let mut ddt = Mat::zeros(n);

    // Pass k: directions (e_{x_k}, e_{ẋ_k}, w).
    for k in 0..n {
        let td = D3::seeded(t, [0.0, 0.0, 1.0]);
        let xd: Vec<D3> = (0..n)
            .map(|j| D3::seeded(x[j], [f64::from(u8::from(j == k)), 0.0, v[j]]))
            .collect();
        let vd: Vec<D3> = (0..n)
            .map(|j| D3::seeded(v[j], [0.0, f64::from(u8::from(j == k)), f0[j]]))
            .collect();
        let out = f.accel(td, &xd, &vd)?;
        for i in 0..n {
            dfdx.set(i, k, out[i].first[0]);
            dfdv.set(i, k, out[i].first[1]);
            ddt.set(i, k, out[i].second[1][2]);
        }
    }

    let td = Dual2::<1>::variable(t, 0);
    let xd: Vec<Dual2<1>> = x.iter().map(|&xi| Dual2::constant(xi)).collect();
    let vd: Vec<Dual2<1>> = v.iter().map(|&vi| Dual2::constant(vi)).collect();
    let dfdt: Vec<f64> = f.accel(td, &xd, &vd)?.iter().map(|d| d.first[0]).collect();

    check_finite(dfdx.data().iter().copied(), "∂f/∂x")?;
    check_finite(dfdv.data().iter().copied(), "∂f/∂ẋ")?;
    check_finite(ddt.data().iter().copied(), "d/dt ∂f/∂ẋ")?;
    check_finite(dfdt.iter().copied(), "∂f/∂t")?;

    Ok(FPartials {
        f: f0,
        dfdt,
        dfdx,
        dfdv,
        ddt_dfdv: ddt,
    })
}

/// Value, total time derivative and velocity gradient of a metric field.
/// `f` is the acceleration used for the total derivative.
pub fn metric_partials<G: MetricField>(g: &G, t: f64, x: &[f64], v: &[f64], f: &[f64]) -> Result<GPartials> {
    let n = g.dim();
    check_dims(n, x, v)?;
    let mut out_g = Mat::zeros(n);
    let mut dgdt = Mat::zeros(n);
    let mut dgdv = Tensor3::zeros(n);

    // Pass k: directions (e_{ẋ_k}, w).
    for k in 0..n {
        let td = Dual2::<2>::seeded(t, [0.0, 1.0]);
        let xd: Vec<Dual2<2>> = (0..n).map(|j| Dual2::seeded(x[j], [0.0, v[j]])).collect();
        let vd: Vec<Dual2<2>> = (0..n)
            .map(|j| Dual2::seeded(v[j], [f64::from(u8::from(j == k)), f[j]]))
            .collect();
        let m = g.metric(td, &xd, &vd)?;
        if m.len() != n * n {
            return Err(Error::shape(format!("metric field returned {} entries, expected {}", m.len(), n * n)));
        }
        for i in 0..n {
            for j in 0..n {
                let e = m[i * n + j];
                out_g.set(i, j, e.value);
                dgdt.set(i, j, e.first[1]);
                dgdv.set(i, j, k, e.first[0]);
            }
        }
    }
    check_finite(out_g.data().iter().copied(), "g")?;
    check_finite(dgdt.data().iter().copied(), "dg/dt")?;
    check_finite(dgdv.data().iter().copied(), "∂g/∂ẋ")?;
    Ok(GPartials { g: out_g, dgdt, dgdv })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear {
        omega2: [f64; 2],
        gamma: [f64; 2],
    }

    impl Acceleration for Linear {
        fn dim(&self) -> usize {
            2
        }
        fn accel<S: Scalar>(&self, _t: S, x: &[S], v: &[S]) -> Result<Vec<S>> {
            Ok((0..2)
                .map(|i| -(x[i].scale(self.omega2[i])) - v[i].scale(self.gamma[i]))
                .collect())
        }
    }

    struct Zero;

    impl Acceleration for Zero {
        fn dim(&self) -> usize {
            2
        }
        fn accel<S: Scalar>(&self, _t: S, _x: &[S], _v: &[S]) -> Result<Vec<S>> {
            Ok(vec![S::constant(0.0); 2])
        }
    }

    struct KeplerUnit;

    impl Acceleration for KeplerUnit {
        fn dim(&self) -> usize {
            2
        }
        fn accel<S: Scalar>(&self, _t: S, x: &[S], v: &[S]) -> Result<Vec<S>> {
            let r = x[0];
            Ok(vec![r * v[1] * v[1] - S::constant(1.0) / r.powi(2), -(v[0] * v[1]).scale(2.0) / r])
        }
    }

    /// f_i = sin(t) x_i v_i² + x_0 v_1, with hand-derived partials.
    struct Mixed;

    impl Acceleration for Mixed {
        fn dim(&self) -> usize {
            2
        }
        fn accel<S: Scalar>(&self, t: S, x: &[S], v: &[S]) -> Result<Vec<S>> {
            Ok((0..2).map(|i| t.sin() * x[i] * v[i] * v[i] + x[0] * v[1]).collect())
        }
    }

    #[test]
    fn linear_oscillator_partials() {
        let sys = Linear {
            omega2: [4.0, 9.0],
            gamma: [2.0, 0.0],
        };
        let p = jacobians_of_f(&sys, 0.3, &[0.5, -1.0], &[0.2, 0.7]).unwrap();
        assert_eq!(p.dfdx, Mat::diag(&[-4.0, -9.0]));
        assert_eq!(p.dfdv, Mat::diag(&[-2.0, 0.0]));
        assert_eq!(p.ddt_dfdv, Mat::zeros(2));
        assert_eq!(p.dfdt, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_system_partials() {
        let p = jacobians_of_f(&Zero, 1.0, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(p.f, vec![0.0, 0.0]);
        assert_eq!(p.dfdx, Mat::zeros(2));
        assert_eq!(p.dfdv, Mat::zeros(2));
        assert_eq!(p.ddt_dfdv, Mat::zeros(2));
    }

    #[test]
    fn kepler_velocity_jacobian() {
        let p = jacobians_of_f(&KeplerUnit, 0.0, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(p.dfdv, Mat::from_rows(&[&[0.0, 2.0], &[-2.0, 0.0]]));
    }

    #[test]
    fn total_derivative_matches_symbolic() {
        let (t, x, v) = (0.7, [0.4, -1.3], [0.9, 0.25]);
        let p = jacobians_of_f(&Mixed, t, &x, &v).unwrap();
        let f: Vec<f64> = (0..2).map(|i| t.sin() * x[i] * v[i] * v[i] + x[0] * v[1]).collect();
        // ∂f_i/∂v_k = 2 sin t x_i v_i δ_ik + x_0 δ_k1
        // d/dt of that along (1, v, f):
        //   ∂/∂t: 2 cos t x_i v_i δ_ik
        //   ∂/∂x_j · v_j: 2 sin t v_i δ_ik v_i + δ_k1 v_0
        //   ∂/∂v_j · f_j: 2 sin t x_i δ_ik f_i
        for i in 0..2 {
            for k in 0..2 {
                let dik = f64::from(u8::from(i == k));
                let dk1 = f64::from(u8::from(k == 1));
                let expect = 2.0 * t.cos() * x[i] * v[i] * dik
                    + 2.0 * t.sin() * v[i] * v[i] * dik
                    + dk1 * v[0]
                    + 2.0 * t.sin() * x[i] * f[i] * dik;
                assert!((p.ddt_dfdv.get(i, k) - expect).abs() < 1e-14);
                let dfdv = 2.0 * t.sin() * x[i] * v[i] * dik + x[0] * dk1;
                assert!((p.dfdv.get(i, k) - dfdv).abs() < 1e-15);
            }
            assert!((p.dfdt[i] - t.cos() * x[i] * v[i] * v[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_partials_are_reported() {
        let err = jacobians_of_f(&KeplerUnit, 0.0, &[0.0, 0.0], &[0.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
