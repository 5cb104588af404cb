//! Evaluation statistics: Hessian recovery error, ground-truth MSEs, Welch's
//! t-test on log MSE and loss-curve smoothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Mat;

mod mse;

pub use mse::{
    compare_populations, evaluation_grid, geometric_mean_mse, EvalReport, MseTable, hessian_error, model_mse, trajectory_mse, ModelMse, MseComparison,
    Quantity, QuantityMse, Region, EVAL_DENSITY, HORIZON_FACTOR, QUANTITIES, REGIONS,
};

/// Exponential moving average seeded with the first value.
pub fn smooth_curve(raw: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    let Some(&first) = raw.first() else {
        return out;
    };
    let mut acc = first;
    for &x in raw {
        acc = alpha * x + (1.0 - alpha) * acc;
        out.push(acc);
    }
    out
}

/// Percentile `q ∈ [0, 1]` by linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, q)
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HessianErrorStats {
    pub median: f64,
    pub p20: f64,
    pub p80: f64,
    pub c_star: f64,
    pub count: usize,
}

/// Least-squares scale `c` minimizing `Σ ‖c·pred − truth‖²`.
pub fn fit_scale(pairs: &[(Mat, Mat)]) -> f64 {
    let num: f64 = pairs.iter().map(|(p, t)| p.frobenius_dot(t)).sum();
    let den: f64 = pairs.iter().map(|(p, _)| p.frobenius_dot(p)).sum();
    num / den
}

/// Mixed absolute/relative error of `(predicted, true)` metric pairs after
/// a single global scale fit. Components are the upper triangle.
pub fn hessian_error_from_pairs(pairs: &[(Mat, Mat)]) -> Result<HessianErrorStats> {
    if pairs.is_empty() {
        return Err(Error::Domain("no evaluation points".into()));
    }
    let c = fit_scale(pairs);
    if !c.is_finite() || c == 0.0 {
        return Err(Error::NonFinite("metric scale fit".into()));
    }
    let mut errs = Vec::new();
    for (p, t) in pairs {
        let n = t.n();
        for i in 0..n {
            for j in i..n {
                let truth = t.get(i, j);
                let diff = (c * p.get(i, j) - truth).abs();
                errs.push(if truth == 0.0 { diff } else { diff / truth.abs() });
            }
        }
    }
    errs.sort_by(f64::total_cmp);
    Ok(HessianErrorStats {
        median: percentile_sorted(&errs, 0.5),
        p20: percentile_sorted(&errs, 0.2),
        p80: percentile_sorted(&errs, 0.8),
        c_star: c,
        count: errs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    /// `mean_a − mean_b`
    pub diff: f64,
    pub se: f64,
    /// `None` when both groups have zero variance.
    pub t: Option<f64>,
    pub dof: Option<f64>,
    /// Two-sided.
    pub p: Option<f64>,
    #[serde(rename = "R")]
    pub ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's t-test of group `a` against group `b` (log MSEs), reported as the
/// ratio `exp(mean_a − mean_b)` with a 95% interval.
pub fn welch_ratio(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Domain("Welch's test needs at least two samples per group".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Welch sample".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (qa, qb) = (va / na, vb / nb);
    let se = (qa + qb).sqrt();
    let diff = ma - mb;
    let ratio = diff.exp();
    if se == 0.0 {
        return Ok(WelchResult {
            diff,
            se,
            t: None,
            dof: None,
            p: None,
            ratio,
            ci_low: ratio,
            ci_high: ratio,
        });
    }
    let t = diff / se;
    let dof = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    let p = 2.0 * (1.0 - student_t_cdf(t.abs(), dof));
    let tc = student_t_quantile(0.975, dof);
    Ok(WelchResult {
        diff,
        se,
        t: Some(t),
        dof: Some(dof),
        p: Some(p),
        ratio,
        ci_low: (diff - tc * se).exp(),
        ci_high: (diff + tc * se).exp(),
    })
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..1000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    incomplete_beta_split(a, b, x, 1.0 - x)
}

/// `I_x(a, b)` with `y = 1 − x` supplied separately to keep precision when
/// `x` is close to 1.
fn incomplete_beta_split(a: f64, b: f64, x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if y <= 0.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * y.ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, y) / b
    }
}

pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    let d = dof + t * t;
    let tail = 0.5 * incomplete_beta_split(dof / 2.0, 0.5, dof / d, t * t / d);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Inverse of [`student_t_cdf`] by bisection.
pub fn student_t_quantile(p: f64, dof: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must lie in (0, 1)");
    let (mut lo, mut hi) = (-1.0, 1.0);
    while student_t_cdf(lo, dof) > p {
        lo *= 2.0;
    }
    while student_t_cdf(hi, dof) < p {
        hi *= 2.0;
    }
    while hi - lo > 1e-12 * hi.abs().max(1.0) {
        let mid = 0.5 * (lo + hi);
        if student_t_cdf(mid, dof) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
