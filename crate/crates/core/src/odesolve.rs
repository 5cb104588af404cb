//! Fixed-step RK4 for `ẍ = f(t, x, ẋ)`, batched over trajectories.
//!
//! The batched solver runs on any [`TensorLike`]; on tape variables the
//! unrolled steps are recorded, so gradients reach the acceleration network
//! and the initial state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::MlpParams;
use crate::numcore::{Acceleration, Tensor, TensorLike};

/// Default RK4 substeps per observation interval.
pub const DEFAULT_SUBSTEPS: usize = 10;
/// Rollouts are aborted once any state entry exceeds this magnitude.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

/// Observation times plus the number of RK4 steps between neighbours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveGrid {
    times: Vec<f64>,
    substeps: usize,
}

impl SolveGrid {
    pub fn new(times: Vec<f64>, substeps: usize) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Config("need at least two observation times".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("observation times must be finite and strictly increasing".into()));
        }
        if substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        Ok(SolveGrid { times, substeps })
    }

    /// `n_t` equidistant times covering `[t0, t_end]`.
    pub fn uniform(t0: f64, t_end: f64, n_t: usize, substeps: usize) -> Result<Self> {
        if n_t < 2 || t_end <= t0 {
            return Err(Error::Config(format!("invalid grid [{t0}, {t_end}] with {n_t} points")));
        }
        let dt = (t_end - t0) / (n_t - 1) as f64;
        let times = (0..n_t).map(|i| if i + 1 == n_t { t_end } else { t0 + dt * i as f64 }).collect();
        SolveGrid::new(times, substeps)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn t0(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// A batched acceleration: `x, v: [B, n]` to `[B, n]`.
pub trait BatchAccel<T> {
    fn accel(&self, t: f64, x: &T, v: &T) -> Result<T>;
}

impl<T, F> BatchAccel<T> for F
where
    F: Fn(f64, &T, &T) -> Result<T>,
{
    fn accel(&self, t: f64, x: &T, v: &T) -> Result<T> {
        self(t, x, v)
    }
}

/// Row-wise evaluation of an analytic [`Acceleration`] on plain tensors.
pub struct PerRow<'a, A>(pub &'a A);

impl<A: Acceleration> BatchAccel<Tensor> for PerRow<'_, A> {
    fn accel(&self, t: f64, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (b, n) = x.shape();
        let mut out = Tensor::zeros(b, n);
        for r in 0..b {
            let a = self.0.accel(t, x.row(r), v.row(r))?;
            out.data_mut()[r * n..(r + 1) * n].copy_from_slice(&a);
        }
        Ok(out)
    }
}

/// States at the observation times, each `[B, n]`.
#[derive(Debug, Clone)]
pub struct BatchTrajectory<T> {
    pub times: Vec<f64>,
    pub x: Vec<T>,
    pub v: Vec<T>,
}

fn check_state<T: TensorLike>(x: &T, v: &T, step: usize, t: f64) -> Result<()> {
    let m = x.max_abs().max(v.max_abs());
    if !(m <= DIVERGENCE_LIMIT) {
        return Err(Error::Divergence { step, t });
    }
    Ok(())
}

/// Integrates up to and including observation `upto - 1` (all of them when
/// `upto` is `None`).
pub fn integrate_batch<T: TensorLike, F: BatchAccel<T>>(
    f: &F,
    x0: T,
    v0: T,
    grid: &SolveGrid,
    upto: Option<usize>,
) -> Result<BatchTrajectory<T>> {
    let count = upto.unwrap_or(grid.times.len()).min(grid.times.len());
    let mut xs = vec![x0.clone()];
    let mut vs = vec![v0.clone()];
    let (mut x, mut v) = (x0, v0);
    check_state(&x, &v, 0, grid.times[0])?;
    let mut step = 0;
    for w in grid.times[..count].windows(2) {
        let h = (w[1] - w[0]) / grid.substeps as f64;
        for s in 0..grid.substeps {
            let t = w[0] + h * s as f64;
            let k1x = v.clone();
            let k1v = f.accel(t, &x, &v)?;
            let k2x = v.add(&k1v.scale(0.5 * h));
            let k2v = f.accel(t + 0.5 * h, &x.add(&k1x.scale(0.5 * h)), &k2x)?;
            let k3x = v.add(&k2v.scale(0.5 * h));
            let k3v = f.accel(t + 0.5 * h, &x.add(&k2x.scale(0.5 * h)), &k3x)?;
            let k4x = v.add(&k3v.scale(h));
            let k4v = f.accel(t + h, &x.add(&k3x.scale(h)), &k4x)?;
            let sx = k1x.add(&k2x.scale(2.0)).add(&k3x.scale(2.0)).add(&k4x);
            let sv = k1v.add(&k2v.scale(2.0)).add(&k3v.scale(2.0)).add(&k4v);
            x = x.add(&sx.scale(h / 6.0));
            v = v.add(&sv.scale(h / 6.0));
            step += 1;
            check_state(&x, &v, step, t + h)?;
        }
        xs.push(x.clone());
        vs.push(v.clone());
    }
    Ok(BatchTrajectory {
        times: grid.times[..count].to_vec(),
        x: xs,
        v: vs,
    })
}

/// Single-trajectory integration of an analytic system.
pub fn integrate<A: Acceleration>(f: &A, s0: &State, grid: &SolveGrid) -> Result<Vec<State>> {
    let n = f.dim();
    if s0.x.len() != n || s0.v.len() != n {
        return Err(Error::shape(format!("initial state must have dimension {n}")));
    }
    let traj = integrate_batch(
        &PerRow(f),
        Tensor::new(1, n, s0.x.clone()),
        Tensor::new(1, n, s0.v.clone()),
        grid,
        None,
    )?;
    Ok(traj
        .times
        .iter()
        .zip(traj.x.into_iter().zip(traj.v))
        .map(|(&t, (x, v))| State {
            t,
            x: x.into_data(),
            v: v.into_data(),
        })
        .collect())
}

/// `v0 = NN(x0)` for a single initial position.
pub fn initial_velocity(nn: &MlpParams, x0: &[f64]) -> Result<Vec<f64>> {
    nn.forward_scalar(x0)
}
