//! Analytic test systems, initial-condition samplers and datasets.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::write_atomic;
use crate::numcore::{Acceleration, Mat, MetricField, Scalar, Tensor};
use crate::odesolve::{integrate_batch, PerRow, SolveGrid, State};
use crate::rng::{stream, Stream};

/// RK4 substeps per interval used for clean data and ground truth.
pub const HIGH_ACCURACY_SUBSTEPS: usize = 40;
/// Kepler radii at or below this are rejected.
pub const KEPLER_MIN_RADIUS: f64 = 1e-9;

/// A second-order ODE in two dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum System {
    /// `ẍ = −Ω x − Γ ẋ` with `Ω = diag(ω²)`, `Γ = diag(γ)`.
    Oscillator { omega: [f64; 2], gamma: [f64; 2] },
    /// Planar Kepler problem in polar coordinates `(r, φ)`.
    Kepler { gm: f64 },
    /// `ẍ₁ = x₁² + x₂²`, `ẍ₂ = ξ x₁`; no Lagrangian exists.
    Douglas { xi: f64 },
}

impl System {
    pub fn validate(&self) -> Result<()> {
        match self {
            System::Oscillator { omega, gamma } => {
                if omega.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
                    return Err(Error::Config("oscillator frequencies must be positive".into()));
                }
                if gamma.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Config("damping must be finite".into()));
                }
            }
            System::Kepler { gm } => {
                if !(*gm > 0.0 && gm.is_finite()) {
                    return Err(Error::Config("GM must be positive".into()));
                }
            }
            System::Douglas { xi } => {
                if !xi.is_finite() {
                    return Err(Error::Config("ξ must be finite".into()));
                }
            }
        }
        Ok(())
    }

    pub fn is_lagrangian(&self) -> bool {
        !matches!(self, System::Douglas { .. })
    }

    /// Whether the known Hessian depends on time.
    pub fn needs_time(&self) -> bool {
        matches!(self, System::Oscillator { gamma, .. } if gamma.iter().any(|&g| g != 0.0))
    }

    /// Hessian of the Lagrangian with respect to the velocities.
    pub fn analytic_hessian(&self, t: f64, x: &[f64], v: &[f64]) -> Result<Mat> {
        Ok(Mat::from_vec(2, AnalyticMetric(self).metric(t, x, v)?))
    }

    /// The right-hand side written in the expression language.
    pub fn to_expression(&self) -> String {
        match self {
            System::Oscillator { omega, gamma } => format!(
                "-{:?}*x1 - {:?}*v1 ; -{:?}*x2 - {:?}*v2",
                omega[0] * omega[0],
                gamma[0],
                omega[1] * omega[1],
                gamma[1]
            ),
            System::Kepler { gm } => format!("x1*v2^2 - {gm:?}/x1^2 ; -2*v1*v2/x1"),
            System::Douglas { xi } => format!("x1^2 + x2^2 ; {xi:?}*x1"),
        }
    }
}

impl Acceleration for System {
    fn dim(&self) -> usize {
        2
    }

    fn accel<S: Scalar>(&self, _t: S, x: &[S], v: &[S]) -> Result<Vec<S>> {
        Ok(match self {
            System::Oscillator { omega, gamma } => (0..2)
                .map(|i| -x[i].scale(omega[i] * omega[i]) - v[i].scale(gamma[i]))
                .collect(),
            System::Kepler { gm } => {
                let r = x[0];
                if r.value() <= KEPLER_MIN_RADIUS {
                    return Err(Error::Singularity(format!("Kepler radius {} too small", r.value())));
                }
                vec![
                    r * v[1] * v[1] - S::constant(*gm) / (r * r),
                    -(v[0] * v[1]).scale(2.0) / r,
                ]
            }
            System::Douglas { xi } => vec![x[0] * x[0] + x[1] * x[1], x[0].scale(*xi)],
        })
    }
}

/// The analytic Hessian as a differentiable metric field.
pub struct AnalyticMetric<'a>(pub &'a System);

impl MetricField for AnalyticMetric<'_> {
    fn dim(&self) -> usize {
        2
    }

    fn metric<S: Scalar>(&self, t: S, x: &[S], _v: &[S]) -> Result<Vec<S>> {
        let zero = S::constant(0.0);
        match self.0 {
            System::Oscillator { gamma, .. } => Ok(vec![t.scale(gamma[0]).exp(), zero, zero, t.scale(gamma[1]).exp()]),
            System::Kepler { .. } => Ok(vec![S::constant(1.0), zero, zero, x[0] * x[0]]),
            System::Douglas { .. } => Err(Error::NotLagrangian),
        }
    }
}

/// `ω = 2π n_periods / window`
pub fn oscillator_omega(n_periods: f64, window: f64) -> f64 {
    2.0 * PI * n_periods / window
}

/// `GM = (2π n_periods / window)² a³` with semi-major axis `a = p / (1 − ε²)`.
pub fn kepler_gm(n_periods: f64, window: f64, p: f64, ecc: f64) -> f64 {
    let a = p / (1.0 - ecc * ecc);
    (2.0 * PI * n_periods / window).powi(2) * a.powi(3)
}

/// Perihelion state of the orbit with semi-latus rectum `p` and
/// eccentricity `ecc`, as `x = (r, φ)`, `v = (ṙ, φ̇)`.
pub fn kepler_initial_state(p: f64, ecc: f64, gm: f64) -> Result<State> {
    if !(0.0..1.0).contains(&ecc) {
        return Err(Error::Unsupported(format!("eccentricity {ecc} does not give a bounded orbit")));
    }
    if p <= 0.0 || gm <= 0.0 {
        return Err(Error::Domain("p and GM must be positive".into()));
    }
    let r0 = p / (1.0 + ecc);
    Ok(State {
        t: 0.0,
        x: vec![r0, 0.0],
        v: vec![0.0, (gm * p).sqrt() / (r0 * r0)],
    })
}

/// Initial-condition distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConditions {
    /// Independent Gaussians per coordinate.
    Gaussian {
        x_mean: f64,
        x_std: f64,
        v_mean: f64,
        v_std: f64,
    },
    /// `x₀ ~ N(x_mean, x_std)` and `ẋ₀ = v_scale · |x₀|`.
    AbsVelocity { x_mean: f64, x_std: f64, v_scale: f64 },
    /// Kepler orbits: `p ~ N` truncated to `p > 0.1`, `ε ~ N` truncated to
    /// `[0, 0.9]`.
    Orbit {
        p_mean: f64,
        p_std: f64,
        ecc_mean: f64,
        ecc_std: f64,
    },
}

const P_MIN: f64 = 0.1;
const ECC_MAX: f64 = 0.9;

fn truncated(rng: &mut crate::rng::Rng, mean: f64, std: f64, lo: f64, hi: f64) -> Result<f64> {
    if std == 0.0 {
        return Ok(mean.clamp(lo, hi));
    }
    let d = Normal::new(mean, std).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..10_000 {
        let s = d.sample(rng);
        if s >= lo && s <= hi {
            return Ok(s);
        }
    }
    Err(Error::Config(format!("truncated N({mean}, {std}) on [{lo}, {hi}] is nearly empty")))
}

fn normal(rng: &mut crate::rng::Rng, mean: f64, std: f64) -> Result<f64> {
    Ok(Normal::new(mean, std).map_err(|e| Error::Config(e.to_string()))?.sample(rng))
}

/// A system together with its initial-condition distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub system: System,
    pub initial: InitialConditions,
    /// Length of the observation window starting at `t = 0`.
    #[serde(default = "unit_window")]
    pub window: f64,
}

fn unit_window() -> f64 {
    1.0
}

impl SystemSpec {
    /// Oscillator with `ω = 2π n_periods` in both coordinates and
    /// `γ = damping · ω`.
    pub fn oscillator(n_periods: f64, damping: f64, initial: InitialConditions) -> Self {
        let w = oscillator_omega(n_periods, 1.0);
        SystemSpec {
            system: System::Oscillator {
                omega: [w, w],
                gamma: [damping * w, damping * w],
            },
            initial,
            window: 1.0,
        }
    }

    /// Kepler problem whose mean orbit completes `n_periods` in the window.
    pub fn kepler(n_periods: f64, p_mean: f64, p_std: f64, ecc_mean: f64, ecc_std: f64) -> Self {
        SystemSpec {
            system: System::Kepler {
                gm: kepler_gm(n_periods, 1.0, p_mean, ecc_mean),
            },
            initial: InitialConditions::Orbit {
                p_mean,
                p_std,
                ecc_mean,
                ecc_std,
            },
            window: 1.0,
        }
    }

    pub fn douglas(xi: f64, initial: InitialConditions) -> Self {
        SystemSpec {
            system: System::Douglas { xi },
            initial,
            window: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if !(self.window > 0.0 && self.window.is_finite()) {
            return Err(Error::Config("window must be positive".into()));
        }
        let bad_std = |s: f64| !(s >= 0.0 && s.is_finite());
        match (&self.system, &self.initial) {
            (System::Kepler { .. }, InitialConditions::Orbit { p_std, ecc_std, .. }) => {
                if bad_std(*p_std) || bad_std(*ecc_std) {
                    return Err(Error::Config("standard deviations must be non-negative".into()));
                }
            }
            (System::Kepler { .. }, _) => {
                return Err(Error::Config("Kepler needs orbit initial conditions".into()));
            }
            (_, InitialConditions::Orbit { .. }) => {
                return Err(Error::Config("orbit initial conditions need the Kepler system".into()));
            }
            (_, InitialConditions::Gaussian { x_std, v_std, .. }) => {
                if bad_std(*x_std) || bad_std(*v_std) {
                    return Err(Error::Config("standard deviations must be non-negative".into()));
                }
            }
            (_, InitialConditions::AbsVelocity { x_std, .. }) => {
                if bad_std(*x_std) {
                    return Err(Error::Config("standard deviations must be non-negative".into()));
                }
            }
        }
        Ok(())
    }

    /// Draws one initial state.
    pub fn sample_initial(&self, rng: &mut crate::rng::Rng) -> Result<State> {
        let (x, v) = match &self.initial {
            InitialConditions::Gaussian {
                x_mean,
                x_std,
                v_mean,
                v_std,
            } => {
                let x = vec![normal(rng, *x_mean, *x_std)?, normal(rng, *x_mean, *x_std)?];
                let v = vec![normal(rng, *v_mean, *v_std)?, normal(rng, *v_mean, *v_std)?];
                (x, v)
            }
            InitialConditions::AbsVelocity { x_mean, x_std, v_scale } => {
                let x = vec![normal(rng, *x_mean, *x_std)?, normal(rng, *x_mean, *x_std)?];
                let v = x.iter().map(|xi| v_scale * xi.abs()).collect();
                (x, v)
            }
            InitialConditions::Orbit {
                p_mean,
                p_std,
                ecc_mean,
                ecc_std,
            } => {
                let System::Kepler { gm } = self.system else {
                    return Err(Error::Config("orbit initial conditions need the Kepler system".into()));
                };
                let p = truncated(rng, *p_mean, *p_std, P_MIN, f64::INFINITY)?;
                let ecc = truncated(rng, *ecc_mean, *ecc_std, 0.0, ECC_MAX)?;
                let s = kepler_initial_state(p, ecc, gm)?;
                (s.x, s.v)
            }
        };
        Ok(State { t: 0.0, x, v })
    }
}

/// Observations of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `n_t × n`
    pub x: Vec<Vec<f64>>,
    pub v: Option<Vec<Vec<f64>>>,
}

/// Generation settings and provenance stored next to a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub spec: SystemSpec,
    pub seed: u64,
    pub n_traj: usize,
    pub n_t: usize,
    /// Noise level in percent of the per-dimension ensemble std.
    pub noise_pct: f64,
    pub noise_sigma_x: Vec<f64>,
    pub noise_sigma_v: Option<Vec<f64>>,
    pub has_velocity: bool,
    /// Expression whose dynamics replaced `spec.system` during generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ode: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.trajectories[0].x[0].len()
    }

    pub fn times(&self) -> &[f64] {
        &self.trajectories[0].times
    }
}

/// Noise-free trajectories for `n_traj` sampled initial conditions.
pub fn clean_trajectories(spec: &SystemSpec, n_traj: usize, n_t: usize, seed: u64) -> Result<Vec<Trajectory>> {
    clean_trajectories_of(&spec.system, spec, n_traj, n_t, seed)
}

fn clean_trajectories_of<A: Acceleration>(
    system: &A,
    spec: &SystemSpec,
    n_traj: usize,
    n_t: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let mut rng = stream(seed, Stream::Dataset);
    let starts = (0..n_traj)
        .map(|_| spec.sample_initial(&mut rng))
        .collect::<Result<Vec<_>>>()?;
    let grid = SolveGrid::uniform(0.0, spec.window, n_t, HIGH_ACCURACY_SUBSTEPS)?;
    solve_from(system, &starts, &grid)
}

/// Initial states for held-out evaluation, drawn from the test-set stream.
pub fn test_starts(spec: &SystemSpec, count: usize, seed: u64) -> Result<Vec<State>> {
    let mut rng = stream(seed, Stream::TestSet);
    (0..count).map(|_| spec.sample_initial(&mut rng)).collect()
}

/// Clean held-out trajectories from [`test_starts`] on the observation grid.
pub fn test_trajectories(spec: &SystemSpec, count: usize, n_t: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let grid = SolveGrid::uniform(0.0, spec.window, n_t, HIGH_ACCURACY_SUBSTEPS)?;
    solve_from(&spec.system, &test_starts(spec, count, seed)?, &grid)
}

/// High-accuracy solutions from given initial states on `grid`.
pub fn solve_from<A: Acceleration>(system: &A, starts: &[State], grid: &SolveGrid) -> Result<Vec<Trajectory>> {
    let n = system.dim();
    if starts.iter().any(|s| s.x.len() != n || s.v.len() != n) {
        return Err(Error::shape(format!("initial states must have dimension {n}")));
    }
    let b = starts.len();
    let x0 = Tensor::new(b, n, starts.iter().flat_map(|s| s.x.clone()).collect());
    let v0 = Tensor::new(b, n, starts.iter().flat_map(|s| s.v.clone()).collect());
    let sol = integrate_batch(&PerRow(system), x0, v0, grid, None)?;
    Ok((0..b)
        .map(|r| Trajectory {
            times: grid.times().to_vec(),
            x: sol.x.iter().map(|x| x.row(r).to_vec()).collect(),
            v: Some(sol.v.iter().map(|v| v.row(r).to_vec()).collect()),
        })
        .collect())
}

fn ensemble_std(trajs: &[Trajectory], pick: impl Fn(&Trajectory) -> &Vec<Vec<f64>>, d: usize) -> f64 {
    let vals: Vec<f64> = trajs.iter().flat_map(|t| pick(t).iter().map(move |row| row[d])).collect();
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

/// Clean trajectories plus additive Gaussian noise with per-dimension
/// `σ_d = noise_pct/100 · std_d` of the clean ensemble.
pub fn generate_dataset(
    spec: &SystemSpec,
    n_traj: usize,
    n_t: usize,
    noise_pct: f64,
    seed: u64,
    supply_velocity: bool,
) -> Result<Dataset> {
    spec.validate()?;
    generate_dataset_of(&spec.system, spec, n_traj, n_t, noise_pct, seed, supply_velocity)
}

/// [`generate_dataset`] with the dynamics of `system` in place of
/// `spec.system`; the initial conditions and window still come from `spec`.
pub fn generate_dataset_of<A: Acceleration>(
    system: &A,
    spec: &SystemSpec,
    n_traj: usize,
    n_t: usize,
    noise_pct: f64,
    seed: u64,
    supply_velocity: bool,
) -> Result<Dataset> {
    if n_traj == 0 {
        return Err(Error::Config("n_traj must be at least 1".into()));
    }
    if n_t < 2 {
        return Err(Error::Config("n_t must be at least 2".into()));
    }
    if !(noise_pct >= 0.0 && noise_pct.is_finite()) {
        return Err(Error::Config("noise_pct must be non-negative".into()));
    }
    let mut trajs = clean_trajectories_of(system, spec, n_traj, n_t, seed)?;
    let n = system.dim();
    let frac = noise_pct / 100.0;
    let sigma_x: Vec<f64> = (0..n).map(|d| frac * ensemble_std(&trajs, |t| &t.x, d)).collect();
    let sigma_v: Vec<f64> = (0..n)
        .map(|d| frac * ensemble_std(&trajs, |t| t.v.as_ref().unwrap(), d))
        .collect();

    let mut rng = stream(seed, Stream::Noise);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    for traj in &mut trajs {
        for row in &mut traj.x {
            for (d, val) in row.iter_mut().enumerate() {
                *val += sigma_x[d] * std_normal.sample(&mut rng);
            }
        }
        if supply_velocity {
            for row in traj.v.as_mut().unwrap() {
                for (d, val) in row.iter_mut().enumerate() {
                    *val += sigma_v[d] * std_normal.sample(&mut rng);
                }
            }
        } else {
            traj.v = None;
        }
    }
    Ok(Dataset {
        meta: DatasetMeta {
            spec: spec.clone(),
            seed,
            n_traj,
            n_t,
            noise_pct,
            noise_sigma_x: sigma_x,
            noise_sigma_v: supply_velocity.then_some(sigma_v),
            has_velocity: supply_velocity,
            ode: None,
        },
        trajectories: trajs,
    })
}

/// JSON sidecar path belonging to a dataset CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes `<path>` (CSV) and its JSON sidecar.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let n = ds.dim();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["traj_id".to_string(), "time".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    if ds.meta.has_velocity {
        header.extend((1..=n).map(|i| format!("v{i}")));
    }
    w.write_record(&header)?;
    for (id, traj) in ds.trajectories.iter().enumerate() {
        for (k, t) in traj.times.iter().enumerate() {
            let mut rec = vec![id.to_string(), t.to_string()];
            rec.extend(traj.x[k].iter().map(f64::to_string));
            if let Some(v) = &traj.v {
                rec.extend(v[k].iter().map(f64::to_string));
            }
            w.write_record(&rec)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_atomic(path, &bytes)?;
    write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&ds.meta)?.as_bytes())?;
    Ok(())
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse number {s:?}")))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let mut rdr = csv::Reader::from_path(path)?;
    let n = 2;
    let width = 2 + n * if meta.has_velocity { 2 } else { 1 };
    if rdr.headers()?.len() != width {
        return Err(Error::Config(format!("dataset has {} columns, expected {width}", rdr.headers()?.len())));
    }
    let mut trajs: Vec<Trajectory> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let id: usize = rec[0]
            .parse()
            .map_err(|_| Error::Config(format!("line {line}: bad trajectory id")))?;
        if id == trajs.len() {
            trajs.push(Trajectory {
                times: Vec::new(),
                x: Vec::new(),
                v: meta.has_velocity.then(Vec::new),
            });
        } else if id + 1 != trajs.len() {
            return Err(Error::Config(format!("line {line}: trajectory ids must be contiguous")));
        }
        let traj = trajs.last_mut().unwrap();
        traj.times.push(parse_f64(&rec[1], line)?);
        traj.x
            .push((0..n).map(|d| parse_f64(&rec[2 + d], line)).collect::<Result<_>>()?);
        if let Some(v) = &mut traj.v {
            v.push((0..n).map(|d| parse_f64(&rec[2 + n + d], line)).collect::<Result<_>>()?);
        }
    }
    if trajs.len() != meta.n_traj || trajs.iter().any(|t| t.times.len() != meta.n_t) {
        return Err(Error::Config("dataset shape does not match its sidecar".into()));
    }
    Ok(Dataset {
        meta,
        trajectories: trajs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::helmholtz::residuals_at;

    fn osc(omega: [f64; 2], gamma: [f64; 2]) -> System {
        System::Oscillator { omega, gamma }
    }

    #[test]
    fn acceleration_examples() {
        let f = osc([2.0, 3.0], [0.0, 0.0]).accel(0.0, &[1.0, 1.0], &[0.7, -3.0]).unwrap();
        assert_eq!(f, vec![-4.0, -9.0]);
        let f = System::Douglas { xi: 1.0 }.accel(0.0, &[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(f, vec![5.0, 1.0]);
        let f = System::Douglas { xi: 0.0 }.accel(0.0, &[0.0, 0.0], &[0.3, 0.3]).unwrap();
        assert_eq!(f, vec![0.0, 0.0]);
        let err = System::Kepler { gm: 1.0 }.accel(0.0, &[0.0, 0.0], &[0.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::Singularity(_)));
    }

    #[test]
    fn kepler_initial_state_examples() {
        let s = kepler_initial_state(1.0, 0.0, 1.0).unwrap();
        assert_eq!((s.x.clone(), s.v.clone()), (vec![1.0, 0.0], vec![0.0, 1.0]));
        let s = kepler_initial_state(1.0, 0.5, 1.0).unwrap();
        assert!((s.x[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.v[1] - 2.25).abs() < 1e-14);
        let s = kepler_initial_state(2.0, 0.0, 1.0).unwrap();
        assert_eq!(s.x[0], 2.0);
        assert!((s.v[1] - 2f64.sqrt() / 4.0).abs() < 1e-15);
        assert!(matches!(kepler_initial_state(1.0, 1.0, 1.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn period_parametrization() {
        assert!((oscillator_omega(3.0, 1.0) - 6.0 * PI).abs() < 1e-14);
        assert!((oscillator_omega(1.0, 1.0) - 2.0 * PI).abs() < 1e-15);
        assert!((kepler_gm(1.0, 1.0, 1.0, 0.0) - 4.0 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn kepler_period_matches_parametrization() {
        // One full orbit returns to perihelion.
        let (p, ecc) = (1.0, 0.3);
        let gm = kepler_gm(1.0, 1.0, p, ecc);
        let sys = System::Kepler { gm };
        let s0 = kepler_initial_state(p, ecc, gm).unwrap();
        let grid = SolveGrid::uniform(0.0, 1.0, 201, 40).unwrap();
        let out = crate::odesolve::integrate(&sys, &s0, &grid).unwrap();
        let last = out.last().unwrap();
        assert!((last.x[0] - s0.x[0]).abs() < 1e-6);
        assert!((last.x[1] - 2.0 * PI).abs() < 1e-6);
    }

    #[test]
    fn hessian_examples() {
        let i = osc([1.0, 2.0], [0.0, 0.0]).analytic_hessian(0.4, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(i, Mat::identity(2));
        let k = System::Kepler { gm: 1.0 }.analytic_hessian(0.0, &[2.0, 0.3], &[0.0, 1.0]).unwrap();
        assert_eq!(k, Mat::diag(&[1.0, 4.0]));
        let d = osc([1.0, 1.0], [2.0, 0.0]).analytic_hessian(1.0, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((d.get(0, 0) - 1f64.exp().powi(2)).abs() < 1e-14);
        assert_eq!(d.get(1, 1), 1.0);
        assert!(matches!(
            System::Douglas { xi: 1.0 }.analytic_hessian(0.0, &[0.0, 0.0], &[0.0, 0.0]),
            Err(Error::NotLagrangian)
        ));
    }

    #[test]
    fn damped_metric_residuals_vanish() {
        let sys = osc([2.0, 3.0], [2.0, 0.0]);
        for t in [0.0, 0.5, 1.0] {
            let r = residuals_at(&AnalyticMetric(&sys), &sys, t, &[0.3, -0.2], &[1.0, 0.5]).unwrap();
            assert!(r.max_abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_dataset_equals_clean() {
        let spec = SystemSpec::oscillator(
            3.0,
            0.5,
            InitialConditions::AbsVelocity {
                x_mean: 1.0,
                x_std: 1.0,
                v_scale: 1.0,
            },
        );
        let ds = generate_dataset(&spec, 5, 30, 0.0, 9, false).unwrap();
        let clean = clean_trajectories(&spec, 5, 30, 9).unwrap();
        for (a, b) in ds.trajectories.iter().zip(&clean) {
            assert_eq!(a.x, b.x);
            assert!(a.v.is_none());
        }
        for t in &ds.trajectories {
            assert_eq!(t.v, None);
            assert_eq!(t.x.len(), 30);
            assert!((t.times[29] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dependent_velocity_rule() {
        let spec = SystemSpec::oscillator(
            1.0,
            0.0,
            InitialConditions::AbsVelocity {
                x_mean: 1.0,
                x_std: 0.1,
                v_scale: 0.1,
            },
        );
        let clean = clean_trajectories(&spec, 4, 7, 2).unwrap();
        for t in &clean {
            let v0 = &t.v.as_ref().unwrap()[0];
            assert!((v0[0] - 0.1 * t.x[0][0].abs()).abs() < 1e-15);
            assert!((v0[1] - 0.1 * t.x[0][1].abs()).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_level_matches_request() {
        let spec = SystemSpec::douglas(
            0.0,
            InitialConditions::Gaussian {
                x_mean: 0.0,
                x_std: 0.5,
                v_mean: 0.0,
                v_std: 0.5,
            },
        );
        let clean = clean_trajectories(&spec, 300, 10, 4).unwrap();
        let ds = generate_dataset(&spec, 300, 10, 5.0, 4, true).unwrap();
        let mut resid = Vec::new();
        for (a, b) in ds.trajectories.iter().zip(&clean) {
            for k in 0..10 {
                resid.push(a.x[k][0] - b.x[k][0]);
            }
        }
        let s = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
        assert!((s / ds.meta.noise_sigma_x[0] - 1.0).abs() < 0.1);
        assert!(ds.meta.noise_sigma_v.is_some());
    }

    #[test]
    fn generation_is_deterministic_and_roundtrips() {
        let spec = SystemSpec::kepler(1.0, 1.0, 0.1, 0.2, 0.05);
        let a = generate_dataset(&spec, 6, 12, 5.0, 77, true).unwrap();
        let b = generate_dataset(&spec, 6, 12, 5.0, 77, true).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&spec, 6, 12, 5.0, 78, true).unwrap();
        assert_ne!(a, c);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kepler.csv");
        save_dataset(&a, &path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded, a);
        save_dataset(&loaded, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        let header = String::from_utf8(first).unwrap();
        assert!(header.starts_with("traj_id,time,x1,x2,v1,v2\n"));
    }

    #[test]
    fn invalid_requests_rejected() {
        let spec = SystemSpec::douglas(
            1.0,
            InitialConditions::Gaussian {
                x_mean: 0.0,
                x_std: 0.5,
                v_mean: 0.0,
                v_std: 0.5,
            },
        );
        assert!(generate_dataset(&spec, 0, 10, 5.0, 1, true).is_err());
        assert!(generate_dataset(&spec, 3, 1, 5.0, 1, true).is_err());
        let bad = SystemSpec {
            initial: InitialConditions::Orbit {
                p_mean: 1.0,
                p_std: 0.1,
                ecc_mean: 0.1,
                ecc_std: 0.1,
            },
            ..spec
        };
        assert!(bad.validate().is_err());
    }
}
