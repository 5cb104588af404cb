use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::accel_batch;
use crate::numcore::{MetricField, Tensor};
use crate::odesolve::{integrate_batch, BatchAccel, PerRow, SolveGrid, State};
use crate::systems::{solve_from, SystemSpec, Trajectory, HIGH_ACCURACY_SUBSTEPS};
use crate::training::LnodeModel;

use super::{hessian_error_from_pairs, welch_ratio, HessianErrorStats, WelchResult};

/// Reference grid points per observation interval.
pub const EVAL_DENSITY: usize = 10;
/// Evaluation horizon in units of the training window.
pub const HORIZON_FACTOR: f64 = 2.0;
/// RK4 substeps per reference-grid interval for the model rollout.
const MODEL_SUBSTEPS: usize = 4;

/// MSE on the training window and beyond it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantityMse {
    pub interp: f64,
    pub extrap: f64,
}

/// Ground-truth MSEs of position, velocity and acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelMse {
    pub x: QuantityMse,
    pub v: QuantityMse,
    pub a: QuantityMse,
    /// The rollout left the divergence bound; affected regions are infinite.
    pub diverged: bool,
}

impl ModelMse {
    pub fn get(&self, quantity: Quantity, region: Region) -> f64 {
        let q = match quantity {
            Quantity::X => self.x,
            Quantity::V => self.v,
            Quantity::A => self.a,
        };
        match region {
            Region::Interp => q.interp,
            Region::Extrap => q.extrap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    X,
    V,
    A,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Interp,
    Extrap,
}

pub const QUANTITIES: [Quantity; 3] = [Quantity::X, Quantity::V, Quantity::A];
pub const REGIONS: [Region; 2] = [Region::Interp, Region::Extrap];

/// Dense evaluation grid over `[0, HORIZON_FACTOR · window]` and the index
/// of its last point inside the window.
pub fn evaluation_grid(window: f64, n_t: usize) -> Result<(SolveGrid, usize)> {
    if n_t < 2 {
        return Err(Error::Config("n_t must be at least 2".into()));
    }
    let per_window = (n_t - 1) * EVAL_DENSITY;
    let total = (per_window as f64 * HORIZON_FACTOR).round() as usize;
    let times = (0..=total).map(|i| window * i as f64 / per_window as f64).collect();
    Ok((SolveGrid::new(times, MODEL_SUBSTEPS)?, per_window))
}

fn region_mse(pred: &[Tensor], truth: &[Tensor], range: std::ops::Range<usize>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in range {
        for (p, t) in pred[k].data().iter().zip(truth[k].data()) {
            sum += (p - t) * (p - t);
            count += 1;
        }
    }
    sum / count as f64
}

/// MSEs of a batched acceleration and initial velocities against the true
/// system, started from `starts` (their true positions).
pub fn trajectory_mse<F: BatchAccel<Tensor>>(
    f: &F,
    v0: Tensor,
    spec: &SystemSpec,
    starts: &[State],
    n_t: usize,
) -> Result<ModelMse> {
    if starts.is_empty() {
        return Err(Error::Config("need at least one test trajectory".into()));
    }
    let (grid, split) = evaluation_grid(spec.window, n_t)?;
    let reference_grid = SolveGrid::new(grid.times().to_vec(), HIGH_ACCURACY_SUBSTEPS)?;
    let truth = solve_from(&spec.system, starts, &reference_grid)?;
    let b = starts.len();
    let n = starts[0].x.len();
    let stack = |pick: &dyn Fn(&Trajectory, usize) -> Vec<f64>, k: usize| {
        Tensor::new(b, n, truth.iter().flat_map(|tr| pick(tr, k)).collect())
    };
    let times = grid.times();
    let true_x: Vec<Tensor> = (0..times.len()).map(|k| stack(&|tr, k| tr.x[k].clone(), k)).collect();
    let true_v: Vec<Tensor> = (0..times.len())
        .map(|k| stack(&|tr, k| tr.v.as_ref().expect("solver output has velocities")[k].clone(), k))
        .collect();
    let true_a = times
        .iter()
        .enumerate()
        .map(|(k, &t)| PerRow(&spec.system).accel(t, &true_x[k], &true_v[k]))
        .collect::<Result<Vec<_>>>()?;

    let x0 = true_x[0].clone();
    let (traj, diverged) = match integrate_batch(f, x0.clone(), v0.clone(), &grid, None) {
        Ok(t) => (t, false),
        Err(Error::Divergence { .. }) => match integrate_batch(f, x0, v0, &grid, Some(split + 1)) {
            Ok(t) => (t, true),
            Err(Error::Divergence { .. }) => {
                let inf = QuantityMse {
                    interp: f64::INFINITY,
                    extrap: f64::INFINITY,
                };
                return Ok(ModelMse {
                    x: inf,
                    v: inf,
                    a: inf,
                    diverged: true,
                });
            }
            Err(e) => return Err(e),
        },
        Err(e) => return Err(e),
    };
    let pred_a = traj
        .x
        .iter()
        .zip(&traj.v)
        .enumerate()
        .map(|(k, (x, v))| f.accel(times[k], x, v))
        .collect::<Result<Vec<_>>>()?;
    let q = |pred: &[Tensor], truth: &[Tensor]| QuantityMse {
        interp: region_mse(pred, truth, 0..split + 1),
        extrap: if diverged {
            f64::INFINITY
        } else {
            region_mse(pred, truth, split + 1..times.len())
        },
    };
    Ok(ModelMse {
        x: q(&traj.x, &true_x),
        v: q(&traj.v, &true_v),
        a: q(&pred_a, &true_a),
        diverged,
    })
}

/// Ground-truth MSEs of a trained neural ODE, with `v0` from its own
/// initial-velocity network.
pub fn model_mse(model: &LnodeModel, spec: &SystemSpec, starts: &[State], n_t: usize) -> Result<ModelMse> {
    let b = starts.len();
    let n = model.dim();
    let x0 = Tensor::new(b, n, starts.iter().flat_map(|s| s.x.clone()).collect());
    let v0 = model.v0.forward(&x0)?;
    let f = model.f.mlp.bind_plain();
    let td = model.f.time_dependent();
    let rhs = |t: f64, x: &Tensor, v: &Tensor| Ok(accel_batch(&f, td, &Tensor::full(x.rows(), 1, t), x, v));
    trajectory_mse(&rhs, v0, spec, starts, n_t)
}

/// Hessian recovery error of a metric field against the analytic Hessian
/// at every point of `trajectories`.
pub fn hessian_error<G: MetricField>(g: &G, spec: &SystemSpec, trajectories: &[Trajectory]) -> Result<HessianErrorStats> {
    if !spec.system.is_lagrangian() {
        return Err(Error::NotLagrangian);
    }
    let mut pairs = Vec::new();
    for tr in trajectories {
        let vs = tr
            .v
            .as_ref()
            .ok_or_else(|| Error::Config("Hessian evaluation needs velocities".into()))?;
        for ((&t, x), v) in tr.times.iter().zip(&tr.x).zip(vs) {
            let pred = crate::numcore::Mat::from_vec(x.len(), g.metric(t, x, v)?);
            pairs.push((pred, spec.system.analytic_hessian(t, x, v)?));
        }
    }
    hessian_error_from_pairs(&pairs)
}

/// Welch comparison of one quantity and region between two populations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseComparison {
    pub quantity: Quantity,
    pub region: Region,
    /// Models entering the test, after dropping non-finite MSEs.
    pub n_a: usize,
    pub n_b: usize,
    pub excluded_a: usize,
    pub excluded_b: usize,
    pub mean_log_a: f64,
    pub mean_log_b: f64,
    /// `None` when a group has fewer than two finite samples.
    pub welch: Option<WelchResult>,
}

/// Log-MSE comparison of population `a` (regularized) against `b`
/// (baseline) for every quantity and region.
pub fn compare_populations(a: &[ModelMse], b: &[ModelMse]) -> Result<Vec<MseComparison>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("both populations need at least one model".into()));
    }
    let mut out = Vec::new();
    for q in QUANTITIES {
        for r in REGIONS {
            let logs = |pop: &[ModelMse]| -> (Vec<f64>, usize) {
                let all: Vec<f64> = pop.iter().map(|m| m.get(q, r).ln()).collect();
                let finite: Vec<f64> = all.iter().copied().filter(|l| l.is_finite()).collect();
                let excluded = all.len() - finite.len();
                (finite, excluded)
            };
            let (la, ea) = logs(a);
            let (lb, eb) = logs(b);
            let mean = |v: &[f64]| {
                if v.is_empty() {
                    f64::NAN
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            let welch = if la.len() >= 2 && lb.len() >= 2 {
                Some(welch_ratio(&la, &lb)?)
            } else {
                None
            };
            out.push(MseComparison {
                quantity: q,
                region: r,
                n_a: la.len(),
                n_b: lb.len(),
                excluded_a: ea,
                excluded_b: eb,
                mean_log_a: mean(&la),
                mean_log_b: mean(&lb),
                welch,
            });
        }
    }
    Ok(out)
}

/// Per-quantity MSEs without the divergence flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseTable {
    pub x: QuantityMse,
    pub v: QuantityMse,
    pub a: QuantityMse,
}

impl From<ModelMse> for MseTable {
    fn from(m: ModelMse) -> Self {
        MseTable { x: m.x, v: m.v, a: m.a }
    }
}

/// Geometric mean over the finite entries of each quantity and region;
/// NaN where no model is finite.
pub fn geometric_mean_mse(pop: &[ModelMse]) -> MseTable {
    let gm = |q: Quantity, r: Region| {
        let logs: Vec<f64> = pop.iter().map(|m| m.get(q, r).ln()).filter(|l| l.is_finite()).collect();
        if logs.is_empty() {
            f64::NAN
        } else {
            (logs.iter().sum::<f64>() / logs.len() as f64).exp()
        }
    };
    let qm = |q| QuantityMse {
        interp: gm(q, Region::Interp),
        extrap: gm(q, Region::Extrap),
    };
    MseTable {
        x: qm(Quantity::X),
        v: qm(Quantity::V),
        a: qm(Quantity::A),
    }
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    /// Improvement factor of `L_H` over training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improvement_factor: Option<f64>,
    pub hessian: Option<HessianErrorStats>,
    /// MSE table per model or population.
    pub mse: BTreeMap<String, MseTable>,
    pub welch: Vec<MseComparison>,
    pub counts: BTreeMap<String, usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{MlpParams, SymMatrixHead};
    use crate::rng::{stream, Stream};
    use crate::systems::{clean_trajectories, AnalyticMetric, InitialConditions, System};
    use crate::training::{Regime, TrainConfig};

    fn oscillator() -> SystemSpec {
        SystemSpec::oscillator(
            1.0,
            0.0,
            InitialConditions::AbsVelocity {
                x_mean: 1.0,
                x_std: 0.1,
                v_scale: 0.1,
            },
        )
    }

    fn starts(spec: &SystemSpec, count: usize) -> Vec<State> {
        let mut rng = stream(8, Stream::TestSet);
        (0..count).map(|_| spec.sample_initial(&mut rng).unwrap()).collect()
    }

    #[test]
    fn grid_layout() {
        let (grid, split) = evaluation_grid(1.0, 7).unwrap();
        assert_eq!(split, 60);
        assert_eq!(grid.times().len(), 121);
        assert_eq!(grid.times()[split], 1.0);
        assert!((grid.times()[120] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_model_hits_integrator_floor() {
        let spec = oscillator();
        let s = starts(&spec, 5);
        let v0 = Tensor::new(5, 2, s.iter().flat_map(|s| s.v.clone()).collect());
        let m = trajectory_mse(&PerRow(&spec.system), v0, &spec, &s, 7).unwrap();
        assert!(!m.diverged);
        assert!(m.x.interp < 1e-10, "{m:?}");
        assert!(m.x.extrap < 1e-10 && m.v.interp < 1e-10 && m.a.extrap < 1e-10, "{m:?}");
    }

    #[test]
    fn untrained_model_is_far_off() {
        let spec = oscillator();
        let s = starts(&spec, 5);
        let cfg = TrainConfig {
            regime: Regime::LnodeBaseline,
            ..Default::default()
        };
        let model = LnodeModel::init(2, &cfg).unwrap();
        let m = model_mse(&model, &spec, &s, 7).unwrap();
        assert!(m.x.interp > 1e-2 && m.a.interp > 1.0, "{m:?}");
    }

    #[test]
    fn divergence_is_flagged() {
        let spec = oscillator();
        let s = starts(&spec, 2);
        let v0 = Tensor::zeros(2, 2);
        // Blows up only after the training window.
        let rhs = |t: f64, x: &Tensor, _: &Tensor| Ok(x.map_values(|v| if t > 1.2 { 1e9 * v } else { 0.0 }));
        let m = trajectory_mse(&rhs, v0, &spec, &s, 7).unwrap();
        assert!(m.diverged);
        assert!(m.x.interp.is_finite() && m.x.extrap.is_infinite());
    }

    #[test]
    fn hessian_error_of_exact_and_scaled_metric() {
        let spec = SystemSpec::kepler(1.0, 1.0, 0.1, 0.2, 0.05);
        let trajs = clean_trajectories(&spec, 4, 6, 3).unwrap();
        let exact = hessian_error(&AnalyticMetric(&spec.system), &spec, &trajs).unwrap();
        assert_eq!(exact.median, 0.0);
        assert!((exact.c_star - 1.0).abs() < 1e-12);
        assert_eq!(exact.count, 4 * 6 * 3);

        let douglas = SystemSpec::douglas(
            0.0,
            InitialConditions::Gaussian {
                x_mean: 0.0,
                x_std: 1.0,
                v_mean: 0.0,
                v_std: 1.0,
            },
        );
        let head = SymMatrixHead::new(MlpParams::zeros(&[4, 2, 3]).unwrap(), 2, false).unwrap();
        assert!(matches!(
            hessian_error(&head, &douglas, &trajs),
            Err(Error::NotLagrangian)
        ));
        let _ = System::Douglas { xi: 0.0 };
    }

    #[test]
    fn identical_populations_give_unit_ratio() {
        let m = |s: f64| ModelMse {
            x: QuantityMse { interp: s, extrap: 2.0 * s },
            v: QuantityMse { interp: s, extrap: 3.0 * s },
            a: QuantityMse { interp: s, extrap: 4.0 * s },
            diverged: false,
        };
        let pop = vec![m(0.1), m(0.2), m(0.4)];
        for c in compare_populations(&pop, &pop).unwrap() {
            let w = c.welch.unwrap();
            assert!((w.ratio - 1.0).abs() < 1e-15);
        }
        let single = compare_populations(&pop[..1], &pop).unwrap();
        assert!(single.iter().all(|c| c.welch.is_none() && c.mean_log_a.is_finite()));

        let mut with_inf = pop.clone();
        with_inf.push(ModelMse {
            diverged: true,
            ..m(f64::INFINITY)
        });
        let c = compare_populations(&with_inf, &pop).unwrap();
        assert!(c.iter().all(|c| c.excluded_a == 1 && c.n_a == 3));
    }
}
