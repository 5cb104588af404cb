//! Training loops.
//!
//! - [`train_metric`]: fits only the metric network `g` so that a fixed,
//!   known acceleration satisfies the Helmholtz conditions on supplied
//!   `(x, ẋ)` samples.
//! - [`train_lnode`]: fits a second-order neural ODE `(f, g, v0)` to
//!   positional data with `L_tot = L_R + L_H` (or `L_R` alone for the
//!   baseline).
//!
//! In the joint loop the two losses are recorded on separate tapes. The
//! rollout tape carries `f` and `v0` and yields `L_R`; the Helmholtz tape
//! carries `f` and `g` and sees the predicted states only as constants, so
//! `L_H` is never differentiated through the trajectory. `∇_f L_H` is
//! clipped to `c1` before it is added to `∇_f L_R`.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalstats::smooth_curve;
use crate::helmholtz::{loss_batch, lagrangianity_report, residuals_batch, BatchF, REPORT_EMA_ALPHA};
use crate::nets::{
    accel_batch, accel_partials_batch, clip_grad_norm, layer_widths, metric_batch, AccelNet, LrSchedule, MlpParams,
    RAdam, SymMatrixHead, F_HIDDEN, G_HIDDEN, V0_HIDDEN,
};
use crate::numcore::{jacobians_of_f, Acceleration, FPartials, Tape, Tensor, TensorLike};
use crate::odesolve::{integrate_batch, SolveGrid, DEFAULT_SUBSTEPS};
use crate::rng::{stream, substream, Stream};
use crate::systems::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    MetricOnly,
    LnodeRegularized,
    LnodeBaseline,
}

/// Hidden-layer widths of the three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub f_hidden: Vec<usize>,
    pub g_hidden: Vec<usize>,
    pub v0_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            f_hidden: F_HIDDEN.to_vec(),
            g_hidden: G_HIDDEN.to_vec(),
            v0_hidden: V0_HIDDEN.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub batch_size: usize,
    pub lr0: f64,
    pub epochs: usize,
    /// Norm bound for `∇_f L_H`.
    pub c1: f64,
    /// Feed `t` to `g`. In the joint regimes `f` gets `t` as well.
    pub time_dependent_g: bool,
    /// Grow the set of fitted observation times during the first half of
    /// training.
    pub progressive: bool,
    /// RK4 substeps per observation interval in the rollout.
    pub substeps: usize,
    /// Take plain momentum steps during RAdam's first, unrectified steps.
    pub momentum_warmup: bool,
    pub seed: u64,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::LnodeRegularized,
            batch_size: 128,
            lr0: 0.07,
            epochs: 100,
            c1: 0.05,
            time_dependent_g: false,
            progressive: true,
            substeps: DEFAULT_SUBSTEPS,
            momentum_warmup: false,
            seed: 0,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    fn optimizer(&self, num_params: usize) -> RAdam {
        let mut opt = RAdam::new(num_params, self.lr0);
        opt.momentum_warmup = self.momentum_warmup;
        opt
    }

    pub fn validate(&self) -> Result<()> {
        if !(1e-4..=1e-1).contains(&self.lr0) {
            return Err(Error::Config(format!("lr0 = {} outside [1e-4, 1e-1]", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.c1 > 0.0 && self.c1.is_finite()) {
            return Err(Error::Config(format!("c1 = {} must be positive", self.c1)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        let arch = &self.architecture;
        for (name, hidden) in [("f", &arch.f_hidden), ("g", &arch.g_hidden), ("v0", &arch.v0_hidden)] {
            if hidden.contains(&0) {
                return Err(Error::Config(format!("{name}_hidden contains a zero width")));
            }
        }
        Ok(())
    }
}

/// Number of leading observation times fitted at `epoch`.
///
/// Starts at `max(3, n_t / 6)` and grows linearly to `n_t`, reached once
/// half of the epochs have passed.
pub fn progressive_schedule(epoch: usize, total_epochs: usize, n_t: usize) -> usize {
    assert!(n_t >= 2, "need at least two observation times");
    let start = (n_t / 6).max(3).min(n_t);
    let half = total_epochs as f64 / 2.0;
    let e = epoch as f64;
    if e >= half {
        return n_t;
    }
    start + ((n_t - start) as f64 * e / half).floor() as usize
}

/// Per-epoch loss traces.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub l_r: Vec<f64>,
    pub l_h: Vec<f64>,
    pub l_tot: Vec<f64>,
    pub lr: Vec<f64>,
    /// Batch-level `L_H`, the series the improvement factor is computed on.
    pub step_l_h: Vec<f64>,
    pub skipped_batches: Vec<usize>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl LossCurves {
    pub fn epochs(&self) -> usize {
        self.l_tot.len()
    }

    pub fn smoothed_l_r(&self) -> Vec<f64> {
        smooth_curve(&self.l_r, REPORT_EMA_ALPHA)
    }

    pub fn smoothed_l_h(&self) -> Vec<f64> {
        smooth_curve(&self.l_h, REPORT_EMA_ALPHA)
    }

    pub fn smoothed_l_tot(&self) -> Vec<f64> {
        smooth_curve(&self.l_tot, REPORT_EMA_ALPHA)
    }

    /// Smoothed first over smoothed last batch `L_H`.
    pub fn improvement_factor(&self) -> f64 {
        if self.step_l_h.is_empty() {
            return f64::NAN;
        }
        lagrangianity_report(&self.step_l_h)
    }

    /// `epoch,L_R,L_H,L_tot,lr` with one row per completed epoch.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "L_R", "L_H", "L_tot", "lr"])?;
        for e in 0..self.epochs() {
            w.write_record([
                e.to_string(),
                self.l_r[e].to_string(),
                self.l_h[e].to_string(),
                self.l_tot[e].to_string(),
                self.lr[e].to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    fn push_epoch(&mut self, l_r: f64, l_h: f64, lr: f64, skipped: usize) {
        self.l_r.push(l_r);
        self.l_h.push(l_h);
        self.l_tot.push(l_r + l_h);
        self.lr.push(lr);
        self.skipped_batches.push(skipped);
    }
}

/// Snapshot handed to the epoch callback.
pub struct EpochSummary<'a> {
    pub epoch: usize,
    pub total_epochs: usize,
    pub l_r: f64,
    pub l_h: f64,
    pub l_tot: f64,
    /// Learning rate that was used during this epoch.
    pub lr: f64,
    pub optimizer_step: u64,
    pub nets: Vec<(&'static str, &'a MlpParams)>,
}

/// Called after every epoch; an error stops training.
pub type EpochCallback<'a> = dyn FnMut(&EpochSummary<'_>) -> Result<()> + 'a;

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn shuffled(len: usize, rng: &mut crate::rng::Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
}

fn apply_step(params: &mut MlpParams, opt: &mut RAdam, grads: &[f64]) -> Result<()> {
    let mut flat = params.to_flat();
    opt.step(&mut flat, grads)?;
    params.set_flat(&flat)
}

/// One `(t, x, ẋ)` sample with the partials of the known acceleration.
#[derive(Debug, Clone)]
struct MetricSample {
    t: f64,
    x: Vec<f64>,
    v: Vec<f64>,
    fp: FPartials,
}

fn column_of(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

/// `L_H` and its gradient over the metric parameters for samples of a known
/// acceleration.
fn metric_step(head: &SymMatrixHead, samples: &[&MetricSample]) -> Result<(f64, Vec<f64>)> {
    let n = head.n();
    let tape = Tape::new();
    let g = head.mlp.bind_tape(&tape);
    let t = tape.leaf(Tensor::column(samples.iter().map(|s| s.t).collect()));
    let x = tape.leaf(column_of(&samples.iter().map(|s| s.x.as_slice()).collect::<Vec<_>>()));
    let v = tape.leaf(column_of(&samples.iter().map(|s| s.v.as_slice()).collect::<Vec<_>>()));
    let f = tape.leaf(column_of(&samples.iter().map(|s| s.fp.f.as_slice()).collect::<Vec<_>>()));
    let parts: Vec<&FPartials> = samples.iter().map(|s| &s.fp).collect();
    let bf = BatchF::from_partials(&parts, |m| tape.leaf(m));
    let bg = metric_batch(&g, n, head.time_dependent(), &t, &x, &v, &f);
    let loss = loss_batch(&residuals_batch(&bg, &bf));
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::NonFinite("L_H".into()));
    }
    Ok((value, g.flat_grad(&tape.gradients(loss))))
}

/// Result of [`train_metric`].
#[derive(Debug, Clone)]
pub struct MetricRun {
    pub head: SymMatrixHead,
    pub curves: LossCurves,
    pub optimizer_step: u64,
}

/// Fits `g` to a known acceleration on the `(x, ẋ)` samples of `data`.
pub fn train_metric<A: Acceleration>(
    sys: &A,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut EpochCallback<'_>,
) -> Result<MetricRun> {
    cfg.validate()?;
    let n = sys.dim();
    if data.dim() != n {
        return Err(Error::shape(format!("dataset has dimension {}, system {n}", data.dim())));
    }
    let mut samples = Vec::new();
    for traj in &data.trajectories {
        let vs = traj
            .v
            .as_ref()
            .ok_or_else(|| Error::Config("metric training needs velocities in the dataset".into()))?;
        for ((&t, x), v) in traj.times.iter().zip(&traj.x).zip(vs) {
            let fp = jacobians_of_f(sys, t, x, v)?;
            samples.push(MetricSample {
                t,
                x: x.clone(),
                v: v.clone(),
                fp,
            });
        }
    }

    let mut head = SymMatrixHead::init(
        n,
        &cfg.architecture.g_hidden,
        cfg.time_dependent_g,
        &mut substream(cfg.seed, Stream::Init, 2),
    )?;
    let mut opt = cfg.optimizer(head.mlp.num_params());
    let mut sched = LrSchedule::new(cfg.lr0)?;
    let mut batching = stream(cfg.seed, Stream::Batching);
    let mut curves = LossCurves::default();
    let clock = Instant::now();

    for epoch in 0..cfg.epochs {
        let order = shuffled(samples.len(), &mut batching);
        let mut batch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&MetricSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, grad) = metric_step(&head, &batch)?;
            apply_step(&mut head.mlp, &mut opt, &grad)?;
            batch_losses.push(loss);
            curves.step_l_h.push(loss);
        }
        let l_h = mean(&batch_losses);
        let lr = opt.lr;
        curves.push_epoch(0.0, l_h, lr, 0);
        opt.lr = sched.plateau_update(l_h);
        on_epoch(&EpochSummary {
            epoch,
            total_epochs: cfg.epochs,
            l_r: 0.0,
            l_h,
            l_tot: l_h,
            lr,
            optimizer_step: opt.step_count(),
            nets: vec![("g", &head.mlp)],
        })?;
    }
    curves.wall_clock_secs = clock.elapsed().as_secs_f64();
    Ok(MetricRun {
        head,
        curves,
        optimizer_step: opt.step_count(),
    })
}

/// Networks of a second-order neural ODE with its Helmholtz metric.
#[derive(Debug, Clone, PartialEq)]
pub struct LnodeModel {
    pub f: AccelNet,
    pub g: Option<SymMatrixHead>,
    pub v0: MlpParams,
}

impl LnodeModel {
    pub fn init(n: usize, cfg: &TrainConfig) -> Result<Self> {
        let arch = &cfg.architecture;
        let td = cfg.time_dependent_g && cfg.regime == Regime::LnodeRegularized;
        let f = AccelNet::init(n, &arch.f_hidden, td, &mut substream(cfg.seed, Stream::Init, 1))?;
        let g = match cfg.regime {
            Regime::LnodeRegularized => Some(SymMatrixHead::init(
                n,
                &arch.g_hidden,
                td,
                &mut substream(cfg.seed, Stream::Init, 2),
            )?),
            _ => None,
        };
        let v0 = MlpParams::init(
            &layer_widths(n, &arch.v0_hidden, n),
            &mut substream(cfg.seed, Stream::Init, 3),
        )?;
        Ok(LnodeModel { f, g, v0 })
    }

    /// Reassembles a model from network parameters, e.g. loaded checkpoints.
    pub fn from_parts(
        n: usize,
        cfg: &TrainConfig,
        f: MlpParams,
        g: Option<MlpParams>,
        v0: MlpParams,
    ) -> Result<Self> {
        let td = cfg.time_dependent_g && cfg.regime == Regime::LnodeRegularized;
        let g = match (cfg.regime, g) {
            (Regime::LnodeRegularized, Some(g)) => Some(SymMatrixHead::new(g, n, td)?),
            (Regime::LnodeRegularized, None) => return Err(Error::Config("regularized model needs g".into())),
            _ => None,
        };
        if v0.widths().first() != Some(&n) || v0.widths().last() != Some(&n) {
            return Err(Error::shape(format!("v0 network must map dimension {n} to {n}")));
        }
        Ok(LnodeModel {
            f: AccelNet::new(f, n, td)?,
            g,
            v0,
        })
    }

    pub fn dim(&self) -> usize {
        self.f.dim()
    }
}

/// Observed positions of a batch: `x[k]` is `[B, n]` at observation `k`.
#[derive(Debug, Clone)]
pub struct BatchObservations {
    pub x: Vec<Tensor>,
}

impl BatchObservations {
    pub fn gather(data: &Dataset, indices: &[usize]) -> Self {
        let n_t = data.times().len();
        let x = (0..n_t)
            .map(|k| {
                let rows: Vec<Vec<f64>> = indices.iter().map(|&i| data.trajectories[i].x[k].clone()).collect();
                Tensor::from_rows(&rows)
            })
            .collect();
        BatchObservations { x }
    }

    pub fn batch_size(&self) -> usize {
        self.x[0].rows()
    }
}

/// `L_R` over the first `active` observations and its gradients.
#[derive(Debug, Clone)]
pub struct RegressionStep {
    pub loss: f64,
    pub grad_f: Vec<f64>,
    pub grad_v0: Vec<f64>,
    /// Predicted states at the active observations, `[B, n]` each.
    pub x: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Rolls out the model from the observed first positions and compares with
/// the observations `1..active`.
pub fn regression_step(
    model: &LnodeModel,
    obs: &BatchObservations,
    grid: &SolveGrid,
    active: usize,
) -> Result<RegressionStep> {
    let b = obs.batch_size();
    let n = model.dim();
    let tape = Tape::new();
    let f = model.f.mlp.bind_tape(&tape);
    let nn = model.v0.bind_tape(&tape);
    let x0 = tape.leaf(obs.x[0].clone());
    let v0 = nn.forward(&x0);
    let td = model.f.time_dependent();
    let rhs = |t: f64, x: &_, v: &_| {
        let tc = TensorLike::lift(x, Tensor::full(b, 1, t));
        Ok(accel_batch(&f, td, &tc, x, v))
    };
    let traj = integrate_batch(&rhs, x0, v0, grid, Some(active))?;
    let mut sse = None;
    for k in 1..traj.x.len() {
        let err = traj.x[k].sub(&tape.leaf(obs.x[k].clone())).square().sum();
        sse = Some(match sse {
            None => err,
            Some(acc) => TensorLike::add(&acc, &err),
        });
    }
    let count = (b * n * (traj.x.len() - 1)) as f64;
    let loss = sse.expect("at least two active observations").scale(1.0 / count);
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::NonFinite("L_R".into()));
    }
    let grads = tape.gradients(loss);
    Ok(RegressionStep {
        loss: value,
        grad_f: f.flat_grad(&grads),
        grad_v0: nn.flat_grad(&grads),
        x: traj.x.iter().map(|x| x.value()).collect(),
        v: traj.v.iter().map(|v| v.value()).collect(),
    })
}

/// States at which `L_H` is evaluated; constants for differentiation.
#[derive(Debug, Clone)]
pub struct HelmholtzPoints {
    /// `[P, 1]`
    pub t: Tensor,
    /// `[P, n]`
    pub x: Tensor,
    pub v: Tensor,
}

impl HelmholtzPoints {
    /// Stacks per-observation `[B, n]` states taken at `times`.
    pub fn stack(times: &[f64], x: &[Tensor], v: &[Tensor]) -> Self {
        let mut t_col = Vec::new();
        let mut x_rows = Vec::new();
        let mut v_rows = Vec::new();
        for (k, (xk, vk)) in x.iter().zip(v).enumerate() {
            for r in 0..xk.rows() {
                t_col.push(times[k]);
                x_rows.push(xk.row(r).to_vec());
                v_rows.push(vk.row(r).to_vec());
            }
        }
        HelmholtzPoints {
            t: Tensor::column(t_col),
            x: Tensor::from_rows(&x_rows),
            v: Tensor::from_rows(&v_rows),
        }
    }

    pub fn len(&self) -> usize {
        self.t.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `L_H` of a learned acceleration and its gradients over `f` and `g`.
#[derive(Debug, Clone)]
pub struct HelmholtzStep {
    pub loss: f64,
    pub grad_f: Vec<f64>,
    pub grad_g: Vec<f64>,
}

pub fn helmholtz_step(f: &AccelNet, g: &SymMatrixHead, pts: &HelmholtzPoints) -> Result<HelmholtzStep> {
    let n = f.dim();
    let tape = Tape::new();
    let fb = f.mlp.bind_tape(&tape);
    let gb = g.mlp.bind_tape(&tape);
    let t = tape.leaf(pts.t.clone());
    let x = tape.leaf(pts.x.clone());
    let v = tape.leaf(pts.v.clone());
    let (value, bf) = accel_partials_batch(&fb, n, f.time_dependent(), &t, &x, &v);
    let bg = metric_batch(&gb, n, g.time_dependent(), &t, &x, &v, &value);
    let loss = loss_batch(&residuals_batch(&bg, &bf));
    let l = loss.item();
    if !l.is_finite() {
        return Err(Error::NonFinite("L_H".into()));
    }
    let grads = tape.gradients(loss);
    Ok(HelmholtzStep {
        loss: l,
        grad_f: fb.flat_grad(&grads),
        grad_g: gb.flat_grad(&grads),
    })
}

/// Combined update of one batch.
#[derive(Debug, Clone)]
pub struct LnodeStep {
    pub l_r: f64,
    pub l_h: Option<f64>,
    pub grad_f: Vec<f64>,
    pub grad_g: Option<Vec<f64>>,
    pub grad_v0: Vec<f64>,
    /// `‖∇_f L_H‖` before clipping.
    pub grad_f_h_norm: Option<f64>,
    /// Number of points `g` was evaluated at.
    pub g_points: usize,
}

/// Losses and routed gradients of one batch, `∇_f L_H` clipped to `c1`.
pub fn lnode_step(
    model: &LnodeModel,
    obs: &BatchObservations,
    grid: &SolveGrid,
    active: usize,
    c1: f64,
) -> Result<LnodeStep> {
    let reg = regression_step(model, obs, grid, active)?;
    let mut grad_f = reg.grad_f;
    let Some(g) = &model.g else {
        return Ok(LnodeStep {
            l_r: reg.loss,
            l_h: None,
            grad_f,
            grad_g: None,
            grad_v0: reg.grad_v0,
            grad_f_h_norm: None,
            g_points: 0,
        });
    };
    let pts = HelmholtzPoints::stack(grid.times(), &reg.x, &reg.v);
    let mut hs = helmholtz_step(&model.f, g, &pts)?;
    let norm = clip_grad_norm(&mut hs.grad_f, c1);
    for (a, b) in grad_f.iter_mut().zip(&hs.grad_f) {
        *a += b;
    }
    Ok(LnodeStep {
        l_r: reg.loss,
        l_h: Some(hs.loss),
        grad_f,
        grad_g: Some(hs.grad_g),
        grad_v0: reg.grad_v0,
        grad_f_h_norm: Some(norm),
        g_points: pts.len(),
    })
}

/// Result of [`train_lnode`].
#[derive(Debug, Clone)]
pub struct LnodeRun {
    pub model: LnodeModel,
    pub curves: LossCurves,
    pub optimizer_step: u64,
    /// Total number of points the metric network was evaluated at.
    pub g_evaluations: u64,
}

/// Fits a second-order neural ODE to the positions in `data`.
pub fn train_lnode(data: &Dataset, cfg: &TrainConfig, on_epoch: &mut EpochCallback<'_>) -> Result<LnodeRun> {
    cfg.validate()?;
    if cfg.regime == Regime::MetricOnly {
        return Err(Error::Config("train_lnode needs an lnode regime".into()));
    }
    let n = data.dim();
    let n_t = data.times().len();
    let grid = SolveGrid::new(data.times().to_vec(), cfg.substeps)?;
    let mut model = LnodeModel::init(n, cfg)?;
    let mut opt_f = cfg.optimizer(model.f.mlp.num_params());
    let mut opt_v0 = cfg.optimizer(model.v0.num_params());
    let mut opt_g = model.g.as_ref().map(|g| cfg.optimizer(g.mlp.num_params()));
    let mut sched = LrSchedule::new(cfg.lr0)?;
    let mut batching = stream(cfg.seed, Stream::Batching);
    let mut curves = LossCurves::default();
    let mut g_evaluations = 0u64;
    let clock = Instant::now();

    for epoch in 0..cfg.epochs {
        let active = if cfg.progressive {
            progressive_schedule(epoch, cfg.epochs, n_t)
        } else {
            n_t
        };
        let order = shuffled(data.trajectories.len(), &mut batching);
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let (mut sum_r, mut sum_h, mut done, mut skipped) = (0.0, 0.0, 0usize, 0usize);
        for chunk in &chunks {
            let obs = BatchObservations::gather(data, chunk);
            let step = match lnode_step(&model, &obs, &grid, active, cfg.c1) {
                Ok(s) => s,
                Err(Error::Divergence { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            g_evaluations += step.g_points as u64;
            apply_step(&mut model.f.mlp, &mut opt_f, &step.grad_f)?;
            apply_step(&mut model.v0, &mut opt_v0, &step.grad_v0)?;
            if let (Some(g), Some(opt), Some(grad)) = (model.g.as_mut(), opt_g.as_mut(), &step.grad_g) {
                apply_step(&mut g.mlp, opt, grad)?;
            }
            sum_r += step.l_r;
            if let Some(l_h) = step.l_h {
                sum_h += l_h;
                curves.step_l_h.push(l_h);
            }
            done += 1;
        }
        if skipped * 10 > chunks.len() {
            return Err(Error::Aborted(format!(
                "epoch {epoch}: {skipped} of {} batches diverged",
                chunks.len()
            )));
        }
        let (l_r, l_h) = (sum_r / done as f64, sum_h / done as f64);
        let lr = opt_f.lr;
        curves.push_epoch(l_r, l_h, lr, skipped);
        let next = sched.plateau_update(l_r + l_h);
        opt_f.lr = next;
        opt_v0.lr = next;
        if let Some(opt) = opt_g.as_mut() {
            opt.lr = next;
        }
        let mut nets = vec![("f", &model.f.mlp), ("v0", &model.v0)];
        if let Some(g) = &model.g {
            nets.push(("g", &g.mlp));
        }
        on_epoch(&EpochSummary {
            epoch,
            total_epochs: cfg.epochs,
            l_r,
            l_h,
            l_tot: l_r + l_h,
            lr,
            optimizer_step: opt_f.step_count(),
            nets,
        })?;
    }
    curves.wall_clock_secs = clock.elapsed().as_secs_f64();
    Ok(LnodeRun {
        model,
        curves,
        optimizer_step: opt_f.step_count(),
        g_evaluations,
    })
}

/// Epoch callback that does nothing.
pub fn no_callback(_: &EpochSummary<'_>) -> Result<()> {
    Ok(())
}
