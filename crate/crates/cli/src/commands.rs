use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use hlnode_core::evalstats::{
    compare_populations, geometric_mean_mse, hessian_error, model_mse, EvalReport, MseComparison, MseTable,
};
use hlnode_core::nets::{load_checkpoint, save_checkpoint, write_atomic};
use hlnode_core::numcore::Acceleration;
use hlnode_core::odeparse::{parse, ParsedSystem};
use hlnode_core::systems::{
    generate_dataset_of, load_dataset, save_dataset, test_starts, test_trajectories, Dataset, DatasetMeta,
};
use hlnode_core::training::{train_lnode, train_metric, EpochSummary, LnodeModel, LossCurves, Regime};

use crate::config::{DataConfig, RunConfig};
use crate::CliError;

pub const CONFIG_FILE: &str = "config.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const REPORT_FILE: &str = "report.json";
pub const DATASET_META_FILE: &str = "dataset.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const DATASET_FILE: &str = "dataset.csv";

pub const PROBE_OUTPUT: &str = "probe-run";

const DIMENSION: usize = 2;

fn to_json<T: serde::Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(hlnode_core::Error::from)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    Ok(write_atomic(path, &to_json(value)?)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn parse_ode(cfg: &RunConfig) -> Result<Option<ParsedSystem>, CliError> {
    cfg.ode.as_deref().map(|src| parse(src, DIMENSION)).transpose().map_err(CliError::from)
}

fn build_dataset(cfg: &RunConfig, d: &DataConfig, ode: Option<&ParsedSystem>) -> Result<Dataset, CliError> {
    cfg.validate_data(d)?;
    let spec = d.spec();
    let mut ds = match ode {
        Some(sys) => generate_dataset_of(sys, &spec, d.n_traj, d.n_t, d.noise_pct, cfg.seed, d.supply_velocity)?,
        None => generate_dataset_of(&spec.system, &spec, d.n_traj, d.n_t, d.noise_pct, cfg.seed, d.supply_velocity)?,
    };
    ds.meta.ode = ode.map(|s| s.to_string());
    Ok(ds)
}

/// Writes `dataset.csv` and its sidecar into the output directory.
pub fn cmd_generate(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.output_dir()?;
    let d = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::Config("missing `data` section".into()))?;
    if d.n_traj == 0 {
        return Err(CliError::Config("n_traj must be at least 1".into()));
    }
    let ode = parse_ode(cfg)?;
    let ds = build_dataset(cfg, d, ode.as_ref())?;
    fs::create_dir_all(out)?;
    let path = out.join(DATASET_FILE);
    save_dataset(&ds, &path)?;
    println!(
        "wrote {}: n_traj {} n_t {} noise {}% seed {}",
        path.display(),
        ds.meta.n_traj,
        ds.meta.n_t,
        ds.meta.noise_pct,
        ds.meta.seed
    );
    Ok(path)
}

/// Runs `f` over `items` on at most `jobs` threads, keeping input order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R, CliError> + Sync,
) -> Result<Vec<R>, CliError> {
    let jobs = jobs.clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R, CliError>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub curves: LossCurves,
}

/// Trains `replicas` models; each lands in its own run directory.
pub fn cmd_train(cfg: &RunConfig, jobs: usize) -> Result<Vec<TrainOutcome>, CliError> {
    cfg.validate_for_training()?;
    let ode = parse_ode(cfg)?;
    let data = match (&cfg.data, &cfg.dataset) {
        (Some(d), _) => build_dataset(cfg, d, ode.as_ref())?,
        (None, Some(path)) => load_dataset(path)?,
        (None, None) => unreachable!("validated"),
    };
    let out = cfg.output_dir()?;
    let runs: Vec<RunConfig> = (0..cfg.replicas)
        .map(|i| {
            let mut run = cfg.clone();
            let replica = if cfg.replicas > 1 { i } else { cfg.replica };
            run.replica = replica;
            run.replicas = 1;
            if cfg.replicas > 1 {
                run.output = Some(out.join(format!("run_{i:03}")));
            }
            if let Some(t) = run.train.as_mut() {
                t.seed = cfg.seed.wrapping_add(replica as u64);
            }
            run
        })
        .collect();
    parallel_map(&runs, jobs, |run| train_one(run, &data, ode.as_ref()))
}

fn heartbeat(label: &str, s: &EpochSummary<'_>) {
    eprintln!(
        "[{label}] epoch {}/{} L_R {:.4e} L_H {:.4e} lr {:.3e}",
        s.epoch + 1,
        s.total_epochs,
        s.l_r,
        s.l_h,
        s.lr
    );
}

fn train_one(run: &RunConfig, data: &Dataset, ode: Option<&ParsedSystem>) -> Result<TrainOutcome, CliError> {
    let dir = run.output_dir()?.to_path_buf();
    let train = run.train_config()?;
    let ckpt = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt)?;
    write_json(&dir.join(CONFIG_FILE), run)?;
    write_json(&dir.join(DATASET_META_FILE), &data.meta)?;
    let label = dir.display().to_string();
    let mut on_epoch = |s: &EpochSummary<'_>| {
        heartbeat(&label, s);
        for (name, params) in &s.nets {
            save_checkpoint(&ckpt, name, params, s.optimizer_step, s.lr)?;
        }
        Ok(())
    };

    let mut report = EvalReport::default();
    let eval_count = run.eval.as_ref().map_or(100, |e| e.test_trajectories);
    let curves = match train.regime {
        Regime::MetricOnly => {
            let res = match ode {
                Some(sys) => metric_run(sys, data, run, &mut on_epoch)?,
                None => metric_run(&data.meta.spec.system, data, run, &mut on_epoch)?,
            };
            if ode.is_none() && data.meta.spec.system.is_lagrangian() {
                let spec = &data.meta.spec;
                let test = test_trajectories(spec, eval_count, data.meta.n_t, run.seed)?;
                report.hessian = Some(hessian_error(&res.head, spec, &test)?);
            }
            report.counts.insert("optimizer_steps".into(), res.optimizer_step as usize);
            res.curves
        }
        Regime::LnodeRegularized | Regime::LnodeBaseline => {
            let res = train_lnode(data, train, &mut on_epoch)?;
            let starts = test_starts(&data.meta.spec, eval_count, run.seed)?;
            let mse = model_mse(&res.model, &data.meta.spec, &starts, data.meta.n_t)?;
            report.mse.insert("model".into(), mse.into());
            report.counts.insert("diverged".into(), mse.diverged as usize);
            report.counts.insert("g_evaluations".into(), res.g_evaluations as usize);
            report.counts.insert("optimizer_steps".into(), res.optimizer_step as usize);
            res.curves
        }
    };
    if train.regime != Regime::LnodeBaseline {
        report.improvement_factor = Some(curves.improvement_factor());
    }
    report.counts.insert("epochs".into(), curves.epochs());
    report
        .counts
        .insert("skipped_batches".into(), curves.skipped_batches.iter().sum());
    report.counts.insert("test_trajectories".into(), eval_count);
    write_atomic(&dir.join(CURVES_FILE), curves.to_csv()?.as_bytes())?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(TrainOutcome { dir, report, curves })
}

fn metric_run<A: Acceleration>(
    sys: &A,
    data: &Dataset,
    run: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochSummary<'_>) -> hlnode_core::Result<()>,
) -> Result<hlnode_core::training::MetricRun, CliError> {
    Ok(train_metric(sys, data, run.train_config()?, on_epoch)?)
}

/// A trained neural ODE loaded back from its run directory.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub meta: DatasetMeta,
    pub model: LnodeModel,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun, CliError> {
    let config: RunConfig = read_json(&dir.join(CONFIG_FILE))?;
    let meta: DatasetMeta = read_json(&dir.join(DATASET_META_FILE))?;
    let train = config.train_config()?;
    if train.regime == Regime::MetricOnly {
        return Err(CliError::Config(format!("{} is a metric-only run", dir.display())));
    }
    let ckpt = dir.join(CHECKPOINT_DIR);
    let (f, _) = load_checkpoint(&ckpt, "f")?;
    let (v0, _) = load_checkpoint(&ckpt, "v0")?;
    let g = match train.regime {
        Regime::LnodeRegularized => Some(load_checkpoint(&ckpt, "g")?.0),
        _ => None,
    };
    let model = LnodeModel::from_parts(DIMENSION, train, f, g, v0)?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        config,
        meta,
        model,
    })
}

/// Compares a regularized population against a baseline population on
/// held-out trajectories and writes `report.json`.
pub fn cmd_eval(cfg: &RunConfig, jobs: usize) -> Result<EvalReport, CliError> {
    let out = cfg.output_dir()?;
    let ev = cfg
        .eval
        .as_ref()
        .ok_or_else(|| CliError::Config("missing `eval` section".into()))?;
    if ev.regularized.is_empty() && ev.baseline.is_empty() {
        return Err(CliError::Config("eval needs at least one run directory".into()));
    }
    if ev.test_trajectories == 0 {
        return Err(CliError::Config("test_trajectories must be at least 1".into()));
    }
    let all: Vec<PathBuf> = ev.regularized.iter().chain(&ev.baseline).cloned().collect();
    let loaded = all.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
    let first = &loaded[0].meta;
    for r in &loaded {
        if r.meta.ode.is_some() {
            return Err(CliError::Config(format!("{}: evaluation needs a built-in system", r.dir.display())));
        }
        if r.meta.spec != first.spec || r.meta.n_t != first.n_t {
            return Err(CliError::Config(format!(
                "{} was trained on a different system or time grid than {}",
                r.dir.display(),
                loaded[0].dir.display()
            )));
        }
    }
    let spec = &first.spec;
    let starts = test_starts(spec, ev.test_trajectories, cfg.seed)?;
    let mses = parallel_map(&loaded, jobs, |r| Ok(model_mse(&r.model, spec, &starts, first.n_t)?))?;
    let (reg, base) = mses.split_at(ev.regularized.len());

    let mut report = EvalReport::default();
    for (name, pop) in [("regularized", reg), ("baseline", base)] {
        report.counts.insert(name.into(), pop.len());
        report
            .counts
            .insert(format!("{name}_diverged"), pop.iter().filter(|m| m.diverged).count());
        if !pop.is_empty() {
            report.mse.insert(name.into(), geometric_mean_mse(pop));
        }
    }
    report.counts.insert("test_trajectories".into(), ev.test_trajectories);
    if !reg.is_empty() && !base.is_empty() {
        report.welch = compare_populations(reg, base)?;
    }
    fs::create_dir_all(out)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    print_table(&report.mse, &report.welch);
    Ok(report)
}

fn print_table(mse: &BTreeMap<String, MseTable>, welch: &[MseComparison]) {
    for (name, t) in mse {
        println!(
            "{name:<12} x {:.3e}/{:.3e}  v {:.3e}/{:.3e}  a {:.3e}/{:.3e}",
            t.x.interp, t.x.extrap, t.v.interp, t.v.extrap, t.a.interp, t.a.extrap
        );
    }
    if welch.is_empty() {
        return;
    }
    println!("{:<4}{:<8}{:>10}{:>10}{:>10}{:>8}{:>9}", "q", "region", "R", "ci_low", "ci_high", "t", "dof");
    for c in welch {
        let q = serde_json::to_value(c.quantity).map(|v| v.as_str().unwrap_or("?").to_string());
        let r = serde_json::to_value(c.region).map(|v| v.as_str().unwrap_or("?").to_string());
        let (q, r) = (q.unwrap_or_default(), r.unwrap_or_default());
        match &c.welch {
            Some(w) => println!(
                "{q:<4}{r:<8}{:>10.4}{:>10.4}{:>10.4}{:>8.3}{:>9.2}",
                w.ratio,
                w.ci_low,
                w.ci_high,
                w.t.unwrap_or(f64::NAN),
                w.dof.unwrap_or(f64::NAN)
            ),
            None => println!("{q:<4}{r:<8}{:>10}", "n/a"),
        }
    }
}

/// Parses an expression and fits a metric to it in one go.
pub fn cmd_probe(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let mut run = cfg.clone();
    let ode = run
        .ode
        .as_deref()
        .ok_or_else(|| CliError::Config("probe needs an expression (--ode)".into()))?;
    let parsed = parse(ode, DIMENSION)?;
    let train = run.train.get_or_insert_with(probe_train_config);
    train.regime = Regime::MetricOnly;
    train.seed = cfg.seed;
    train.time_dependent_g |= parsed.mentions_time();
    run.output.get_or_insert_with(|| PathBuf::from(PROBE_OUTPUT));
    if run.data.is_none() {
        run.data = Some(DataConfig {
            system: None,
            initial: hlnode_core::systems::InitialConditions::Gaussian {
                x_mean: 0.0,
                x_std: 1.0,
                v_mean: 0.0,
                v_std: 1.0,
            },
            window: 1.0,
            n_traj: 500,
            n_t: 10,
            noise_pct: 5.0,
            supply_velocity: true,
        });
    }
    run.validate_for_training()?;
    let data = build_dataset(&run, run.data.as_ref().expect("set above"), Some(&parsed))?;
    let outcome = train_one(&run, &data, Some(&parsed))?;
    let l_h = &outcome.curves.l_h;
    println!(
        "{parsed}\nL_H {:.4e} -> {:.4e}, improvement factor {:.3e}",
        l_h.first().copied().unwrap_or(f64::NAN),
        l_h.last().copied().unwrap_or(f64::NAN),
        outcome.curves.improvement_factor()
    );
    Ok(outcome)
}

/// Metric-only defaults for `probe`.
pub fn probe_train_config() -> hlnode_core::training::TrainConfig {
    hlnode_core::training::TrainConfig {
        regime: Regime::MetricOnly,
        lr0: 0.01,
        epochs: 100,
        ..Default::default()
    }
}
