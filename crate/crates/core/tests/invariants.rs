use hlnode_core::evalstats::{hessian_error_from_pairs, welch_ratio};
use hlnode_core::helmholtz::{helmholtz_loss, residuals_at};
use hlnode_core::nets::{LrSchedule, SymMatrixHead};
use hlnode_core::numcore::{Mat, MetricField, Scalar};
use hlnode_core::rng::{stream, Stream};
use hlnode_core::systems::{generate_dataset, InitialConditions, System, SystemSpec};
use proptest::prelude::*;

struct Scaled<'a>(&'a SymMatrixHead, f64);

impl MetricField for Scaled<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn metric<S: Scalar>(&self, t: S, x: &[S], v: &[S]) -> hlnode_core::Result<Vec<S>> {
        Ok(self.0.metric(t, x, v)?.into_iter().map(|g| g.scale(self.1)).collect())
    }
}

fn head(seed: u64, time_dependent: bool) -> SymMatrixHead {
    SymMatrixHead::init(2, &[8, 8], time_dependent, &mut stream(seed, Stream::Init)).unwrap()
}

fn state() -> impl Strategy<Value = (f64, Vec<f64>, Vec<f64>)> {
    (
        0.0f64..1.0,
        prop::collection::vec(-2.0f64..2.0, 2),
        prop::collection::vec(-2.0f64..2.0, 2),
    )
}

fn system() -> impl Strategy<Value = System> {
    prop_oneof![
        (0.5f64..8.0, 0.5f64..8.0, 0.0f64..3.0).prop_map(|(a, b, g)| System::Oscillator {
            omega: [a, b],
            gamma: [g, 0.5 * g],
        }),
        (0.0f64..1.0).prop_map(|xi| System::Douglas { xi }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_head_is_symmetric(seed in 0u64..1000, td: bool, (t, x, v) in state()) {
        let g = head(seed, td).g_forward(t, &x, &v).unwrap();
        prop_assert!(g.is_finite());
        prop_assert_eq!(g.get(0, 1), g.get(1, 0));
    }

    #[test]
    fn residual_structure(seed in 0u64..1000, sys in system(), (t, x, v) in state()) {
        let r = residuals_at(&head(seed, true), &sys, t, &x, &v).unwrap();
        prop_assert!(r.lambda_min >= 0.0);
        for i in 0..2 {
            for j in 0..2 {
                prop_assert_eq!(r.r1.get(i, j), -r.r1.get(j, i));
                for k in 0..2 {
                    prop_assert_eq!(r.r3.get(i, j, k), -r.r3.get(i, k, j));
                }
            }
        }
    }

    #[test]
    fn helmholtz_loss_ignores_metric_scale(seed in 0u64..1000, sys in system(), c in 0.1f64..10.0, (t, x, v) in state()) {
        let g = head(seed, false);
        let base = helmholtz_loss(&[residuals_at(&g, &sys, t, &x, &v).unwrap()]);
        let scaled = helmholtz_loss(&[residuals_at(&Scaled(&g, c), &sys, t, &x, &v).unwrap()]);
        prop_assert!((base - scaled).abs() <= 1e-9 * base.max(1e-12), "{} vs {}", base, scaled);
    }

    #[test]
    fn plateau_schedule_stays_in_range(lr0 in 1e-4f64..=1e-1, losses in prop::collection::vec(0.0f64..10.0, 1..300)) {
        let mut s = LrSchedule::new(lr0).unwrap();
        for l in losses {
            let lr = s.plateau_update(l);
            prop_assert!((1e-4..=lr0).contains(&lr));
        }
    }

    #[test]
    fn hessian_error_percentiles_are_ordered(entries in prop::collection::vec((0.1f64..3.0, -1.0f64..1.0, 0.1f64..3.0, 0.5f64..2.0), 1..30)) {
        let pairs: Vec<(Mat, Mat)> = entries
            .iter()
            .map(|&(a, b, c, noise)| {
                let truth = Mat::from_rows(&[&[a, 0.0], &[0.0, c]]);
                let pred = Mat::from_rows(&[&[a * noise, b], &[b, c / noise]]);
                (pred, truth)
            })
            .collect();
        let h = hessian_error_from_pairs(&pairs).unwrap();
        prop_assert!(0.0 <= h.p20 && h.p20 <= h.median && h.median <= h.p80);
    }

    #[test]
    fn welch_interval_brackets_ratio(a in prop::collection::vec(-5f64..5.0, 2..12), b in prop::collection::vec(-5f64..5.0, 2..12)) {
        let w = welch_ratio(&a, &b).unwrap();
        prop_assert!(w.ci_low <= w.ratio && w.ratio <= w.ci_high);
    }

    #[test]
    fn datasets_share_one_time_grid(n_traj in 1usize..6, n_t in 2usize..8, seed in 0u64..100, supply: bool) {
        let spec = SystemSpec::oscillator(1.0, 0.5, InitialConditions::Gaussian { x_mean: 0.0, x_std: 1.0, v_mean: 0.0, v_std: 1.0 });
        let ds = generate_dataset(&spec, n_traj, n_t, 5.0, seed, supply).unwrap();
        prop_assert_eq!(ds.trajectories.len(), n_traj);
        prop_assert!(ds.times().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(ds.times()[0] >= 0.0 && ds.times()[n_t - 1] <= spec.window);
        for tr in &ds.trajectories {
            prop_assert_eq!(&tr.times, &ds.trajectories[0].times);
            prop_assert_eq!(tr.x.len(), n_t);
            prop_assert_eq!(tr.v.is_some(), supply);
            prop_assert!(tr.x.iter().flatten().all(|x| x.is_finite()));
        }
    }
}
