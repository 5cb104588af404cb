use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectified Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// While the variance estimate is not yet rectifiable, apply the plain
    /// bias-corrected momentum step (`true`) or leave the parameters alone
    /// and only accumulate moments (`false`).
    #[serde(default = "yes")]
    pub momentum_warmup: bool,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl RAdam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        RAdam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum_warmup: true,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.beta2) - 1.0
    }

    /// Length of the approximated simple moving average at step `t ≥ 1`.
    pub fn rho(&self, t: u64) -> f64 {
        let b2t = self.beta2.powi(t as i32);
        self.rho_inf() - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Whether the variance rectification is applied at step `t`.
    pub fn rectified(&self, t: u64) -> bool {
        self.rho(t) > 4.0
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let t = self.step;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powi(t as i32);
        let bias2 = 1.0 - b2.powi(t as i32);
        let rho = self.rho(t);
        let rect = if rho > 4.0 {
            let ri = self.rho_inf();
            Some(((rho - 4.0) * (rho - 2.0) * ri / ((ri - 4.0) * (ri - 2.0) * rho)).sqrt())
        } else {
            None
        };
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / bias1;
            let update = match rect {
                Some(r) => {
                    let v_hat = (self.v[i] / bias2).sqrt();
                    r * m_hat / (v_hat + self.eps)
                }
                None if self.momentum_warmup => m_hat,
                None => 0.0,
            };
            params[i] -= self.lr * update;
        }
        Ok(())
    }
}

fn yes() -> bool {
    true
}

pub fn grad_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` to norm `c` if it exceeds `c`. Returns the norm before
/// clipping.
pub fn clip_grad_norm(grads: &mut [f64], c: f64) -> f64 {
    assert!(c > 0.0, "clip threshold must be positive");
    let norm = grad_norm(grads);
    if norm > c {
        let s = c / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Reduce-on-plateau learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub threshold: f64,
    pub min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl LrSchedule {
    pub fn new(lr0: f64) -> Result<Self> {
        if !(1e-4..=1e-1).contains(&lr0) {
            return Err(Error::Config(format!("initial learning rate {lr0} outside [1e-4, 1e-1]")));
        }
        Ok(LrSchedule {
            lr: lr0,
            patience: 25,
            factor: 0.5,
            threshold: 1e-4,
            min_lr: 1e-4,
            best: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    /// Feeds one epoch loss; returns the learning rate for the next epoch.
    pub fn plateau_update(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = RAdam::new(3, 0.05);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..10 {
            opt.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(opt.step_count(), 10);
    }

    #[test]
    fn first_four_steps_skip_rectification() {
        let opt = RAdam::new(1, 0.1);
        for t in 1..=4 {
            assert!(!opt.rectified(t), "step {t}");
        }
        assert!(opt.rectified(5));
        assert!((opt.rho(1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn momentum_branch_matches_hand_update() {
        let mut opt = RAdam::new(1, 0.1);
        let mut w = vec![1.0];
        opt.step(&mut w, &[2.0]).unwrap();
        // m̂ = g at the first step.
        assert!((w[0] - (1.0 - 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn warmup_without_momentum_step_holds_params() {
        let mut opt = RAdam::new(1, 0.1);
        opt.momentum_warmup = false;
        let mut w = vec![1.0];
        for _ in 0..4 {
            opt.step(&mut w, &[1e6]).unwrap();
        }
        assert_eq!(w[0], 1.0);
        opt.step(&mut w, &[1e6]).unwrap();
        // Rectified steps move by at most about lr per coordinate.
        assert!(w[0] < 1.0 && w[0] > 0.9);
    }

    /// Reference loop written from the update equations.
    fn reference_quadratic(steps: usize) -> f64 {
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let (mut w, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=steps as i32 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let rho = rho_inf - 2.0 * t as f64 * b2.powi(t) / (1.0 - b2.powi(t));
            if rho > 4.0 {
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                w -= lr * r * m_hat / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            } else {
                w -= lr * m_hat;
            }
        }
        w
    }

    #[test]
    fn converges_on_quadratic() {
        let mut opt = RAdam::new(1, 0.1);
        let mut w = vec![1.0];
        for _ in 0..200 {
            let g = [2.0 * w[0]];
            opt.step(&mut w, &g).unwrap();
        }
        assert!(w[0].abs() < 1e-2, "w = {}", w[0]);
        assert!((w[0] - reference_quadratic(200)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut opt = RAdam::new(2, 0.1);
        let mut p = vec![0.0, 0.0];
        assert!(opt.step(&mut p, &[1.0, f64::NAN]).is_err());
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![0.006, 0.008];
        clip_grad_norm(&mut g, 0.05);
        assert_eq!(g, vec![0.006, 0.008]);
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 0.05), 5.0);
        assert!((g[0] - 0.03).abs() < 1e-15 && (g[1] - 0.04).abs() < 1e-15);
        let mut g = vec![0.0; 4];
        clip_grad_norm(&mut g, 0.05);
        assert_eq!(g, vec![0.0; 4]);
    }

    #[test]
    fn plateau_examples() {
        let mut s = LrSchedule::new(0.07).unwrap();
        for e in 0..200 {
            s.plateau_update(1.0 / (e + 1) as f64);
        }
        assert_eq!(s.lr, 0.07);

        let mut s = LrSchedule::new(0.07).unwrap();
        for _ in 0..s.patience + 1 {
            s.plateau_update(0.5);
        }
        assert_eq!(s.lr, 0.035);

        let mut s = LrSchedule::new(1e-4).unwrap();
        for _ in 0..100 {
            s.plateau_update(0.5);
        }
        assert_eq!(s.lr, 1e-4);
        assert!(LrSchedule::new(0.2).is_err());
    }

    proptest! {
        #[test]
        fn clipping_never_increases_norm(g in prop::collection::vec(-10f64..10.0, 1..20), c in 1e-3f64..5.0) {
            let mut clipped = g.clone();
            let before = clip_grad_norm(&mut clipped, c);
            let after = grad_norm(&clipped);
            prop_assert!(after <= before + 1e-15);
            if before > c {
                prop_assert!(after <= c + 1e-12);
            }
        }

        #[test]
        fn radam_is_reproducible(g in prop::collection::vec(-1f64..1.0, 1..10)) {
            let run = || {
                let mut opt = RAdam::new(g.len(), 0.01);
                let mut p = vec![0.5; g.len()];
                for _ in 0..8 {
                    opt.step(&mut p, &g).unwrap();
                }
                p
            };
            let (a, b) = (run(), run());
            prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
