//! Mixed-geometry optimization.
//!
//! BiMap weights live on the Stiefel manifold and take a projected-gradient
//! step followed by a QR retraction. Every other parameter is Euclidean and
//! goes through Adam. A plateau scheduler halves all learning rates when the
//! validation loss stalls.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{qr_reduced, symmetrize, Mat};
use crate::spd::StiefelPoint;

pub const DEFAULT_STIEFEL_LR: f64 = 1e-2;
pub const DEFAULT_ADAM_LR: f64 = 1e-4;

/// Tangent-space projection `G − W sym(Wᵀ G)`.
pub fn stiefel_project_gradient(w: &StiefelPoint, g: &Mat) -> Result<Mat> {
    let wm = w.as_mat();
    if g.shape() != wm.shape() {
        return invalid(format!("stiefel projection: gradient {:?} vs weight {:?}", g.shape(), wm.shape()));
    }
    Ok(g - wm * symmetrize(&(wm.transpose() * g)))
}

/// One projected-gradient step with QR retraction. `eta == 0` returns `W` as is.
pub fn stiefel_step(w: &StiefelPoint, g: &Mat, eta: f64) -> Result<StiefelPoint> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return invalid(format!("stiefel step: invalid step size {eta}"));
    }
    let tangent = stiefel_project_gradient(w, g)?;
    if eta == 0.0 {
        return Ok(w.clone());
    }
    let moved = w.as_mat() - tangent * eta;
    let (q, _) = qr_reduced(&moved)?;
    Ok(StiefelPoint::new_unchecked(q))
}

/// Q factor of an `n×m` standard-normal matrix drawn from `seed`.
pub fn init_stiefel(n: usize, m: usize, seed: u64) -> Result<StiefelPoint> {
    if m == 0 || m > n {
        return invalid(format!("init_stiefel: need n >= m >= 1, got {n}x{m}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let a = Mat::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng));
        if let Ok((q, _)) = qr_reduced(&a) {
            return Ok(StiefelPoint::new_unchecked(q));
        }
    }
}

/// Riemannian SGD state for the Stiefel group (no momentum).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StiefelOptState {
    pub lr: f64,
}

impl StiefelOptState {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return invalid(format!("stiefel lr must be non-negative, got {lr}"));
        }
        Ok(Self { lr })
    }

    pub fn step(&self, weights: &mut [StiefelPoint], grads: &[Mat]) -> Result<()> {
        if weights.len() != grads.len() {
            return invalid("stiefel step: weight/gradient count mismatch");
        }
        for (w, g) in weights.iter_mut().zip(grads) {
            *w = stiefel_step(w, g, self.lr)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first_moment: Vec::new(), second_moment: Vec::new() }
    }

    /// Bias-corrected Adam update over a list of parameter tensors.
    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return invalid("adam: parameter/gradient count mismatch");
        }
        if self.first_moment.is_empty() && !params.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len() {
            return invalid("adam: state does not match parameter list");
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[i].len() {
                return invalid(format!("adam: shape mismatch in tensor {i}"));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Halves learning rates after `patience` epochs without strict improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return invalid(format!("scheduler factor must be in (0, 1), got {factor}"));
        }
        Ok(Self { factor, patience, min_delta: 0.0, best: None, bad_epochs: 0 })
    }

    /// Records one epoch's validation loss; returns `true` when the rates were cut.
    pub fn step(&mut self, val_loss: f64, lrs: &mut [f64]) -> bool {
        let improved = match self.best {
            None => true,
            Some(b) => val_loss < b - self.min_delta,
        };
        if improved {
            self.best = Some(val_loss);
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            for lr in lrs.iter_mut() {
                *lr *= self.factor;
            }
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spd::bimap_forward;
    use rand::Rng;

    #[test]
    fn normal_space_gradient_projects_to_zero() {
        let w = init_stiefel(5, 3, 1).unwrap();
        let s = symmetrize(&Mat::from_fn(3, 3, |i, j| (i + 2 * j) as f64));
        let g = w.as_mat() * s;
        assert!(stiefel_project_gradient(&w, &g).unwrap().norm() < 1e-12);
        let w2 = stiefel_step(&w, &g, 0.1).unwrap();
        assert!((w2.as_mat() - w.as_mat()).norm() < 1e-12);
    }

    #[test]
    fn projection_hand_example() {
        let w = StiefelPoint::new(Mat::from_row_slice(2, 1, &[1.0, 0.0])).unwrap();
        let g = Mat::from_row_slice(2, 1, &[3.0, 4.0]);
        let t = stiefel_project_gradient(&w, &g).unwrap();
        assert_eq!(t, Mat::from_row_slice(2, 1, &[0.0, 4.0]));
    }

    #[test]
    fn projection_is_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let w = init_stiefel(6, 3, rng.random()).unwrap();
            let g = Mat::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
            let t = stiefel_project_gradient(&w, &g).unwrap();
            assert!(symmetrize(&(w.as_mat().transpose() * t)).norm() < 1e-10);
        }
    }

    #[test]
    fn zero_step_and_qr_of_orthonormal() {
        let w = init_stiefel(5, 2, 3).unwrap();
        let g = Mat::from_element(5, 2, 1.0);
        assert_eq!(stiefel_step(&w, &g, 0.0).unwrap(), w);
        let (q, _) = qr_reduced(w.as_mat()).unwrap();
        assert!((q - w.as_mat()).norm() < 1e-12);
    }

    #[test]
    fn orthonormality_after_many_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = init_stiefel(8, 4, 5).unwrap();
        for _ in 0..1000 {
            let g = Mat::from_fn(8, 4, |_, _| rng.random_range(-1.0..1.0));
            w = stiefel_step(&w, &g, 0.05).unwrap();
        }
        assert!(w.orthonormality_error() < 1e-9);
    }

    #[test]
    fn init_stiefel_properties() {
        let a = init_stiefel(7, 3, 42).unwrap();
        let b = init_stiefel(7, 3, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.orthonormality_error() < 1e-12);
        let square = init_stiefel(4, 4, 1).unwrap();
        assert!((square.as_mat() * square.as_mat().transpose() - Mat::identity(4, 4)).norm() < 1e-12);
        assert!(init_stiefel(2, 3, 0).is_err());
    }

    #[test]
    fn descent_on_congruence_fit() {
        // min_W ‖Wᵀ A W − B‖² with fixed SPD A, B; halve η whenever the loss rises.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a0 = Mat::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let a = &a0 * a0.transpose() + Mat::identity(6, 6);
        let b = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let loss = |w: &StiefelPoint| (bimap_forward(&a, w).unwrap() - &b).norm_squared();
        let mut w = init_stiefel(6, 2, 7).unwrap();
        let mut eta = 0.05;
        let mut prev = loss(&w);
        let start = prev;
        for _ in 0..300 {
            let y = bimap_forward(&a, &w).unwrap();
            let dy = (y - &b) * 2.0;
            let (_, dw) = crate::spd::bimap_backward(&a, &w, &dy).unwrap();
            let mut candidate = stiefel_step(&w, &dw, eta).unwrap();
            while loss(&candidate) > prev {
                eta *= 0.5;
                candidate = stiefel_step(&w, &dw, eta).unwrap();
            }
            w = candidate;
            let cur = loss(&w);
            assert!(cur <= prev);
            prev = cur;
        }
        assert!(prev < 0.5 * start);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut adam = AdamState::new(1e-3);
        let mut p = vec![vec![1.0, -2.0, 0.5]];
        adam.step(&mut p, &[vec![0.0; 3]]).unwrap();
        assert_eq!(p[0], vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut adam = AdamState::new(1e-2);
        let mut p = vec![vec![1.0]];
        adam.step(&mut p, &[vec![3.0]]).unwrap();
        // m̂ = 3, v̂ = 9: update = lr·3/(3 + 1e-8).
        let expected = 1.0 - 1e-2 * 3.0 / (3.0 + 1e-8);
        assert!((p[0][0] - expected).abs() < 1e-15);
        assert!((p[0][0] - (1.0 - 1e-2)).abs() < 1e-10);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut adam = AdamState::new(1e-2);
        let mut p: Vec<Vec<f64>> = vec![vec![1.0]];
        let mut steps = 0;
        while p[0][0].abs() >= 1e-3 {
            let g = vec![vec![2.0 * p[0][0]]];
            adam.step(&mut p, &g).unwrap();
            steps += 1;
            assert!(steps <= 5000, "no convergence");
        }
    }

    #[test]
    fn adam_rejects_mismatch() {
        let mut adam = AdamState::new(1e-3);
        let mut p = vec![vec![1.0, 2.0]];
        assert!(adam.step(&mut p, &[vec![1.0]]).is_err());
    }

    #[test]
    fn scheduler_traces() {
        let mut s = PlateauScheduler::new(0.5, 4).unwrap();
        let mut lrs = [1e-2, 1e-4];
        for v in [5.0, 4.0, 3.0, 2.0] {
            assert!(!s.step(v, &mut lrs));
        }
        assert_eq!(lrs, [1e-2, 1e-4]);
        // Five epochs without strict improvement: cut once, on the fifth.
        let cuts: Vec<bool> = (0..5).map(|_| s.step(2.0, &mut lrs)).collect();
        assert_eq!(cuts, vec![false, false, false, false, true]);
        assert_eq!(lrs, [5e-3, 5e-5]);
        let mut prev = lrs;
        for i in 0..40 {
            s.step(if i % 7 == 0 { 1.0 / (i + 2) as f64 } else { 10.0 }, &mut lrs);
            assert!(lrs[0] <= prev[0] && lrs[1] <= prev[1]);
            prev = lrs;
        }
    }
}
