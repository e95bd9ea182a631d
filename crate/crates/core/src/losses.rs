//! Training objectives: geodesic pose loss with orthonormality regularizers,
//! its Euler-angle counterpart, and the log-tangent Frobenius loss.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::codec::{check_rotation, euler_to_rotation, euler_to_rotation_backward, gram_schmidt_backward, gram_schmidt_so3, PoseParams6D};
use crate::error::{invalid, Result};
use crate::linalg::Mat;
use crate::spd::{log_eig_backward, log_eig_cached};

/// Margin keeping the arccos argument away from ±1.
pub const ACOS_CLAMP: f64 = 1e-7;
/// Default regularizer weight.
pub const DEFAULT_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rotation_geodesic: f64,
    pub translation_l2: f64,
    pub regularizer: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(rotation_geodesic: f64, translation_l2: f64, regularizer: f64, lambda: f64) -> Self {
        Self {
            rotation_geodesic,
            translation_l2,
            regularizer,
            total: rotation_geodesic + translation_l2 + lambda * regularizer,
            lambda,
        }
    }

    /// Loss that has only a total (log-tangent objective).
    pub fn total_only(total: f64) -> Self {
        Self { total, ..Self::default() }
    }

    /// Componentwise mean; `None` for an empty slice.
    pub fn mean(items: &[LossBreakdown]) -> Option<Self> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let mut acc = Self { lambda: items[0].lambda, ..Self::default() };
        for it in items {
            acc.rotation_geodesic += it.rotation_geodesic;
            acc.translation_l2 += it.translation_l2;
            acc.regularizer += it.regularizer;
            acc.total += it.total;
        }
        acc.rotation_geodesic /= n;
        acc.translation_l2 /= n;
        acc.regularizer /= n;
        acc.total /= n;
        Some(acc)
    }
}

/// Rotation angle of `R_aᵀ R_b` in radians, without clamping margin.
pub fn rotation_angle(r_a: &Matrix3<f64>, r_b: &Matrix3<f64>) -> f64 {
    let c = (((r_a.transpose() * r_b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// `arccos((tr(R̂ᵀ R_gt) − 1)/2)` and its gradient with respect to `R̂`.
pub fn geodesic_rotation_loss(r_hat: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> Result<(f64, Matrix3<f64>)> {
    check_rotation(r_hat, 1e-6)?;
    check_rotation(r_gt, 1e-6)?;
    let raw = ((r_hat.transpose() * r_gt).trace() - 1.0) / 2.0;
    let lo = -1.0 + ACOS_CLAMP;
    let hi = 1.0 - ACOS_CLAMP;
    let c = raw.clamp(lo, hi);
    let grad = if raw <= lo || raw >= hi {
        Matrix3::zeros()
    } else {
        r_gt * (-0.5 / (1.0 - c * c).sqrt())
    };
    Ok((c.acos(), grad))
}

fn translation_term(t_hat: &Vector3<f64>, t_gt: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let diff = t_hat - t_gt;
    let norm = diff.norm();
    let grad = if norm > 0.0 { diff / norm } else { Vector3::zeros() };
    (norm, grad)
}

/// Full pose objective on `(û, v̂, t̂)`; returns the breakdown and `∂total/∂(u, v, t)`.
pub fn pose_loss(
    p_hat: &PoseParams6D,
    r_gt: &Matrix3<f64>,
    t_gt: &Vector3<f64>,
    lambda: f64,
) -> Result<(LossBreakdown, PoseParams6D)> {
    if !(lambda >= 0.0) {
        return invalid(format!("pose_loss: lambda must be non-negative, got {lambda}"));
    }
    let (u, v) = (&p_hat.u, &p_hat.v);
    let r_hat = gram_schmidt_so3(u, v)?;
    let (rot, d_r) = geodesic_rotation_loss(&r_hat, r_gt)?;
    let (d_u_rot, d_v_rot) = gram_schmidt_backward(u, v, &d_r)?;
    let (trans, d_t) = translation_term(&p_hat.t, t_gt);

    let inner = u.dot(v);
    let (un, vn) = (u.norm(), v.norm());
    let reg = inner * inner + (un - 1.0).powi(2) + (vn - 1.0).powi(2);
    let d_u_reg = v * (2.0 * inner) + u * (2.0 * (un - 1.0) / un);
    let d_v_reg = u * (2.0 * inner) + v * (2.0 * (vn - 1.0) / vn);

    let grad = PoseParams6D { u: d_u_rot + d_u_reg * lambda, v: d_v_rot + d_v_reg * lambda, t: d_t };
    Ok((LossBreakdown::new(rot, trans, reg, lambda), grad))
}

/// Euler-angle objective: geodesic on `Rz Ry Rx` plus translation distance.
/// Returns `(breakdown, ∂/∂θ, ∂/∂t)`.
pub fn euler_pose_loss(
    theta: &Vector3<f64>,
    t_hat: &Vector3<f64>,
    r_gt: &Matrix3<f64>,
    t_gt: &Vector3<f64>,
) -> Result<(LossBreakdown, Vector3<f64>, Vector3<f64>)> {
    let r_hat = euler_to_rotation(theta);
    let (rot, d_r) = geodesic_rotation_loss(&r_hat, r_gt)?;
    let d_theta = euler_to_rotation_backward(theta, &d_r);
    let (trans, d_t) = translation_term(t_hat, t_gt);
    Ok((LossBreakdown::new(rot, trans, 0.0, 0.0), d_theta, d_t))
}

/// `‖log Z_pred − log Z_gt‖_F²` and its gradient with respect to `Z_pred`.
pub fn log_tangent_frobenius_loss(z_pred: &Mat, z_gt: &Mat) -> Result<(f64, Mat)> {
    if z_pred.shape() != z_gt.shape() {
        return invalid("log_tangent_frobenius_loss: shape mismatch");
    }
    let (lp, cache) = log_eig_cached(z_pred)?;
    let (lg, _) = log_eig_cached(z_gt)?;
    let diff = lp - lg;
    let loss = diff.norm_squared();
    let grad = log_eig_backward(&cache, &(diff * 2.0))?;
    Ok((loss, grad))
}
