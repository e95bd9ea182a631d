//! Structured Cholesky pose codec.
//!
//! A 4×4 SPD matrix `S = L Lᵀ` carries a pose in its Cholesky factor:
//!
//! ```text
//!     | e^tx   0      0      0              |
//! L = | u1     e^ty   0      0              |
//!     | u2     v1     e^tz   0              |
//!     | u3     v2     v3     e^-(tx+ty+tz)  |
//! ```
//!
//! `(u, v)` is the 6D rotation representation (mapped to SO(3) by Gram–Schmidt)
//! and `t` the normalized translation. The diagonal product is 1, so
//! `det S = 1`. A 3×3 Euler-angle layout is provided for comparison runs.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky_lower, Mat};
use crate::spd::SpdMatrix;

/// Largest admissible `|t_i|` before the exponential diagonal is refused.
pub const MAX_LOG_DIAG: f64 = 50.0;
/// Gram–Schmidt degeneracy threshold.
pub const GS_EPS: f64 = 1e-8;
/// Floor applied to every translation range, metres.
pub const MIN_TRANSLATION_RANGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseParams6D {
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub t: Vector3<f64>,
}

impl PoseParams6D {
    pub fn zeros() -> Self {
        Self { u: Vector3::zeros(), v: Vector3::zeros(), t: Vector3::zeros() }
    }

    /// Parameters whose Gram–Schmidt image is `rotation`: its first two columns.
    pub fn from_rotation(rotation: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        Self { u: rotation.column(0).into_owned(), v: rotation.column(1).into_owned(), t }
    }

    pub fn to_array(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        out[..3].copy_from_slice(self.u.as_slice());
        out[3..6].copy_from_slice(self.v.as_slice());
        out[6..].copy_from_slice(self.t.as_slice());
        out
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            u: Vector3::new(x[0], x[1], x[2]),
            v: Vector3::new(x[3], x[4], x[5]),
            t: Vector3::new(x[6], x[7], x[8]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// Structured lower-triangular factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyPoseFactor(Mat);

impl CholeskyPoseFactor {
    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn diagonal_product(&self) -> f64 {
        self.0.diagonal().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    /// Metres.
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation, 1e-8)?;
        if !translation.iter().all(|x| x.is_finite()) {
            return invalid("pose: non-finite translation");
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Checks `RᵀR = I` and `det R = +1` within `tol`.
pub fn check_rotation(r: &Matrix3<f64>, tol: f64) -> Result<()> {
    if !r.iter().all(|x| x.is_finite()) {
        return invalid("rotation: non-finite entry");
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).norm();
    let det = r.determinant();
    if ortho > tol || (det - 1.0).abs() > tol {
        return invalid(format!("not a rotation: ||RᵀR − I|| = {ortho:e}, det = {det}"));
    }
    Ok(())
}

pub fn build_factor(p: &PoseParams6D) -> Result<CholeskyPoseFactor> {
    if !p.is_finite() {
        return invalid("build_factor: non-finite parameters");
    }
    if p.t.amax() > MAX_LOG_DIAG {
        return Err(Error::Overflow(format!("build_factor: |t| = {} exceeds {MAX_LOG_DIAG}", p.t.amax())));
    }
    let t = &p.t;
    let mut l = Mat::zeros(4, 4);
    l[(0, 0)] = t.x.exp();
    l[(1, 1)] = t.y.exp();
    l[(2, 2)] = t.z.exp();
    l[(3, 3)] = (-(t.x + t.y + t.z)).exp();
    l[(1, 0)] = p.u.x;
    l[(2, 0)] = p.u.y;
    l[(3, 0)] = p.u.z;
    l[(2, 1)] = p.v.x;
    l[(3, 1)] = p.v.y;
    l[(3, 2)] = p.v.z;
    Ok(CholeskyPoseFactor(l))
}

pub fn encode_pose_to_spd(p: &PoseParams6D) -> Result<SpdMatrix> {
    let l = build_factor(p)?.0;
    let s = &l * l.transpose();
    Ok(SpdMatrix::new_unchecked(crate::linalg::symmetrize(&s)))
}

/// Reads `(u, v, t)` off a lower Cholesky factor.
pub fn params_from_factor(l: &Mat) -> PoseParams6D {
    PoseParams6D {
        t: Vector3::new(l[(0, 0)].ln(), l[(1, 1)].ln(), l[(2, 2)].ln()),
        u: Vector3::new(l[(1, 0)], l[(2, 0)], l[(3, 0)]),
        v: Vector3::new(l[(2, 1)], l[(3, 1)], l[(3, 2)]),
    }
}

/// Adjoint of [`params_from_factor`]: `∂f/∂L` from `∂f/∂(u, v, t)`.
pub fn params_from_factor_backward(l: &Mat, d: &PoseParams6D) -> Mat {
    let mut dl = Mat::zeros(4, 4);
    dl[(0, 0)] = d.t.x / l[(0, 0)];
    dl[(1, 1)] = d.t.y / l[(1, 1)];
    dl[(2, 2)] = d.t.z / l[(2, 2)];
    dl[(1, 0)] = d.u.x;
    dl[(2, 0)] = d.u.y;
    dl[(3, 0)] = d.u.z;
    dl[(2, 1)] = d.v.x;
    dl[(3, 1)] = d.v.y;
    dl[(3, 2)] = d.v.z;
    dl
}

pub fn decode_spd_to_params(s: &Mat) -> Result<PoseParams6D> {
    if s.shape() != (4, 4) {
        return invalid(format!("decode: expected 4x4, got {:?}", s.shape()));
    }
    Ok(params_from_factor(&cholesky_lower(s)?))
}

/// `R = [r1 r2 r1×r2]` from two non-collinear vectors.
pub fn gram_schmidt_so3(u: &Vector3<f64>, v: &Vector3<f64>) -> Result<Matrix3<f64>> {
    Ok(GramSchmidt::forward(u, v)?.rotation())
}

struct GramSchmidt {
    r1: Vector3<f64>,
    r2: Vector3<f64>,
    u_norm: f64,
    w_norm: f64,
    proj: f64,
}

impl GramSchmidt {
    fn forward(u: &Vector3<f64>, v: &Vector3<f64>) -> Result<Self> {
        let u_norm = u.norm();
        let v_norm = v.norm();
        if !(u_norm.is_finite() && v_norm.is_finite()) {
            return invalid("gram_schmidt: non-finite input");
        }
        if u_norm < GS_EPS || u.cross(v).norm() < GS_EPS * u_norm * v_norm || v_norm < GS_EPS {
            return Err(Error::DegenerateRotation(format!(
                "u = {:?}, v = {:?} are degenerate or collinear",
                u.as_slice(),
                v.as_slice()
            )));
        }
        let r1 = u / u_norm;
        let proj = r1.dot(v);
        let w = v - r1 * proj;
        let w_norm = w.norm();
        Ok(Self { r1, r2: w / w_norm, u_norm, w_norm, proj })
    }

    fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.r1, self.r2, self.r1.cross(&self.r2)])
    }
}

/// Reverse-mode gradient of [`gram_schmidt_so3`].
pub fn gram_schmidt_backward(
    u: &Vector3<f64>,
    v: &Vector3<f64>,
    d_r: &Matrix3<f64>,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let gs = GramSchmidt::forward(u, v)?;
    let (r1, r2) = (gs.r1, gs.r2);
    let d_r3 = d_r.column(2).into_owned();
    let mut d_r1 = d_r.column(0).into_owned() + r2.cross(&d_r3);
    let d_r2 = d_r.column(1).into_owned() + d_r3.cross(&r1);

    let d_w = (d_r2 - r2 * r2.dot(&d_r2)) / gs.w_norm;
    let r1_dw = r1.dot(&d_w);
    let d_v = d_w - r1 * r1_dw;
    d_r1 += -d_w * gs.proj - v * r1_dw;

    let d_u = (d_r1 - r1 * r1.dot(&d_r1)) / gs.u_norm;
    Ok((d_u, d_v))
}

/// Per-axis translation normalization statistics, metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TranslationStats {
    pub t_min: [f64; 3],
    pub t_range: [f64; 3],
}

impl TranslationStats {
    pub fn new(t_min: [f64; 3], t_range: [f64; 3]) -> Result<Self> {
        if t_range.iter().any(|r| !(*r > 0.0)) || t_min.iter().any(|m| !m.is_finite()) {
            return invalid(format!("translation stats: invalid min {t_min:?} / range {t_range:?}"));
        }
        Ok(Self { t_min, t_range })
    }
}

pub fn normalize_translation(t_raw: &Vector3<f64>, stats: &TranslationStats) -> Vector3<f64> {
    Vector3::from_fn(|i, _| (t_raw[i] - stats.t_min[i]) / stats.t_range[i])
}

pub fn denormalize_translation(t_norm: &Vector3<f64>, stats: &TranslationStats) -> Vector3<f64> {
    Vector3::from_fn(|i, _| t_norm[i] * stats.t_range[i] + stats.t_min[i])
}

/// Linear-interpolated percentile of a sorted slice, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// `t_min` = 1st percentile, `t_range` = 99th − 1st percentile, per axis.
pub fn compute_translation_stats(translations: &[Vector3<f64>]) -> Result<TranslationStats> {
    if translations.is_empty() {
        return invalid("translation stats: empty training set");
    }
    let mut t_min = [0.0; 3];
    let mut t_range = [0.0; 3];
    for axis in 0..3 {
        let mut vals: Vec<f64> = translations.iter().map(|t| t[axis]).collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return invalid("translation stats: non-finite translation");
        }
        vals.sort_by(f64::total_cmp);
        let lo = percentile_sorted(&vals, 0.01);
        let hi = percentile_sorted(&vals, 0.99);
        t_min[axis] = lo;
        t_range[axis] = (hi - lo).max(MIN_TRANSLATION_RANGE);
    }
    TranslationStats::new(t_min, t_range)
}

/// 3×3 factor for the Euler layout: diag `e^θ`, `L21 = tx`, `L31 = ty`, `L32 = tz`.
pub fn build_factor_euler(theta: &Vector3<f64>, t: &Vector3<f64>) -> Result<Mat> {
    if !(theta.iter().chain(t.iter()).all(|x| x.is_finite())) {
        return invalid("build_factor_euler: non-finite parameters");
    }
    if theta.amax() > MAX_LOG_DIAG {
        return Err(Error::Overflow(format!("build_factor_euler: |θ| = {}", theta.amax())));
    }
    let mut l = Mat::zeros(3, 3);
    l[(0, 0)] = theta.x.exp();
    l[(1, 1)] = theta.y.exp();
    l[(2, 2)] = theta.z.exp();
    l[(1, 0)] = t.x;
    l[(2, 0)] = t.y;
    l[(2, 1)] = t.z;
    Ok(l)
}

pub fn euler_params_from_factor(l: &Mat) -> (Vector3<f64>, Vector3<f64>) {
    (
        Vector3::new(l[(0, 0)].ln(), l[(1, 1)].ln(), l[(2, 2)].ln()),
        Vector3::new(l[(1, 0)], l[(2, 0)], l[(2, 1)]),
    )
}

pub fn euler_params_from_factor_backward(l: &Mat, d_theta: &Vector3<f64>, d_t: &Vector3<f64>) -> Mat {
    let mut dl = Mat::zeros(3, 3);
    for i in 0..3 {
        dl[(i, i)] = d_theta[i] / l[(i, i)];
    }
    dl[(1, 0)] = d_t.x;
    dl[(2, 0)] = d_t.y;
    dl[(2, 1)] = d_t.z;
    dl
}

/// Returns `(θ, t)` from a 3×3 SPD matrix.
pub fn decode_euler(s: &Mat) -> Result<(Vector3<f64>, Vector3<f64>)> {
    if s.shape() != (3, 3) {
        return invalid(format!("decode_euler: expected 3x3, got {:?}", s.shape()));
    }
    Ok(euler_params_from_factor(&cholesky_lower(s)?))
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Roll/pitch/yaw to rotation: `R = Rz(θz) Ry(θy) Rx(θx)`.
pub fn euler_to_rotation(theta: &Vector3<f64>) -> Matrix3<f64> {
    rot_z(theta.z) * rot_y(theta.y) * rot_x(theta.x)
}

pub fn euler_to_rotation_backward(theta: &Vector3<f64>, d_r: &Matrix3<f64>) -> Vector3<f64> {
    let (rx, ry, rz) = (rot_x(theta.x), rot_y(theta.y), rot_z(theta.z));
    let jx = rz * ry * d_rot_x(theta.x);
    let jy = rz * d_rot_y(theta.y) * rx;
    let jz = d_rot_z(theta.z) * ry * rx;
    Vector3::new(jx.component_mul(d_r).sum(), jy.component_mul(d_r).sum(), jz.component_mul(d_r).sum())
}
