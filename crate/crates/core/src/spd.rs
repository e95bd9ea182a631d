//! SPD layers: spatial and channel covariance pooling, BiMap, ReEig, LogEig
//! and the Log-Euclidean distance, each with its reverse-mode rule.
//!
//! Incoming adjoints of symmetric-valued outputs are symmetrized before use.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, is_finite, spectral_backward, sym_eig, symmetrize, Mat, SymEigPair};

/// `C×H×W` activations stored channel-major, then row-major per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return invalid(format!(
                "feature map: {} values for shape {channels}x{height}x{width}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("feature map: non-finite value");
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn spatial_len(&self) -> usize {
        self.height * self.width
    }

    /// Flattened `C×N` view, one row per channel.
    pub fn to_matrix(&self) -> Mat {
        let n = self.spatial_len();
        Mat::from_row_slice(self.channels, n, &self.data)
    }

    fn from_matrix(channels: usize, height: usize, width: usize, m: &Mat) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            data.extend(m.row(c).iter());
        }
        Self { channels, height, width, data }
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

/// Symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(Mat);

impl SpdMatrix {
    pub fn new(m: Mat) -> Result<Self> {
        linalg::assert_spd(&m)?;
        Ok(Self(symmetrize(&m)))
    }

    /// Wraps a matrix known to be SPD by construction.
    pub(crate) fn new_unchecked(m: Mat) -> Self {
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }
}

/// `n×m` matrix with orthonormal columns (BiMap weight).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StiefelPoint(Mat);

impl StiefelPoint {
    pub const TOLERANCE: f64 = 1e-8;

    pub fn new(w: Mat) -> Result<Self> {
        let (n, m) = w.shape();
        if m == 0 || m > n {
            return invalid(format!("stiefel point: need n >= m >= 1, got {n}x{m}"));
        }
        let drift = orthonormality_error(&w);
        if !(drift <= Self::TOLERANCE) {
            return invalid(format!("stiefel point: ||WᵀW − I||_F = {drift:e}"));
        }
        Ok(Self(w))
    }

    pub(crate) fn new_unchecked(w: Mat) -> Self {
        Self(w)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.0.as_mut_slice()
    }

    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.0)
    }
}

pub fn orthonormality_error(w: &Mat) -> f64 {
    let m = w.ncols();
    (w.transpose() * w - Mat::identity(m, m)).norm()
}

fn check_finite(m: &Mat, what: &str) -> Result<()> {
    if !is_finite(m) {
        return invalid(format!("{what}: non-finite entry"));
    }
    Ok(())
}

/// Spatial covariance `Σ̂ = 1/(C−1) Σ_i (X_i − μ)ᵀ(X_i − μ)`, `N×N` with `N = H·W`.
///
/// The result is PSD with rank at most `C − 1`; ReEig is what lifts it onto
/// the SPD manifold.
pub fn cov_pool(f: &FeatureMap) -> Result<Mat> {
    if f.channels < 2 {
        return invalid(format!("cov_pool: need at least 2 channels, got {}", f.channels));
    }
    let centered = center_over_channels(f);
    let n = f.spatial_len();
    let scale = 1.0 / (f.channels as f64 - 1.0);
    let mut out = Mat::zeros(n, n);
    for p in 0..n {
        for q in p..n {
            let s = centered.column(p).dot(&centered.column(q)) * scale;
            out[(p, q)] = s;
            out[(q, p)] = s;
        }
    }
    Ok(out)
}

fn center_over_channels(f: &FeatureMap) -> Mat {
    let mut x = f.to_matrix();
    let c = f.channels as f64;
    for mut col in x.column_iter_mut() {
        let mean = col.sum() / c;
        col.add_scalar_mut(-mean);
    }
    x
}

pub fn cov_pool_backward(f: &FeatureMap, d_sigma: &Mat) -> Result<FeatureMap> {
    let n = f.spatial_len();
    if d_sigma.shape() != (n, n) {
        return invalid(format!("cov_pool_backward: adjoint {:?} vs N = {n}", d_sigma.shape()));
    }
    if f.channels < 2 {
        return invalid("cov_pool_backward: need at least 2 channels");
    }
    let centered = center_over_channels(f);
    let g = symmetrize(d_sigma);
    let mut dx = centered * g * (2.0 / (f.channels as f64 - 1.0));
    // Undo the channel-mean subtraction.
    let c = f.channels as f64;
    for mut col in dx.column_iter_mut() {
        let mean = col.sum() / c;
        col.add_scalar_mut(-mean);
    }
    Ok(FeatureMap::from_matrix(f.channels, f.height, f.width, &dx))
}

/// Channel covariance `1/(N−1) X̃ X̃ᵀ` (`C×C`), spatial mean removed per channel.
pub fn channel_cov_pool(f: &FeatureMap) -> Result<Mat> {
    let n = f.spatial_len();
    if n < 2 {
        return invalid(format!("channel_cov_pool: need at least 2 spatial positions, got {n}"));
    }
    let centered = center_over_positions(f);
    let c = f.channels;
    let scale = 1.0 / (n as f64 - 1.0);
    let mut out = Mat::zeros(c, c);
    for a in 0..c {
        for b in a..c {
            let s = centered.row(a).dot(&centered.row(b)) * scale;
            out[(a, b)] = s;
            out[(b, a)] = s;
        }
    }
    Ok(out)
}

fn center_over_positions(f: &FeatureMap) -> Mat {
    let mut x = f.to_matrix();
    let n = f.spatial_len() as f64;
    for mut row in x.row_iter_mut() {
        let mean = row.sum() / n;
        row.add_scalar_mut(-mean);
    }
    x
}

pub fn channel_cov_pool_backward(f: &FeatureMap, d_sigma: &Mat) -> Result<FeatureMap> {
    let c = f.channels;
    if d_sigma.shape() != (c, c) {
        return invalid(format!("channel_cov_pool_backward: adjoint {:?} vs C = {c}", d_sigma.shape()));
    }
    let n = f.spatial_len();
    if n < 2 {
        return invalid("channel_cov_pool_backward: need at least 2 spatial positions");
    }
    let centered = center_over_positions(f);
    let mut dx = symmetrize(d_sigma) * centered * (2.0 / (n as f64 - 1.0));
    let nf = n as f64;
    for mut row in dx.row_iter_mut() {
        let mean = row.sum() / nf;
        row.add_scalar_mut(-mean);
    }
    Ok(FeatureMap::from_matrix(c, f.height, f.width, &dx))
}

/// BiMap congruence `Y = Wᵀ X W`.
pub fn bimap_forward(x: &Mat, w: &StiefelPoint) -> Result<Mat> {
    let n = x.nrows();
    if x.ncols() != n || w.rows() != n {
        return invalid(format!("bimap: input {:?} vs weight {}x{}", x.shape(), w.rows(), w.cols()));
    }
    check_finite(x, "bimap")?;
    let wm = w.as_mat();
    Ok(symmetrize(&(wm.transpose() * x * wm)))
}

/// Returns `(∂f/∂X, ∂f/∂W)`; the weight gradient is Euclidean (not projected).
pub fn bimap_backward(x: &Mat, w: &StiefelPoint, d_y: &Mat) -> Result<(Mat, Mat)> {
    let (n, m) = (w.rows(), w.cols());
    if x.shape() != (n, n) || d_y.shape() != (m, m) {
        return invalid("bimap_backward: shape mismatch");
    }
    let g = symmetrize(d_y);
    let wm = w.as_mat();
    let dx = symmetrize(&(wm * &g * wm.transpose()));
    let dw = (x + x.transpose()) * wm * g;
    Ok((dx, dw))
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return invalid(format!("reeig: eps must be positive, got {eps}"));
    }
    Ok(())
}

/// ReEig output together with the decomposition needed for its backward pass.
#[derive(Debug, Clone)]
pub struct ReEigCache {
    pub pair: SymEigPair,
    pub eps: f64,
}

/// `U max(Λ, εI) Uᵀ`; accepts PSD or indefinite symmetric input.
pub fn reeig_forward(x: &Mat, eps: f64) -> Result<Mat> {
    Ok(reeig_forward_cached(x, eps)?.0)
}

pub fn reeig_forward_cached(x: &Mat, eps: f64) -> Result<(Mat, ReEigCache)> {
    check_eps(eps)?;
    let pair = sym_eig(x)?;
    let y = pair.reconstruct_with(|l| l.max(eps));
    Ok((y, ReEigCache { pair, eps }))
}

pub fn reeig_backward(x: &Mat, eps: f64, d_y: &Mat) -> Result<Mat> {
    let (_, cache) = reeig_forward_cached(x, eps)?;
    reeig_backward_cached(&cache, d_y)
}

/// Eigenvalues at or below the floor are clamped and pass no gradient.
pub fn reeig_backward_cached(cache: &ReEigCache, d_y: &Mat) -> Result<Mat> {
    let n = cache.pair.dim();
    if d_y.shape() != (n, n) {
        return invalid("reeig_backward: shape mismatch");
    }
    let eps = cache.eps;
    let f: Vec<f64> = cache.pair.values.iter().map(|&l| l.max(eps)).collect();
    let df: Vec<f64> = cache.pair.values.iter().map(|&l| if l > eps { 1.0 } else { 0.0 }).collect();
    Ok(spectral_backward(&cache.pair, &f, &df, d_y))
}

#[derive(Debug, Clone)]
pub struct LogEigCache {
    pub pair: SymEigPair,
}

/// Matrix logarithm `U log(Λ) Uᵀ` of an SPD matrix.
pub fn log_eig(x: &Mat) -> Result<Mat> {
    Ok(log_eig_cached(x)?.0)
}

pub fn log_eig_cached(x: &Mat) -> Result<(Mat, LogEigCache)> {
    let pair = sym_eig(x)?;
    let min = pair.values[pair.dim() - 1];
    if min <= 0.0 {
        return Err(Error::NotPositiveDefinite(format!("log_eig: smallest eigenvalue {min:e}")));
    }
    let y = pair.reconstruct_with(f64::ln);
    Ok((y, LogEigCache { pair }))
}

pub fn log_eig_backward(cache: &LogEigCache, d_y: &Mat) -> Result<Mat> {
    let n = cache.pair.dim();
    if d_y.shape() != (n, n) {
        return invalid("log_eig_backward: shape mismatch");
    }
    let f: Vec<f64> = cache.pair.values.iter().map(|l| l.ln()).collect();
    let df: Vec<f64> = cache.pair.values.iter().map(|l| 1.0 / l).collect();
    Ok(spectral_backward(&cache.pair, &f, &df, d_y))
}

/// Matrix exponential of a symmetric matrix.
pub fn exp_eig(x: &Mat) -> Result<Mat> {
    Ok(sym_eig(x)?.reconstruct_with(f64::exp))
}

/// `‖log A − log B‖_F`.
pub fn log_euclidean_distance(a: &Mat, b: &Mat) -> Result<f64> {
    if a.shape() != b.shape() {
        return invalid("log_euclidean_distance: shape mismatch");
    }
    Ok((log_eig(a)? - log_eig(b)?).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::qr_reduced;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_fmap(c: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_spd(n: usize, r: &mut ChaCha8Rng) -> Mat {
        let a = Mat::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        &a * a.transpose() + Mat::identity(n, n) * 0.1
    }

    fn random_stiefel(n: usize, m: usize, r: &mut ChaCha8Rng) -> StiefelPoint {
        let a = Mat::from_fn(n, m, |_, _| r.random_range(-1.0..1.0));
        StiefelPoint::new(qr_reduced(&a).unwrap().0).unwrap()
    }

    fn rel_close(fd: f64, an: f64, tol: f64) -> bool {
        (fd - an).abs() <= tol * an.abs().max(fd.abs()).max(1e-6)
    }

    #[test]
    fn cov_pool_equal_channels_is_zero() {
        let f = FeatureMap::new(3, 1, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(cov_pool(&f).unwrap(), Mat::zeros(2, 2));
    }

    #[test]
    fn cov_pool_two_channel_example() {
        // μ = (0.5, 0.5); centred rows (0.5,−0.5), (−0.5,0.5); sum of outer products / 1.
        let f = FeatureMap::new(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = cov_pool(&f).unwrap();
        assert_eq!(s, Mat::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]));
    }

    #[test]
    fn cov_pool_is_psd_and_exactly_symmetric() {
        let mut r = rng(1);
        let f = random_fmap(5, 3, 3, &mut r);
        let s = cov_pool(&f).unwrap();
        assert_eq!(s, s.transpose());
        assert!(linalg::min_eigenvalue(&s).unwrap() >= -1e-10);
    }

    #[test]
    fn cov_pool_rejects_single_channel() {
        let f = FeatureMap::zeros(1, 2, 2);
        assert!(matches!(cov_pool(&f), Err(Error::InvalidInput(_))));
        assert!(cov_pool_backward(&FeatureMap::zeros(2, 2, 2), &Mat::zeros(3, 3)).is_err());
    }

    fn fd_fmap(f: &FeatureMap, idx: usize, h: f64, func: &dyn Fn(&FeatureMap) -> f64) -> f64 {
        let mut p = f.clone();
        p.data[idx] += h;
        let mut m = f.clone();
        m.data[idx] -= h;
        (func(&p) - func(&m)) / (2.0 * h)
    }

    #[test]
    fn cov_pool_backward_zero_adjoint() {
        let mut r = rng(2);
        let f = random_fmap(4, 2, 2, &mut r);
        let d = cov_pool_backward(&f, &Mat::zeros(4, 4)).unwrap();
        assert!(d.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cov_pool_backward_trace_and_corner() {
        let mut r = rng(3);
        let f = random_fmap(4, 2, 3, &mut r);
        let n = 6;
        let trace = |g: &FeatureMap| cov_pool(g).unwrap().trace();
        let g_tr = cov_pool_backward(&f, &Mat::identity(n, n)).unwrap();
        let corner = |g: &FeatureMap| cov_pool(g).unwrap()[(0, 0)];
        let mut e00 = Mat::zeros(n, n);
        e00[(0, 0)] = 1.0;
        let g_c = cov_pool_backward(&f, &e00).unwrap();
        for idx in 0..f.data.len() {
            assert!(rel_close(fd_fmap(&f, idx, 1e-5, &trace), g_tr.data[idx], 1e-6));
            assert!(rel_close(fd_fmap(&f, idx, 1e-5, &corner), g_c.data[idx], 1e-6));
        }
    }

    #[test]
    fn channel_cov_examples() {
        let f = FeatureMap::new(2, 1, 3, vec![2.0, 2.0, 2.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(channel_cov_pool(&f).unwrap(), Mat::zeros(2, 2));
        // Rows (1,2,3) and (2,4,0): means 2 and 2; centred (−1,0,1), (0,2,−2).
        // Σ = 1/2 [[2, −2], [−2, 8]] = [[1, −1], [−1, 4]].
        let f = FeatureMap::new(2, 1, 3, vec![1.0, 2.0, 3.0, 2.0, 4.0, 0.0]).unwrap();
        let s = channel_cov_pool(&f).unwrap();
        assert!((s - Mat::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 4.0])).norm() < 1e-15);
        let mut r = rng(4);
        let f = random_fmap(6, 2, 2, &mut r);
        assert!(linalg::min_eigenvalue(&channel_cov_pool(&f).unwrap()).unwrap() >= -1e-10);
    }

    #[test]
    fn channel_cov_backward_matches_fd() {
        let mut r = rng(5);
        let f = random_fmap(3, 2, 3, &mut r);
        let c = symmetrize(&Mat::from_fn(3, 3, |_, _| r.random_range(-1.0..1.0)));
        let func = |g: &FeatureMap| channel_cov_pool(g).unwrap().component_mul(&c).sum();
        let g = channel_cov_pool_backward(&f, &c).unwrap();
        for idx in 0..f.data.len() {
            assert!(rel_close(fd_fmap(&f, idx, 1e-5, &func), g.data[idx], 1e-6));
        }
    }

    #[test]
    fn bimap_examples() {
        let mut r = rng(6);
        let x = random_spd(5, &mut r);
        let mut sel = Mat::zeros(5, 3);
        for i in 0..3 {
            sel[(i, i)] = 1.0;
        }
        let y = bimap_forward(&x, &StiefelPoint::new(sel).unwrap()).unwrap();
        assert_eq!(y, x.view((0, 0), (3, 3)).into_owned());

        let w = random_stiefel(5, 3, &mut r);
        let y = bimap_forward(&Mat::identity(5, 5), &w).unwrap();
        assert!((y - Mat::identity(3, 3)).norm() < 1e-12);

        let x = random_spd(6, &mut r);
        let w = random_stiefel(6, 3, &mut r);
        assert!(linalg::min_eigenvalue(&bimap_forward(&x, &w).unwrap()).unwrap() > 0.0);

        assert!(bimap_forward(&Mat::identity(4, 4), &w).is_err());
    }

    #[test]
    fn bimap_backward_matches_fd() {
        let mut r = rng(7);
        let x = random_spd(5, &mut r);
        let w = random_stiefel(5, 3, &mut r);
        let (dx0, dw0) = bimap_backward(&x, &w, &Mat::zeros(3, 3)).unwrap();
        assert_eq!(dx0.norm() + dw0.norm(), 0.0);

        let mut e01 = Mat::zeros(3, 3);
        e01[(0, 1)] = 1.0;
        e01[(1, 0)] = 1.0;
        for probe in [Mat::identity(3, 3), e01] {
            let (dx, dw) = bimap_backward(&x, &w, &probe).unwrap();
            let f = |xx: &Mat, ww: &Mat| {
                (ww.transpose() * xx * ww).component_mul(&probe).sum()
            };
            let h = 1e-5;
            for i in 0..5 {
                for j in 0..3 {
                    let mut wp = w.as_mat().clone();
                    wp[(i, j)] += h;
                    let mut wm = w.as_mat().clone();
                    wm[(i, j)] -= h;
                    let fd = (f(&x, &wp) - f(&x, &wm)) / (2.0 * h);
                    assert!(rel_close(fd, dw[(i, j)], 1e-6), "{fd} vs {}", dw[(i, j)]);
                }
            }
            for i in 0..5 {
                for j in 0..=i {
                    let mut e = Mat::zeros(5, 5);
                    e[(i, j)] += 0.5;
                    e[(j, i)] += 0.5;
                    let fd = (f(&(&x + &e * h), w.as_mat()) - f(&(&x - &e * h), w.as_mat())) / (2.0 * h);
                    assert!(rel_close(fd, dx.component_mul(&e).sum(), 1e-6));
                }
            }
        }
    }

    #[test]
    fn reeig_examples() {
        let x = Mat::from_diagonal(&DVector::from_vec(vec![1.0, 1e-6]));
        let y = reeig_forward(&x, 1e-4).unwrap();
        assert!((y - Mat::from_diagonal(&DVector::from_vec(vec![1.0, 1e-4]))).norm() < 1e-15);

        let mut r = rng(8);
        let x = random_spd(4, &mut r) + Mat::identity(4, 4);
        assert!((reeig_forward(&x, 1e-4).unwrap() - &x).norm() < 1e-10);

        let z = reeig_forward(&Mat::zeros(3, 3), 1e-4).unwrap();
        assert!((z - Mat::identity(3, 3) * 1e-4).norm() < 1e-18);

        assert!(matches!(reeig_forward(&x, 0.0), Err(Error::InvalidInput(_))));
        assert!(matches!(reeig_forward(&x, -1.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn reeig_backward_regions() {
        let mut r = rng(9);
        let x = random_spd(4, &mut r) + Mat::identity(4, 4);
        assert_eq!(reeig_backward(&x, 1e-4, &Mat::zeros(4, 4)).unwrap().norm(), 0.0);
        let g = reeig_backward(&x, 1e-4, &Mat::identity(4, 4)).unwrap();
        assert!((g - Mat::identity(4, 4)).norm() < 1e-10);
    }

    #[test]
    fn reeig_backward_straddling_floor_matches_fd() {
        let mut r = rng(10);
        let mut checked = 0;
        while checked < 5 {
            let q = qr_reduced(&Mat::from_fn(5, 5, |_, _| r.random_range(-1.0..1.0))).unwrap().0;
            let lam = DVector::from_fn(5, |_, _| r.random_range(-0.5..1.0));
            let eps = 0.2;
            if lam.iter().any(|l: &f64| (l - eps).abs() < 1e-3) {
                continue;
            }
            let x = symmetrize(&(&q * Mat::from_diagonal(&lam) * q.transpose()));
            let c = symmetrize(&Mat::from_fn(5, 5, |_, _| r.random_range(-1.0..1.0)));
            let f = |xx: &Mat| reeig_forward(xx, eps).unwrap().component_mul(&c).sum();
            let g = reeig_backward(&x, eps, &c).unwrap();
            let h = 1e-5;
            for i in 0..5 {
                for j in 0..=i {
                    let mut e = Mat::zeros(5, 5);
                    e[(i, j)] += 0.5;
                    e[(j, i)] += 0.5;
                    let fd = (f(&(&x + &e * h)) - f(&(&x - &e * h))) / (2.0 * h);
                    assert!(rel_close(fd, g.component_mul(&e).sum(), 1e-5));
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn log_eig_examples() {
        assert!(log_eig(&Mat::identity(3, 3)).unwrap().norm() < 1e-15);
        let e = std::f64::consts::E;
        let x = Mat::from_diagonal(&DVector::from_vec(vec![e, e * e]));
        let y = log_eig(&x).unwrap();
        assert!((y - Mat::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]))).norm() < 1e-14);
        let mut r = rng(11);
        let x = random_spd(5, &mut r);
        let back = exp_eig(&log_eig(&x).unwrap()).unwrap();
        assert!((back - &x).norm() / x.norm() < 1e-8);
        assert!(matches!(log_eig(&Mat::zeros(2, 2)), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn log_eig_backward_matches_fd() {
        let mut r = rng(12);
        let x = random_spd(4, &mut r);
        let c = symmetrize(&Mat::from_fn(4, 4, |_, _| r.random_range(-1.0..1.0)));
        let (_, cache) = log_eig_cached(&x).unwrap();
        let g = log_eig_backward(&cache, &c).unwrap();
        let f = |xx: &Mat| log_eig(xx).unwrap().component_mul(&c).sum();
        let h = 1e-5;
        for i in 0..4 {
            for j in 0..=i {
                let mut e = Mat::zeros(4, 4);
                e[(i, j)] += 0.5;
                e[(j, i)] += 0.5;
                let fd = (f(&(&x + &e * h)) - f(&(&x - &e * h))) / (2.0 * h);
                assert!(rel_close(fd, g.component_mul(&e).sum(), 1e-6));
            }
        }
    }

    #[test]
    fn log_euclidean_distance_properties() {
        let mut r = rng(13);
        let a = random_spd(3, &mut r);
        assert!(log_euclidean_distance(&a, &a).unwrap() < 1e-14);
        let e2 = std::f64::consts::E.powi(2);
        let d = log_euclidean_distance(&Mat::identity(2, 2), &(Mat::identity(2, 2) * e2)).unwrap();
        assert!((d - 2.0 * 2f64.sqrt()).abs() < 1e-13);
        for _ in 0..20 {
            let (a, b, c) = (random_spd(3, &mut r), random_spd(3, &mut r), random_spd(3, &mut r));
            let ab = log_euclidean_distance(&a, &b).unwrap();
            let ba = log_euclidean_distance(&b, &a).unwrap();
            let bc = log_euclidean_distance(&b, &c).unwrap();
            let ac = log_euclidean_distance(&a, &c).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn stiefel_point_validation() {
        assert!(StiefelPoint::new(Mat::identity(3, 2) * 2.0).is_err());
        assert!(StiefelPoint::new(Mat::identity(2, 3)).is_err());
        assert!(StiefelPoint::new(Mat::identity(3, 2)).is_ok());
    }
}
