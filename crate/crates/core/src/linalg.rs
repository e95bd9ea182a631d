//! Dense small-matrix kernels: symmetric eigendecomposition, reduced QR and
//! Cholesky, together with the reverse-mode rules the SPD layers are built on.
//!
//! Everything works in `f64`. Storage is `nalgebra::DMatrix` (column-major);
//! external formats never depend on that choice.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// Dense real matrix.
pub type Mat = DMatrix<f64>;

/// Relative gap below which two eigenvalues are treated as tied.
pub const TIE_TOL: f64 = 1e-8;

/// Symmetric eigendecomposition `M = U diag(lambda) Uᵀ`, eigenvalues descending.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEigPair {
    pub vectors: Mat,
    pub values: DVector<f64>,
}

impl SymEigPair {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `U f(Λ) Uᵀ` for a scalar function applied to the spectrum.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Mat {
        let u = &self.vectors;
        let mut scaled = u.clone();
        for (j, lam) in self.values.iter().enumerate() {
            let s = f(*lam);
            scaled.column_mut(j).scale_mut(s);
        }
        symmetrize(&(scaled * u.transpose()))
    }

    pub fn reconstruct(&self) -> Mat {
        self.reconstruct_with(|l| l)
    }

    /// Absolute tie threshold `TIE_TOL * max|λ|` used by the backward rules.
    pub fn tie_threshold(&self) -> f64 {
        TIE_TOL * self.values.amax()
    }
}

pub fn is_finite(m: &Mat) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

fn check_square(m: &Mat, what: &str) -> Result<()> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        return invalid(format!("{what}: expected a non-empty square matrix, got {}x{}", m.nrows(), m.ncols()));
    }
    if !is_finite(m) {
        return invalid(format!("{what}: non-finite entry"));
    }
    Ok(())
}

pub fn sym_eig(m: &Mat) -> Result<SymEigPair> {
    check_square(m, "sym_eig")?;
    let n = m.nrows();
    let eig = symmetrize(m).symmetric_eigen();

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the result a pure function of the input bits.
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut vectors = Mat::zeros(n, n);
    let mut values = DVector::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let mut col = eig.eigenvectors.column(src).into_owned();
        // Sign convention: largest-magnitude component positive.
        let pivot = col.iamax();
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    Ok(SymEigPair { vectors, values })
}

/// Adjoint of `sym_eig`: maps `(∂f/∂λ, ∂f/∂U)` to the symmetric `∂f/∂M`.
///
/// `dM = U (diag(dλ) + sym(F ∘ Uᵀ dU)) Uᵀ` with `F_ij = 1/(λ_j − λ_i)` off the
/// diagonal. Pairs closer than [`SymEigPair::tie_threshold`] get `F_ij = 0`.
pub fn sym_eig_backward(pair: &SymEigPair, d_values: &DVector<f64>, d_vectors: &Mat) -> Result<Mat> {
    let n = pair.dim();
    if d_values.len() != n || d_vectors.shape() != (n, n) {
        return invalid(format!(
            "sym_eig_backward: adjoint shapes ({}, {:?}) do not match dimension {n}",
            d_values.len(),
            d_vectors.shape()
        ));
    }
    let u = &pair.vectors;
    let lam = &pair.values;
    let tie = pair.tie_threshold();
    let utdu = u.transpose() * d_vectors;
    let mut inner = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let gap = lam[j] - lam[i];
            if gap.abs() > tie {
                inner[(i, j)] = utdu[(i, j)] / gap;
            }
        }
    }
    let mut inner = symmetrize(&inner);
    for i in 0..n {
        inner[(i, i)] += d_values[i];
    }
    Ok(symmetrize(&(u * inner * u.transpose())))
}

/// Adjoint of a spectral function `X ↦ U f(Λ) Uᵀ` (Daleckii–Krein form).
///
/// `f_vals[i] = f(λ_i)` and `df_vals[i] = f'(λ_i)`; tied pairs use the mean
/// derivative as the divided difference.
pub fn spectral_backward(pair: &SymEigPair, f_vals: &[f64], df_vals: &[f64], d_out: &Mat) -> Mat {
    let n = pair.dim();
    let u = &pair.vectors;
    let lam = &pair.values;
    let tie = pair.tie_threshold();
    let g = u.transpose() * symmetrize(d_out) * u;
    let mut inner = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let gap = lam[i] - lam[j];
            let dd = if i == j {
                df_vals[i]
            } else if gap.abs() > tie {
                (f_vals[i] - f_vals[j]) / gap
            } else {
                0.5 * (df_vals[i] + df_vals[j])
            };
            inner[(i, j)] = g[(i, j)] * dd;
        }
    }
    symmetrize(&(u * inner * u.transpose()))
}

/// Reduced QR `A = Q R` with `Q` n×m, `R` m×m upper triangular and `diag(R) ≥ 0`.
pub fn qr_reduced(a: &Mat) -> Result<(Mat, Mat)> {
    let (n, m) = a.shape();
    if m == 0 || n < m {
        return invalid(format!("qr_reduced: need n >= m >= 1, got {n}x{m}"));
    }
    if !is_finite(a) {
        return invalid("qr_reduced: non-finite entry");
    }
    let qr = a.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    let scale = a.norm();
    for j in 0..m {
        if r[(j, j)].abs() < 1e-12 * scale || scale == 0.0 {
            return Err(Error::RankDeficient(format!(
                "qr_reduced: |R[{j},{j}]| = {:e} relative to ||A|| = {scale:e}",
                r[(j, j)].abs()
            )));
        }
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
            r.row_mut(j).neg_mut();
        }
    }
    Ok((q, r))
}

/// Lower Cholesky factor with strictly positive diagonal.
pub fn cholesky_lower(m: &Mat) -> Result<Mat> {
    check_square(m, "cholesky_lower")?;
    let n = m.nrows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut pivot = m[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if pivot <= 0.0 || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite(format!("cholesky pivot {j} is {pivot:e}")));
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = 0.5 * (m[(i, j)] + m[(j, i)]);
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Adjoint of `cholesky_lower`: given `∂f/∂L` returns the symmetric `∂f/∂M`.
///
/// `M̄ = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹)`, Φ = lower triangle with halved diagonal.
pub fn cholesky_backward(l: &Mat, d_l: &Mat) -> Result<Mat> {
    let n = l.nrows();
    if l.shape() != (n, n) || d_l.shape() != (n, n) {
        return invalid("cholesky_backward: shape mismatch");
    }
    let mut d_lower = d_l.clone();
    d_lower.fill_upper_triangle(0.0, 1);
    let mut p = l.transpose() * d_lower;
    p.fill_upper_triangle(0.0, 1);
    for i in 0..n {
        p[(i, i)] *= 0.5;
    }
    let lt = l.transpose();
    let x = lt
        .solve_upper_triangular(&p)
        .ok_or_else(|| Error::NotPositiveDefinite("cholesky_backward: singular factor".into()))?;
    let y = lt
        .solve_upper_triangular(&x.transpose())
        .ok_or_else(|| Error::NotPositiveDefinite("cholesky_backward: singular factor".into()))?;
    Ok(symmetrize(&y.transpose()))
}

/// Checks symmetry and strictly positive spectrum.
pub fn assert_spd(m: &Mat) -> Result<()> {
    check_square(m, "assert_spd")?;
    let asym = (m - m.transpose()).norm();
    if asym > 1e-9 * m.norm().max(1.0) {
        return invalid(format!("assert_spd: asymmetry {asym:e}"));
    }
    let pair = sym_eig(m)?;
    let min = pair.values[pair.dim() - 1];
    if min <= 0.0 {
        return Err(Error::NotPositiveDefinite(format!("smallest eigenvalue {min:e}")));
    }
    Ok(())
}

pub fn min_eigenvalue(m: &Mat) -> Result<f64> {
    let pair = sym_eig(m)?;
    Ok(pair.values[pair.dim() - 1])
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn cholesky_round_trip(vals in proptest::collection::vec(-2.0f64..2.0, 10), diag in proptest::collection::vec(0.1f64..3.0, 4)) {
            let mut l = Mat::zeros(4, 4);
            let mut k = 0;
            for i in 0..4 {
                l[(i, i)] = diag[i];
                for j in 0..i {
                    l[(i, j)] = vals[k];
                    k += 1;
                }
            }
            let back = cholesky_lower(&(&l * l.transpose())).unwrap();
            prop_assert!((back - l).amax() < 1e-9);
        }

        #[test]
        fn qr_is_bit_deterministic(vals in proptest::collection::vec(-1.0f64..1.0, 12)) {
            let a = Mat::from_row_slice(4, 3, &vals);
            if let (Ok(x), Ok(y)) = (qr_reduced(&a), qr_reduced(&a)) {
                prop_assert_eq!(x, y);
            }
        }
    }
}
