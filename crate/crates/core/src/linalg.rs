//! Dense linear algebra in weighted L² geometries.
//!
//! An operator between finite state spaces is stored as a plain matrix acting on
//! function values. Inner products carry the marginal pmf of each space, so the
//! Euclidean machinery of nalgebra is applied to the rescaled matrix
//! `D_r^{1/2} A D_d^{-1/2}` and mapped back.

use nalgebra::{DMatrix, DVector};

use crate::error::{KrasError, Result};

/// Eigenvalues in `(-PSD_TOL, 0]` are treated as numerical drift and clamped to zero.
pub const PSD_TOL: f64 = 1e-10;

/// Relative cutoff below which singular values and eigenvalues count as zero
/// for range projections and pseudo-inverses.
pub const RANK_RTOL: f64 = 1e-12;

/// Eigenpairs of a symmetric matrix; eigenvectors are the columns of `eigenvectors`.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

fn to_faer(m: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Symmetric eigendecomposition by faer. nalgebra's QR iteration stops with
/// reconstruction errors near 1e-9 on some well-conditioned kernel matrices.
pub fn sym_eigen(m: DMatrix<f64>) -> SymEigen {
    let n = m.nrows();
    let evd = to_faer(&m).selfadjoint_eigendecomposition(faer::Side::Lower);
    let s = evd.s().column_vector();
    let u = evd.u();
    SymEigen { eigenvalues: DVector::from_fn(n, |i, _| s.read(i)), eigenvectors: DMatrix::from_fn(n, n, |i, j| u.read(i, j)) }
}

/// Thin SVD `(U, σ, V)` by faer.
pub fn thin_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (r, c) = m.shape();
    let k = r.min(c);
    let svd = to_faer(m).thin_svd();
    let (u, s, v) = (svd.u(), svd.s_diagonal(), svd.v());
    (DMatrix::from_fn(r, k, |i, j| u.read(i, j)), DVector::from_fn(k, |i, _| s.read(i)), DMatrix::from_fn(c, k, |i, j| v.read(i, j)))
}

fn sqrt_weights(w: &DVector<f64>) -> DVector<f64> {
    w.map(f64::sqrt)
}

/// `diag(d) * m * diag(e)`.
pub fn scale_rows_cols(m: &DMatrix<f64>, d: &DVector<f64>, e: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| d[i] * m[(i, j)] * e[j])
}

/// Eigendecomposition of an operator that is self-adjoint in `L²(w)`.
#[derive(Clone, Debug)]
pub struct WeightedEigen {
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors of the symmetrized matrix `D^{1/2} A D^{-1/2}`.
    pub vectors: DMatrix<f64>,
    sqrt_w: DVector<f64>,
}

impl WeightedEigen {
    pub fn new(a: &DMatrix<f64>, w: &DVector<f64>) -> Self {
        let sw = sqrt_weights(w);
        let inv = sw.map(|v| 1.0 / v);
        let b = scale_rows_cols(a, &sw, &inv);
        let sym = (&b + b.transpose()) * 0.5;
        let eig = sym_eigen(sym);
        WeightedEigen { values: eig.eigenvalues, vectors: eig.eigenvectors, sqrt_w: sw }
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rejects eigenvalues below `-PSD_TOL` and clamps the rest at zero.
    pub fn clamped(&self) -> Result<DVector<f64>> {
        let min = self.min_value();
        if min < -PSD_TOL {
            return Err(KrasError::NotPsd(min));
        }
        Ok(self.values.map(|v| v.max(0.0)))
    }

    /// `f(A)` for a function applied to the (unclamped) spectrum.
    pub fn apply_fn(&self, values: &DVector<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let fv = values.map(f);
        let u = &self.vectors;
        let mut core = u.clone();
        for (j, mut col) in core.column_iter_mut().enumerate() {
            col *= fv[j];
        }
        let core = core * u.transpose();
        let inv = self.sqrt_w.map(|v| 1.0 / v);
        scale_rows_cols(&core, &inv, &self.sqrt_w)
    }

    /// Threshold separating zero from nonzero eigenvalues.
    pub fn rank_cutoff(&self) -> f64 {
        let scale = self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        (scale * RANK_RTOL).max(PSD_TOL)
    }
}

/// `A^p` for `A` self-adjoint and PSD in `L²(w)`. `p = 0` gives the projection onto the range.
pub fn weighted_power(a: &DMatrix<f64>, w: &DVector<f64>, p: f64) -> Result<DMatrix<f64>> {
    let eig = WeightedEigen::new(a, w);
    let vals = eig.clamped()?;
    let cut = eig.rank_cutoff();
    // Positive powers are continuous at zero and need no rank cut.
    Ok(eig.apply_fn(&vals, |v| if p > 0.0 { v.powf(p) } else if v <= cut { 0.0 } else if p == 0.0 { 1.0 } else { v.powf(p) }))
}

/// Singular value decomposition of an operator `L²(w_d) -> L²(w_r)`.
#[derive(Clone, Debug)]
pub struct WeightedSvd {
    /// Left singular vectors in rescaled coordinates (columns).
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    /// Right singular vectors in rescaled coordinates (columns).
    pub v: DMatrix<f64>,
    sqrt_wd: DVector<f64>,
    sqrt_wr: DVector<f64>,
}

impl WeightedSvd {
    pub fn new(a: &DMatrix<f64>, w_domain: &DVector<f64>, w_range: &DVector<f64>) -> Self {
        let swd = sqrt_weights(w_domain);
        let swr = sqrt_weights(w_range);
        let inv_d = swd.map(|v| 1.0 / v);
        let b = scale_rows_cols(a, &swr, &inv_d);
        let (u, singular_values, v) = thin_svd(&b);
        WeightedSvd { u, singular_values, v, sqrt_wd: swd, sqrt_wr: swr }
    }

    pub fn max_singular(&self) -> f64 {
        self.singular_values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn rank_cutoff(&self) -> f64 {
        self.max_singular() * RANK_RTOL
    }

    pub fn rank(&self) -> usize {
        let cut = self.rank_cutoff();
        self.singular_values.iter().filter(|s| **s > cut).count()
    }

    /// `f(A* A)` as an operator on the domain, with `f` applied to squared singular values.
    /// Directions outside the row space are sent to `f(0)` only when `keep_null` is set.
    pub fn gram_fn(&self, f: impl Fn(f64) -> f64, keep_null: bool) -> DMatrix<f64> {
        let n = self.sqrt_wd.len();
        let cut = self.rank_cutoff();
        let mut core = DMatrix::zeros(n, n);
        let mut used = Vec::new();
        for (j, s) in self.singular_values.iter().enumerate() {
            if *s <= cut {
                continue;
            }
            let col = self.v.column(j);
            core += col * col.transpose() * f(s * s);
            used.push(col.into_owned());
        }
        let used = columns(n, &used);
        if keep_null {
            // Complement of the row space, built as I - V_r V_r^T.
            let proj = DMatrix::identity(n, n) - &used * used.transpose();
            core += proj * f(0.0);
        }
        let inv = self.sqrt_wd.map(|v| 1.0 / v);
        scale_rows_cols(&core, &inv, &self.sqrt_wd)
    }

    /// Spectral filter `Σ f(σ_j) v_j ⟨u_j, ·⟩` as an operator `L²(w_r) -> L²(w_d)`,
    /// summed over nonzero singular values.
    pub fn filtered(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let cut = self.rank_cutoff();
        let (nd, nr) = (self.sqrt_wd.len(), self.sqrt_wr.len());
        let mut core = DMatrix::zeros(nd, nr);
        for (j, s) in self.singular_values.iter().enumerate() {
            if *s > cut {
                core += self.v.column(j) * self.u.column(j).transpose() * f(*s);
            }
        }
        let inv = self.sqrt_wd.map(|v| 1.0 / v);
        scale_rows_cols(&core, &inv, &self.sqrt_wr)
    }

    /// Weighted Moore-Penrose pseudo-inverse `L²(w_r) -> L²(w_d)`.
    pub fn pinv(&self) -> DMatrix<f64> {
        self.filtered(|s| 1.0 / s)
    }

    /// Coordinates `⟨f, v_j⟩` of a domain function along the nonzero right singular vectors,
    /// paired with the singular values.
    pub fn right_coordinates(&self, f: &DVector<f64>) -> Vec<(f64, f64)> {
        let cut = self.rank_cutoff();
        let scaled = f.component_mul(&self.sqrt_wd);
        self.singular_values
            .iter()
            .enumerate()
            .filter(|(_, s)| **s > cut)
            .map(|(j, s)| (*s, self.v.column(j).dot(&scaled)))
            .collect()
    }

    /// Orthonormal (in `L²(w_d)`) basis of the null space, as columns of function values.
    pub fn null_basis(&self) -> DMatrix<f64> {
        let n = self.sqrt_wd.len();
        let cut = self.rank_cutoff();
        let mut basis = Vec::new();
        // Row space spanned by retained v's; complete it through the eigenvectors of the complementary projector.
        let kept: Vec<DVector<f64>> = self
            .singular_values
            .iter()
            .enumerate()
            .filter(|(_, s)| **s > cut)
            .map(|(j, _)| self.v.column(j).into_owned())
            .collect();
        let vr = columns(n, &kept);
        let proj = DMatrix::identity(n, n) - &vr * vr.transpose();
        let eig = sym_eigen((&proj + proj.transpose()) * 0.5);
        for (j, ev) in eig.eigenvalues.iter().enumerate() {
            if *ev > 0.5 {
                basis.push(eig.eigenvectors.column(j).component_div(&self.sqrt_wd));
            }
        }
        columns(n, &basis)
    }
}

/// Weighted adjoint `A* = D_d^{-1} A^T D_r`.
/// Stacks vectors of length `n` as columns; an `n × 0` matrix when empty.
pub fn columns(n: usize, cols: &[DVector<f64>]) -> DMatrix<f64> {
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(cols)
    }
}

pub fn weighted_adjoint(a: &DMatrix<f64>, w_domain: &DVector<f64>, w_range: &DVector<f64>) -> DMatrix<f64> {
    let inv = w_domain.map(|v| 1.0 / v);
    scale_rows_cols(&a.transpose(), &inv, w_range)
}

pub fn weighted_inner(f: &DVector<f64>, g: &DVector<f64>, w: &DVector<f64>) -> f64 {
    f.iter().zip(g.iter()).zip(w.iter()).map(|((a, b), c)| a * b * c).sum()
}

pub fn weighted_norm(f: &DVector<f64>, w: &DVector<f64>) -> f64 {
    weighted_inner(f, f, w).max(0.0).sqrt()
}

/// Pseudo-inverse of a symmetric matrix through its eigendecomposition.
pub fn sym_pinv(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let eig = sym_eigen((m + m.transpose()) * 0.5);
    let scale = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let cut = scale * rtol;
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (j, ev) in eig.eigenvalues.iter().enumerate() {
        if ev.abs() > cut {
            let c = eig.eigenvectors.column(j);
            out += c * c.transpose() / *ev;
        }
    }
    out
}

/// Spectral condition number `s_max / s_min` (infinite for singular input).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = to_faer(m).singular_values();
    let max = s.iter().cloned().fold(0.0, f64::max);
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `m x = b` by LU, failing if the factorization is singular.
pub fn lu_solve(m: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| KrasError::Conditioning("singular linear system".into()))
}

/// Symmetric square root `M^{1/2}` of a PSD matrix in the Euclidean geometry.
pub fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sym_eigen((m + m.transpose()) * 0.5);
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (j, ev) in eig.eigenvalues.iter().enumerate() {
        if *ev < -PSD_TOL {
            return Err(KrasError::NotPsd(*ev));
        }
        let c = eig.eigenvectors.column(j);
        out += c * c.transpose() * ev.max(0.0).sqrt();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_psd(n: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &g * g.transpose()
    }

    #[test]
    fn diagonal_square_root_under_uniform_weights() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let w = DVector::from_vec(vec![0.5, 0.5]);
        let s = weighted_power(&a, &w, 0.5).unwrap();
        assert!((s[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((s[(1, 1)] - 1.0).abs() < 1e-14);
        assert!(s[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn weighted_power_reconstructs() {
        let k = random_psd(6, 3);
        let w = DVector::from_vec(vec![0.1, 0.2, 0.05, 0.25, 0.3, 0.1]);
        // T_H = K D is self-adjoint in L²(w).
        let t = scale_rows_cols(&k, &DVector::from_element(6, 1.0), &w);
        let s = weighted_power(&t, &w, 0.5).unwrap();
        assert!((&s * &s - &t).amax() < 1e-12);
    }

    #[test]
    fn negative_spectrum_is_rejected() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-6]));
        let w = DVector::from_vec(vec![0.5, 0.5]);
        assert!(matches!(weighted_power(&a, &w, 0.5), Err(KrasError::NotPsd(_))));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-12]));
        assert!(weighted_power(&b, &w, 0.5).is_ok());
    }

    #[test]
    fn weighted_pinv_is_moore_penrose() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0));
        let wd = DVector::from_vec(vec![0.1, 0.3, 0.2, 0.15, 0.25]);
        let wr = DVector::from_vec(vec![0.5, 0.2, 0.3]);
        let svd = WeightedSvd::new(&a, &wd, &wr);
        let p = svd.pinv();
        assert!((&a * &p * &a - &a).amax() < 1e-12);
        assert!((&p * &a * &p - &p).amax() < 1e-12);
        // P A is self-adjoint in L²(wd).
        let pa = &p * &a;
        let adj = weighted_adjoint(&pa, &wd, &wd);
        assert!((&pa - adj).amax() < 1e-12);
        let null = svd.null_basis();
        assert_eq!(null.ncols(), 2);
        assert!((&a * &null).amax() < 1e-12);
    }
}
