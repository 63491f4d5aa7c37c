//! Finite-state workbench: every operator is an explicit matrix, so solutions,
//! source conditions and errors can be computed exactly.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Observation};
use crate::dml::{MomentSpec, Term};
use crate::error::{invalid, KrasError, Result};
use crate::kernels::{gram, KernelSpec, X0Set};
use crate::linalg::{
    columns, scale_rows_cols, sym_pinv, sym_sqrt, weighted_adjoint, weighted_inner, weighted_norm, weighted_power,
    WeightedEigen, WeightedSvd, PSD_TOL, RANK_RTOL,
};

/// A support point with the index of its X-component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub point: Vec<f64>,
    pub x: usize,
}

/// Finite joint law of `(W, Z)` with the weight `r`, the structural-zero set and
/// an optional conditional mean of the auxiliary outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDGP {
    pub w_support: Vec<State>,
    pub z_support: Vec<State>,
    pub x_values: Vec<f64>,
    /// `P(w, z)`, rows indexed by W-states.
    pub joint_pmf: DMatrix<f64>,
    pub r_table: DMatrix<f64>,
    pub x0_mask: Vec<bool>,
    /// `E[s | w, z]`; zero when absent.
    pub aux_mean: Option<DMatrix<f64>>,
    /// Half-width `a` of the uniform noise added to `s` when sampling.
    pub noise_halfwidth: f64,
}

impl DiscreteDGP {
    pub fn new(
        w_support: Vec<State>,
        z_support: Vec<State>,
        x_values: Vec<f64>,
        joint_pmf: DMatrix<f64>,
        r_table: DMatrix<f64>,
        x0_mask: Vec<bool>,
    ) -> Result<Self> {
        let dgp = DiscreteDGP {
            w_support,
            z_support,
            x_values,
            joint_pmf,
            r_table,
            x0_mask,
            aux_mean: None,
            noise_halfwidth: 0.0,
        };
        dgp.validate()?;
        Ok(dgp)
    }

    pub fn with_aux(mut self, aux_mean: DMatrix<f64>, noise_halfwidth: f64) -> Result<Self> {
        if aux_mean.shape() != self.joint_pmf.shape() || aux_mean.iter().any(|v| !v.is_finite()) {
            return invalid("aux_mean must be a finite W×Z table");
        }
        if !(noise_halfwidth >= 0.0) {
            return invalid("noise half-width must be nonnegative");
        }
        self.aux_mean = Some(aux_mean);
        self.noise_halfwidth = noise_halfwidth;
        Ok(self)
    }

    pub fn with_x0_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        self.x0_mask = mask;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let (nw, nz) = (self.w_support.len(), self.z_support.len());
        if nw == 0 || nz == 0 {
            return invalid("empty support");
        }
        if self.joint_pmf.shape() != (nw, nz) || self.r_table.shape() != (nw, nz) {
            return invalid("pmf and r tables must be W×Z");
        }
        if self.x0_mask.len() != self.x_values.len() {
            return invalid("x0_mask needs one entry per X-value");
        }
        let nx = self.x_values.len();
        if self.w_support.iter().chain(&self.z_support).any(|s| s.x >= nx) {
            return invalid("state tagged with an unknown X-value");
        }
        for i in 0..nx {
            for j in 0..i {
                if self.x_values[i].to_bits() == self.x_values[j].to_bits() {
                    return invalid("X-values must be distinct");
                }
            }
        }
        if self.joint_pmf.iter().any(|p| !(*p >= 0.0)) {
            return invalid("pmf entries must be nonnegative");
        }
        let total: f64 = self.joint_pmf.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("pmf sums to {total}, not 1"));
        }
        if self.r_table.iter().any(|v| !v.is_finite()) {
            return invalid("r table must be finite");
        }
        for w in 0..nw {
            for z in 0..nz {
                if self.joint_pmf[(w, z)] > 0.0 && self.w_support[w].x != self.z_support[z].x {
                    return invalid(format!("cell ({w},{z}) has mass but mismatched X tags"));
                }
            }
        }
        if self.p_w().iter().chain(self.p_z().iter()).any(|p| *p <= 0.0) {
            return Err(KrasError::InvalidInput("zero marginal state: conditional law undefined".into()));
        }
        Ok(())
    }

    pub fn nw(&self) -> usize {
        self.w_support.len()
    }

    pub fn nz(&self) -> usize {
        self.z_support.len()
    }

    pub fn p_w(&self) -> DVector<f64> {
        DVector::from_iterator(self.nw(), self.joint_pmf.row_iter().map(|r| r.sum()))
    }

    pub fn p_z(&self) -> DVector<f64> {
        DVector::from_iterator(self.nz(), self.joint_pmf.column_iter().map(|c| c.sum()))
    }

    pub fn i0_w(&self) -> DVector<f64> {
        DVector::from_iterator(self.nw(), self.w_support.iter().map(|s| f64::from(u8::from(self.x0_mask[s.x]))))
    }

    pub fn i0_z(&self) -> DVector<f64> {
        DVector::from_iterator(self.nz(), self.z_support.iter().map(|s| f64::from(u8::from(self.x0_mask[s.x]))))
    }

    pub fn w_points(&self) -> Vec<Vec<f64>> {
        self.w_support.iter().map(|s| s.point.clone()).collect()
    }

    pub fn z_points(&self) -> Vec<Vec<f64>> {
        self.z_support.iter().map(|s| s.point.clone()).collect()
    }

    /// The structural-zero set as a set of X-values.
    pub fn x0_set(&self) -> X0Set {
        X0Set::Values {
            values: self.x_values.iter().zip(&self.x0_mask).filter(|(_, m)| **m).map(|(v, _)| *v).collect(),
        }
    }

    pub fn r_sup(&self) -> f64 {
        self.r_table.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// The law seen from the adjoint equation: W and Z exchanged, with its own X₀.
    pub fn transposed(&self, x0_mask: Vec<bool>) -> Result<DiscreteDGP> {
        DiscreteDGP::new(
            self.z_support.clone(),
            self.w_support.clone(),
            self.x_values.clone(),
            self.joint_pmf.transpose(),
            self.r_table.transpose(),
            x0_mask,
        )
    }

    fn observation(&self, w: usize, z: usize, s: f64) -> Observation {
        Observation {
            w: self.w_support[w].point.clone(),
            z: self.z_support[z].point.clone(),
            x: self.x_values[self.w_support[w].x],
            s,
            r: self.r_table[(w, z)],
            w_index: Some(w),
            z_index: Some(z),
        }
    }

    fn aux(&self, w: usize, z: usize) -> f64 {
        self.aux_mean.as_ref().map_or(0.0, |a| a[(w, z)])
    }

    /// One row per cell of positive mass, weighted by the pmf, with `s` at its conditional mean.
    /// Empirical means over this dataset are exact expectations.
    pub fn population_dataset(&self) -> Result<Dataset> {
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for w in 0..self.nw() {
            for z in 0..self.nz() {
                let p = self.joint_pmf[(w, z)];
                if p > 0.0 {
                    rows.push(self.observation(w, z, self.aux(w, z)));
                    weights.push(p);
                }
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|v| *v /= total);
        Dataset::weighted(rows, weights)
    }

    /// `n` i.i.d. cells with `s = E[s|w,z] + U(-a, a)`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n < 2 {
            return invalid(format!("sample size must be at least 2, got {n}"));
        }
        let mut cells = Vec::new();
        let mut cum = Vec::new();
        let mut acc = 0.0;
        for w in 0..self.nw() {
            for z in 0..self.nz() {
                let p = self.joint_pmf[(w, z)];
                if p > 0.0 {
                    acc += p;
                    cells.push((w, z));
                    cum.push(acc);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = self.noise_halfwidth;
        let rows = (0..n)
            .map(|_| {
                let u: f64 = rng.gen::<f64>() * acc;
                let k = cum.partition_point(|c| *c <= u).min(cells.len() - 1);
                let (w, z) = cells[k];
                let noise = if a > 0.0 { rng.gen_range(-a..a) } else { 0.0 };
                self.observation(w, z, self.aux(w, z) + noise)
            })
            .collect();
        Dataset::new(rows)
    }
}

/// Exact lookup from a support point to its state index.
#[derive(Clone, Debug, Default)]
pub struct StateLookup(HashMap<Vec<u64>, usize>);

impl StateLookup {
    pub fn new(points: &[Vec<f64>]) -> Self {
        StateLookup(points.iter().enumerate().map(|(i, p)| (bits(p), i)).collect())
    }

    pub fn get(&self, point: &[f64]) -> Option<usize> {
        self.0.get(&bits(point)).copied()
    }

    /// Function defined by its values on the states; `NaN` off the support.
    pub fn function<'a>(&'a self, values: &'a DVector<f64>) -> impl Fn(&[f64], f64) -> f64 + 'a {
        move |p: &[f64], _x: f64| self.get(p).map_or(f64::NAN, |i| values[i])
    }
}

pub(crate) fn bits(p: &[f64]) -> Vec<u64> {
    p.iter().map(|v| v.to_bits()).collect()
}

/// A matrix acting on function values, with the pmfs of its domain and range.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorMatrix {
    /// `range_dim × domain_dim`.
    pub entries: DMatrix<f64>,
    pub domain_weights: DVector<f64>,
    pub range_weights: DVector<f64>,
}

impl OperatorMatrix {
    pub fn new(entries: DMatrix<f64>, domain_weights: DVector<f64>, range_weights: DVector<f64>) -> Result<Self> {
        if entries.shape() != (range_weights.len(), domain_weights.len()) {
            return invalid("operator shape does not match its weights");
        }
        for w in [&domain_weights, &range_weights] {
            if w.iter().any(|v| *v <= 0.0) || (w.sum() - 1.0).abs() > 1e-12 {
                return invalid("operator weights must be positive and sum to 1");
            }
        }
        Ok(OperatorMatrix { entries, domain_weights, range_weights })
    }

    pub fn apply(&self, f: &DVector<f64>) -> DVector<f64> {
        &self.entries * f
    }

    pub fn adjoint(&self) -> OperatorMatrix {
        OperatorMatrix {
            entries: weighted_adjoint(&self.entries, &self.domain_weights, &self.range_weights),
            domain_weights: self.range_weights.clone(),
            range_weights: self.domain_weights.clone(),
        }
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &OperatorMatrix) -> OperatorMatrix {
        OperatorMatrix {
            entries: &self.entries * &inner.entries,
            domain_weights: inner.domain_weights.clone(),
            range_weights: self.range_weights.clone(),
        }
    }

    /// Multiplies the output by a 0/1 mask on the range.
    pub fn masked_range(&self, mask: &DVector<f64>) -> OperatorMatrix {
        let ones = DVector::from_element(self.entries.ncols(), 1.0);
        OperatorMatrix { entries: scale_rows_cols(&self.entries, mask, &ones), ..self.clone() }
    }

    /// Largest `|⟨A e_i, e_j⟩ - ⟨e_i, A e_j⟩|` over basis pairs (square operators).
    pub fn self_adjointness_defect(&self) -> f64 {
        let w = &self.domain_weights;
        let n = w.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let lhs = self.entries[(j, i)] * w[j];
                let rhs = self.entries[(i, j)] * w[i];
                worst = worst.max((lhs - rhs).abs());
            }
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Adjoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    W,
    Z,
}

/// `T h(z) = E[r h(W) | z]` (forward) or `T* g(w) = E[r g(Z) | w]` (adjoint).
pub fn cond_exp_operator(dgp: &DiscreteDGP, direction: Direction) -> Result<OperatorMatrix> {
    let (pw, pz) = (dgp.p_w(), dgp.p_z());
    if pw.iter().chain(pz.iter()).any(|p| *p <= 0.0) {
        return invalid("zero marginal state: conditional law undefined");
    }
    match direction {
        Direction::Forward => {
            let e = DMatrix::from_fn(dgp.nz(), dgp.nw(), |z, w| dgp.r_table[(w, z)] * dgp.joint_pmf[(w, z)] / pz[z]);
            OperatorMatrix::new(e, pw, pz)
        }
        Direction::Adjoint => {
            let e = DMatrix::from_fn(dgp.nw(), dgp.nz(), |w, z| dgp.r_table[(w, z)] * dgp.joint_pmf[(w, z)] / pw[w]);
            OperatorMatrix::new(e, pz, pw)
        }
    }
}

/// `T_H f(v) = Σ_ṽ K(v, ṽ) f(ṽ) P(ṽ)` on the W- or Z-states.
pub fn kernel_integral_operator(dgp: &DiscreteDGP, kernel: &KernelSpec, side: Side) -> Result<OperatorMatrix> {
    kernel.validate()?;
    let (points, p) = match side {
        Side::W => (dgp.w_points(), dgp.p_w()),
        Side::Z => (dgp.z_points(), dgp.p_z()),
    };
    let k = gram(kernel, &points)?;
    let ones = DVector::from_element(p.len(), 1.0);
    let op = OperatorMatrix::new(scale_rows_cols(&k, &ones, &p), p.clone(), p)?;
    let min = WeightedEigen::new(&op.entries, &op.domain_weights).min_value();
    if min < -PSD_TOL {
        return Err(KrasError::NotPsd(min));
    }
    Ok(op)
}

/// Square root of a self-adjoint PSD operator on one weighted space.
pub fn operator_sqrt(op: &OperatorMatrix) -> Result<OperatorMatrix> {
    if op.domain_weights != op.range_weights {
        return invalid("operator_sqrt needs an operator on a single space");
    }
    let s = weighted_power(&op.entries, &op.domain_weights, 0.5)?;
    OperatorMatrix::new(s, op.domain_weights.clone(), op.range_weights.clone())
}

/// RKHS norm of the function with the given values on `points`, `sqrt(fᵀ K⁺ f)`.
/// Infinite when the values are not in the span of the kernel sections.
pub fn rkhs_norm_of_values(kernel: &KernelSpec, points: &[Vec<f64>], f: &DVector<f64>) -> Result<f64> {
    let k = gram(kernel, points)?;
    let eig = crate::linalg::sym_eigen(k);
    let scale = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cut = scale * RANK_RTOL;
    let mut norm2 = 0.0;
    let mut resid2 = 0.0;
    for (j, ev) in eig.eigenvalues.iter().enumerate() {
        let c = eig.eigenvectors.column(j).dot(f);
        if *ev > cut {
            norm2 += c * c / ev;
        } else {
            resid2 += c * c;
        }
    }
    if resid2.sqrt() > 1e-8 * f.norm().max(1.0) {
        return Ok(f64::INFINITY);
    }
    Ok(norm2.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `h0† = (T_H T* I₀ T)^{β/2} h*` with `h* ∈ H`.
    Basic,
    /// `h0† = T_H^{1/2} (T̃* T̃)^{β/2} h**`.
    Transformed,
}

/// An instance of `T I₀ h = ρ` whose minimal-norm solution satisfies a β-source condition.
#[derive(Clone, Debug)]
pub struct SourceProblem {
    pub dgp: DiscreteDGP,
    pub kernel_h: KernelSpec,
    pub kernel_g: KernelSpec,
    pub t: OperatorMatrix,
    pub t_h: OperatorMatrix,
    pub t_h_sqrt: OperatorMatrix,
    /// `I₀ ∘ T ∘ T_H^{1/2}`.
    pub t_tilde: OperatorMatrix,
    pub beta: f64,
    pub variant: Variant,
    pub h0_dag: DVector<f64>,
    pub rho: DVector<f64>,
    /// `h*` for the basic variant, `h**` for the transformed one.
    pub seed_vector: DVector<f64>,
    svd: WeightedSvd,
}

fn standard_normal_vector(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_iterator(n, (0..n).map(|_| -> f64 { StandardNormal.sample(&mut rng) }))
}

struct Operators {
    t: OperatorMatrix,
    t_h: OperatorMatrix,
    s: OperatorMatrix,
    t_tilde: OperatorMatrix,
    svd: WeightedSvd,
}

fn operators(dgp: &DiscreteDGP, kernel_h: &KernelSpec) -> Result<Operators> {
    let t = cond_exp_operator(dgp, Direction::Forward)?;
    let t_h = kernel_integral_operator(dgp, kernel_h, Side::W)?;
    let s = operator_sqrt(&t_h)?;
    let t_tilde = t.masked_range(&dgp.i0_z()).compose(&s);
    let svd = WeightedSvd::new(&t_tilde.entries, &t_tilde.domain_weights, &t_tilde.range_weights);
    Ok(Operators { t, t_h, s, t_tilde, svd })
}

/// `C^{p} f` for `C = T_H T* I₀ T`, computed in the Euclidean geometry of the Gram matrix:
/// `C = K G` with `G = Tᵀ D_Z I₀ T` is similar to `K^{1/2} G K^{1/2}`.
fn basic_power_apply(dgp: &DiscreteDGP, kernel_h: &KernelSpec, t: &OperatorMatrix, p: f64, f: &DVector<f64>) -> Result<DVector<f64>> {
    let k = gram(kernel_h, &dgp.w_points())?;
    let dz = dgp.p_z().component_mul(&dgp.i0_z());
    let ones = DVector::from_element(dgp.nw(), 1.0);
    let g = t.entries.transpose() * scale_rows_cols(&t.entries, &dz, &ones);
    let kh = sym_sqrt(&k)?;
    let kh_inv = sym_pinv(&kh, RANK_RTOL);
    let f_mat = &kh * g * &kh;
    let eig = crate::linalg::sym_eigen((&f_mat + f_mat.transpose()) * 0.5);
    let scale = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cut = scale * RANK_RTOL;
    let mut fp = DMatrix::zeros(dgp.nw(), dgp.nw());
    for (j, ev) in eig.eigenvalues.iter().enumerate() {
        if *ev < -PSD_TOL {
            return Err(KrasError::NotPsd(*ev));
        }
        if *ev > cut {
            let c = eig.eigenvectors.column(j);
            fp += c * c.transpose() * if p == 0.0 { 1.0 } else { ev.powf(p) };
        }
    }
    Ok(kh * fp * kh_inv * f)
}

/// Draws a standard-normal seed and builds `h0†` under the chosen source condition.
pub fn make_source_problem(
    dgp: &DiscreteDGP,
    kernel_h: &KernelSpec,
    kernel_g: &KernelSpec,
    beta: f64,
    variant: Variant,
    seed: u64,
) -> Result<SourceProblem> {
    let seed_vec = standard_normal_vector(dgp.nw(), seed);
    source_problem_from_seed(dgp, kernel_h, kernel_g, beta, variant, seed_vec)
}

/// As [`make_source_problem`] with an explicit seed vector (`h*` or `h**`).
pub fn source_problem_from_seed(
    dgp: &DiscreteDGP,
    kernel_h: &KernelSpec,
    kernel_g: &KernelSpec,
    beta: f64,
    variant: Variant,
    seed_vector: DVector<f64>,
) -> Result<SourceProblem> {
    if !(beta > 0.0) {
        return invalid(format!("beta must be positive, got {beta}"));
    }
    if seed_vector.len() != dgp.nw() {
        return invalid("seed vector must live on the W-states");
    }
    let ops = operators(dgp, kernel_h)?;
    if ops.svd.max_singular() <= 1e-14 {
        return Err(KrasError::Inconsistent("composite operator is effectively zero".into()));
    }
    let h0_dag = match variant {
        Variant::Transformed => {
            let power = ops.svd.gram_fn(|s2| s2.powf(beta / 2.0), false);
            ops.s.apply(&(power * &seed_vector))
        }
        Variant::Basic => basic_power_apply(dgp, kernel_h, &ops.t, beta / 2.0, &seed_vector)?,
    };
    let rho = ops.t.apply(&h0_dag.component_mul(&dgp.i0_w()));
    Ok(SourceProblem {
        dgp: dgp.clone(),
        kernel_h: kernel_h.clone(),
        kernel_g: kernel_g.clone(),
        t: ops.t,
        t_h: ops.t_h,
        t_h_sqrt: ops.s,
        t_tilde: ops.t_tilde,
        beta,
        variant,
        h0_dag,
        rho,
        seed_vector,
        svd: ops.svd,
    })
}

/// Exact error measures of a candidate `h` against `h0†`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExactErrors {
    pub rmse: f64,
    pub weak_error: f64,
    pub rkhs_error: f64,
}

impl SourceProblem {
    pub fn svd(&self) -> &WeightedSvd {
        &self.svd
    }

    /// Residual `‖T I₀ h0† - ρ‖` in `L²(P_Z)`.
    pub fn residual(&self) -> f64 {
        let img = self.t.apply(&self.h0_dag.component_mul(&self.dgp.i0_w()));
        weighted_norm(&(img - &self.rho), &self.t.range_weights)
    }

    /// `T̃⁺ ρ`, the minimal-L²-norm solution of `T̃ h′ = ρ`.
    pub fn h_prime_min_norm(&self) -> DVector<f64> {
        self.svd.pinv() * &self.rho
    }

    /// `h′_λ = argmin ¼‖ρ - T̃h′‖² + λ‖h′‖²`, i.e. `(T̃*T̃ + 4λ)^{-1} T̃* ρ`.
    pub fn h_prime_regularized(&self, lambda: f64) -> DVector<f64> {
        self.svd.filtered(|s| s / (s * s + 4.0 * lambda)) * &self.rho
    }

    /// `h_λ = T_H^{1/2} h′_λ`.
    pub fn regularized_solution(&self, lambda: f64) -> DVector<f64> {
        self.t_h_sqrt.apply(&self.h_prime_regularized(lambda))
    }

    /// `(‖h_λ - h0†‖²_H, ‖I₀T(h_λ - h0†)‖²)` evaluated in spectral coordinates of `T̃`.
    pub fn bias(&self, lambda: f64) -> (f64, f64) {
        let coords = self.svd.right_coordinates(&self.h_prime_min_norm());
        let mut h = 0.0;
        let mut weak = 0.0;
        for (s, c) in coords {
            let f = 4.0 * lambda / (s * s + 4.0 * lambda);
            h += f * f * c * c;
            weak += s * s * f * f * c * c;
        }
        (h, weak)
    }

    /// Directions `T_H^{1/2} u` with `u ∈ N(T̃)`, nonzero in H; columns of function values.
    pub fn null_directions(&self) -> DMatrix<f64> {
        let basis = self.svd.null_basis();
        let kept: Vec<DVector<f64>> = basis
            .column_iter()
            .map(|c| self.t_h_sqrt.apply(&c.into_owned()))
            .filter(|v| weighted_norm(v, &self.t.domain_weights) > 1e-8)
            .collect();
        columns(self.dgp.nw(), &kept)
    }

    pub fn rkhs_norm(&self, f: &DVector<f64>) -> Result<f64> {
        rkhs_norm_of_values(&self.kernel_h, &self.dgp.w_points(), f)
    }
}

/// `T_H^{1/2} T̃⁺ ρ`, the minimal RKHS-norm solution of `I₀ T h = ρ`.
pub fn min_norm_solution(problem: &SourceProblem) -> Result<DVector<f64>> {
    let hp = problem.h_prime_min_norm();
    let resid = problem.t_tilde.apply(&hp) - &problem.rho;
    let scale = weighted_norm(&problem.rho, &problem.t.range_weights).max(1.0);
    if weighted_norm(&resid, &problem.t.range_weights) > 1e-8 * scale {
        return Err(KrasError::Inconsistent("rho is not in the range of the transformed operator".into()));
    }
    Ok(problem.t_h_sqrt.apply(&hp))
}

pub fn exact_errors(problem: &SourceProblem, h: &DVector<f64>) -> Result<ExactErrors> {
    if h.len() != problem.dgp.nw() {
        return invalid("h must be defined on the W-states");
    }
    let diff = h - &problem.h0_dag;
    let i0w = problem.dgp.i0_w();
    let rmse = weighted_norm(&diff.component_mul(&i0w), &problem.t.domain_weights);
    let weak = problem.t.apply(&diff).component_mul(&problem.dgp.i0_z());
    let weak_error = weighted_norm(&weak, &problem.t.range_weights);
    let rkhs_error = problem.rkhs_norm(&diff)?;
    Ok(ExactErrors { rmse, weak_error, rkhs_error })
}

/// The three representations of θ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ThetaTriple {
    /// `E[m̃(O; h0)]`.
    pub psi: f64,
    /// `E[m(O; g0)]`.
    pub phi: f64,
    /// `E[r h0 g0]`.
    pub cross: f64,
}

/// Tolerance for the three-way agreement in [`theta_true`].
pub const THETA_TOL: f64 = 1e-9;

/// Exact `Ψ(h0)`, `Φ(g0)` and `E[r h0 g0]` over the workbench law.
pub fn theta_triple(dgp: &DiscreteDGP, spec: &dyn MomentSpec, h0: &DVector<f64>, g0: &DVector<f64>) -> Result<ThetaTriple> {
    let pop = dgp.population_dataset()?;
    let wl = StateLookup::new(&dgp.w_points());
    let zl = StateLookup::new(&dgp.z_points());
    let h = wl.function(h0);
    let g = zl.function(g0);
    let psi = pop.mean(|o| spec.m_tilde(o, &h));
    let phi = pop.mean(|o| spec.m(o, &g));
    let cross = pop.mean(|o| spec.r(o) * h(&o.w, o.x) * g(&o.z, o.x));
    if ![psi, phi, cross].iter().all(|v| v.is_finite()) {
        return invalid("moment terms evaluate functions off the workbench support");
    }
    Ok(ThetaTriple { psi, phi, cross })
}

/// `E[r h0 g0]`, after checking that Ψ and Φ agree with it.
pub fn theta_true(dgp: &DiscreteDGP, spec: &dyn MomentSpec, h0: &DVector<f64>, g0: &DVector<f64>) -> Result<f64> {
    let t = theta_triple(dgp, spec, h0, g0)?;
    let scale = t.cross.abs().max(1.0);
    for (name, a, b) in [("psi/cross", t.psi, t.cross), ("phi/cross", t.phi, t.cross), ("psi/phi", t.psi, t.phi)] {
        if (a - b).abs() > THETA_TOL * scale {
            return Err(KrasError::Inconsistent(format!("{name} disagree: {a} vs {b}")));
        }
    }
    Ok(t.cross)
}

/// Moment maps of the workbench: `m(o; g) = I₀(x) s g(z)` and `m̃(o; h) = π(w) h(w)`.
#[derive(Clone, Debug)]
pub struct WorkbenchMoments {
    /// `π` on the W-states; the Riesz representer `ρ̃`.
    pub pi: DVector<f64>,
    pub x0_h: X0Set,
    pub x0_g: X0Set,
}

impl MomentSpec for WorkbenchMoments {
    fn m_terms(&self, o: &Observation) -> Vec<Term> {
        vec![Term::new(self.x0_h.indicator(o.x) * o.s, o.z.clone(), o.x)]
    }
    fn m_tilde_terms(&self, o: &Observation) -> Vec<Term> {
        let w = o.w_index.expect("workbench rows carry W-state indices");
        vec![Term::new(self.pi[w], o.w.clone(), o.x)]
    }
    fn x0_h(&self) -> X0Set {
        self.x0_h.clone()
    }
    fn x0_g(&self) -> X0Set {
        self.x0_g.clone()
    }
}

/// A workbench law with both nuisance equations solved exactly.
#[derive(Clone, Debug)]
pub struct DmlWorkbench {
    /// Law with `E[s|w,z] = r I₀ h0†` so that `E[s|z] = ρ`.
    pub dgp: DiscreteDGP,
    pub h_problem: SourceProblem,
    /// Source problem of the adjoint equation on the transposed law.
    pub g_problem: SourceProblem,
    pub moments: WorkbenchMoments,
    /// `I₀ h0†` and `I₀' g0†`.
    pub h0: DVector<f64>,
    pub g0: DVector<f64>,
    pub theta: f64,
}

/// Builds both equations on one law: the h-equation with the law's X₀ and the
/// g-equation on the transposed law with `x0_g_mask`.
pub fn build_dml_workbench(
    dgp: &DiscreteDGP,
    kernel_h: &KernelSpec,
    kernel_g: &KernelSpec,
    beta: f64,
    x0_g_mask: Vec<bool>,
    noise_halfwidth: f64,
    seed: u64,
) -> Result<DmlWorkbench> {
    let h_problem = make_source_problem(dgp, kernel_h, kernel_g, beta, Variant::Transformed, seed)?;
    let dgp_t = dgp.transposed(x0_g_mask)?;
    let g_problem = make_source_problem(&dgp_t, kernel_g, kernel_h, beta, Variant::Transformed, seed ^ 0x9e37_79b9_7f4a_7c15)?;
    let i0w = dgp.i0_w();
    let h0 = h_problem.h0_dag.component_mul(&i0w);
    let g0 = g_problem.h0_dag.component_mul(&dgp_t.i0_w());
    let aux = DMatrix::from_fn(dgp.nw(), dgp.nz(), |w, z| dgp.r_table[(w, z)] * h0[w]);
    let law = dgp.clone().with_aux(aux, noise_halfwidth)?;
    let moments = WorkbenchMoments { pi: g_problem.rho.clone(), x0_h: dgp.x0_set(), x0_g: dgp_t.x0_set() };
    let theta = theta_true(&law, &moments, &h0, &g0)?;
    Ok(DmlWorkbench { dgp: law, h_problem, g_problem, moments, h0, g0, theta })
}

/// Parameters of a random workbench law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomDgpConfig {
    pub n_w: usize,
    pub n_z: usize,
    #[serde(default = "one_usize")]
    pub n_x: usize,
    /// `r` is drawn uniformly from `[r_low, r_high]`.
    #[serde(default = "half")]
    pub r_low: f64,
    #[serde(default = "three_halves")]
    pub r_high: f64,
    /// Draw X₀ at random (first X-value always kept); otherwise X₀ is everything.
    #[serde(default)]
    pub random_x0: bool,
}

fn one_usize() -> usize {
    1
}
fn half() -> f64 {
    0.5
}
fn three_halves() -> f64 {
    1.5
}

/// Random law on one-dimensional points `i + U(-0.2, 0.2)`. State `i` carries
/// X-value index `i mod n_x`, and cells with matching tags get mass `U(0.2, 1)`.
pub fn random_dgp(cfg: &RandomDgpConfig, seed: u64) -> Result<DiscreteDGP> {
    if cfg.n_x == 0 || cfg.n_w < cfg.n_x || cfg.n_z < cfg.n_x {
        return invalid("every X-value needs at least one W-state and one Z-state");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = |n: usize, rng: &mut ChaCha8Rng| -> Vec<State> {
        (0..n).map(|i| State { point: vec![i as f64 + rng.gen_range(-0.2..0.2)], x: i % cfg.n_x }).collect()
    };
    let w = states(cfg.n_w, &mut rng);
    let z = states(cfg.n_z, &mut rng);
    let mut pmf = DMatrix::from_fn(cfg.n_w, cfg.n_z, |i, j| if w[i].x == z[j].x { 1.0 } else { 0.0 });
    for v in pmf.iter_mut() {
        if *v > 0.0 {
            *v = rng.gen_range(0.2..1.0);
        }
    }
    let total = pmf.sum();
    pmf /= total;
    let r = DMatrix::from_fn(cfg.n_w, cfg.n_z, |_, _| rng.gen_range(cfg.r_low..=cfg.r_high));
    let x_values: Vec<f64> = (0..cfg.n_x).map(|v| v as f64).collect();
    let mask = (0..cfg.n_x).map(|i| i == 0 || !cfg.random_x0 || rng.gen_bool(0.5)).collect();
    DiscreteDGP::new(w, z, x_values, pmf, r, mask)
}

/// Law whose transformed operator `T̃ = T T_H^{1/2}` has prescribed singular values
/// `σ_j² = 10^{-decades · j/(n-1)}` and random singular vectors.
///
/// The pmf is random with full support on one X-value; `r` is solved for so that
/// `T = T̃ T_H^{-1/2}`, which is possible because `r` may be any bounded table.
pub fn spectral_dgp(n: usize, decades: f64, kernel_h: &KernelSpec, seed: u64) -> Result<DiscreteDGP> {
    if n < 2 || !(decades > 0.0) {
        return invalid("spectral law needs n >= 2 and a positive spectral range");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states: Vec<State> = (0..n).map(|i| State { point: vec![i as f64], x: 0 }).collect();
    let mut pmf = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.5..1.5));
    let total = pmf.sum();
    pmf /= total;
    let placeholder = DMatrix::from_element(n, n, 1.0);
    let base = DiscreteDGP::new(states.clone(), states.clone(), vec![0.0], pmf.clone(), placeholder, vec![true])?;
    let (pw, pz) = (base.p_w(), base.p_z());
    let t_h = kernel_integral_operator(&base, kernel_h, Side::W)?;
    let s_inv = weighted_power(&t_h.entries, &pw, -0.5)?;
    let orth = |rng: &mut ChaCha8Rng| {
        let g = DMatrix::from_fn(n, n, |_, _| -> f64 { StandardNormal.sample(rng) });
        g.qr().q()
    };
    let u = orth(&mut rng);
    let v = orth(&mut rng);
    let sig = DVector::from_fn(n, |j, _| 10f64.powf(-decades * j as f64 / (2.0 * (n - 1) as f64)));
    let core = &u * DMatrix::from_diagonal(&sig) * v.transpose();
    let tt = scale_rows_cols(&core, &pz.map(|p| 1.0 / p.sqrt()), &pw.map(f64::sqrt));
    let t = tt * s_inv;
    let r = DMatrix::from_fn(n, n, |w, z| t[(z, w)] * pz[z] / pmf[(w, z)]);
    DiscreteDGP::new(states.clone(), states, vec![0.0], pmf, r, vec![true])
}

/// `⟨f, g⟩` in the weights of the operator's domain.
pub fn domain_inner(op: &OperatorMatrix, f: &DVector<f64>, g: &DVector<f64>) -> f64 {
    weighted_inner(f, g, &op.domain_weights)
}

/// `⟨f, g⟩` in the weights of the operator's range.
pub fn range_inner(op: &OperatorMatrix, f: &DVector<f64>, g: &DVector<f64>) -> f64 {
    weighted_inner(f, g, &op.range_weights)
}

/// Largest `|⟨T e_w, e_z⟩_Z - ⟨e_w, T* e_z⟩_W|` over basis pairs.
pub fn adjointness_defect(t: &OperatorMatrix, t_star: &OperatorMatrix) -> f64 {
    let (nz, nw) = t.entries.shape();
    let mut worst: f64 = 0.0;
    for w in 0..nw {
        for z in 0..nz {
            let lhs = t.entries[(z, w)] * t.range_weights[z];
            let rhs = t_star.entries[(w, z)] * t.domain_weights[w];
            worst = worst.max((lhs - rhs).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dgp(seed: u64) -> DiscreteDGP {
        random_dgp(&RandomDgpConfig { n_w: 5, n_z: 4, n_x: 1, r_low: 0.5, r_high: 1.5, random_x0: false }, seed).unwrap()
    }

    fn independent_uniform(nw: usize, nz: usize, r: f64) -> DiscreteDGP {
        let w = (0..nw).map(|i| State { point: vec![i as f64], x: 0 }).collect();
        let z = (0..nz).map(|i| State { point: vec![i as f64], x: 0 }).collect();
        let pmf = DMatrix::from_element(nw, nz, 1.0 / (nw * nz) as f64);
        DiscreteDGP::new(w, z, vec![0.0], pmf, DMatrix::from_element(nw, nz, r), vec![true]).unwrap()
    }

    #[test]
    fn independence_gives_mean_operator() {
        let dgp = independent_uniform(3, 2, 1.0);
        let t = cond_exp_operator(&dgp, Direction::Forward).unwrap();
        let h = DVector::from_vec(vec![1.0, 2.0, 6.0]);
        let th = t.apply(&h);
        assert!(th.iter().all(|v| (v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn zero_weight_gives_zero_operator() {
        let t = cond_exp_operator(&independent_uniform(3, 2, 0.0), Direction::Forward).unwrap();
        assert!(t.entries.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn random_adjointness() {
        let dgp = small_dgp(11);
        let t = cond_exp_operator(&dgp, Direction::Forward).unwrap();
        let ts = cond_exp_operator(&dgp, Direction::Adjoint).unwrap();
        assert!(adjointness_defect(&t, &ts) <= 1e-12);
        assert!((t.adjoint().entries - &ts.entries).amax() < 1e-12);
    }

    #[test]
    fn zero_marginal_is_rejected() {
        let w = vec![State { point: vec![0.0], x: 0 }, State { point: vec![1.0], x: 0 }];
        let z = vec![State { point: vec![0.0], x: 0 }];
        let pmf = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let r = DMatrix::from_element(2, 1, 1.0);
        assert!(DiscreteDGP::new(w, z, vec![0.0], pmf, r, vec![true]).is_err());
    }

    #[test]
    fn scaled_delta_kernel_gives_identity() {
        let dgp = independent_uniform(4, 3, 1.0);
        let t_h = kernel_integral_operator(&dgp, &KernelSpec::discrete_delta(4.0), Side::W).unwrap();
        assert!((t_h.entries - DMatrix::identity(4, 4)).amax() < 1e-15);
    }

    #[test]
    fn two_state_gaussian_operator() {
        let dgp = independent_uniform(2, 2, 1.0);
        let k = KernelSpec::gaussian(1.0);
        let t_h = kernel_integral_operator(&dgp, &k, Side::W).unwrap();
        let off = (-0.5f64).exp() * 0.5;
        assert!((t_h.entries[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((t_h.entries[(0, 1)] - off).abs() < 1e-15);
        assert!((t_h.entries[(1, 0)] - off).abs() < 1e-15);
    }

    #[test]
    fn source_residual_and_recovery() {
        let dgp = small_dgp(5);
        let k = KernelSpec::gaussian(0.4);
        for variant in [Variant::Basic, Variant::Transformed] {
            let sp = make_source_problem(&dgp, &k, &k, 1.0, variant, 3).unwrap();
            assert!(sp.residual() <= 1e-10);
            let h = min_norm_solution(&sp).unwrap();
            assert!((h - &sp.h0_dag).amax() < 1e-8);
        }
        assert!(make_source_problem(&dgp, &k, &k, 0.0, Variant::Basic, 3).is_err());
    }

    #[test]
    fn vanishing_beta_projects_the_seed() {
        let dgp = small_dgp(8);
        let k = KernelSpec::gaussian(0.4);
        let sp = make_source_problem(&dgp, &k, &k, 1e-13, Variant::Transformed, 4).unwrap();
        let proj = sp.svd().gram_fn(|_| 1.0, false) * &sp.seed_vector;
        let want = sp.t_h_sqrt.apply(&proj);
        assert!((&sp.h0_dag - want).amax() < 1e-9);
    }

    #[test]
    fn zero_rho_gives_zero_solution() {
        let dgp = small_dgp(2);
        let k = KernelSpec::gaussian(0.4);
        let sp = source_problem_from_seed(&dgp, &k, &k, 1.0, Variant::Transformed, DVector::zeros(5)).unwrap();
        assert!(min_norm_solution(&sp).unwrap().amax() == 0.0);
    }

    #[test]
    fn bias_matches_vector_route() {
        let dgp = small_dgp(21);
        let k = KernelSpec::gaussian(0.4);
        let sp = make_source_problem(&dgp, &k, &k, 1.5, Variant::Transformed, 1).unwrap();
        for lambda in [1e-4, 1e-2, 1.0] {
            let (hb, wb) = sp.bias(lambda);
            let diff = sp.regularized_solution(lambda) - &sp.h0_dag;
            let e = exact_errors(&sp, &sp.regularized_solution(lambda)).unwrap();
            assert!((e.rkhs_error.powi(2) - hb).abs() < 1e-9 * hb.max(1e-3), "{} vs {hb}", e.rkhs_error.powi(2));
            assert!((e.weak_error.powi(2) - wb).abs() < 1e-10);
            assert!(diff.amax() > 0.0);
        }
    }

    #[test]
    fn sample_is_deterministic_and_rejects_tiny_n() {
        let dgp = small_dgp(1);
        assert!(dgp.sample(0, 1).is_err());
        assert_eq!(dgp.sample(50, 9).unwrap(), dgp.sample(50, 9).unwrap());
    }

    #[test]
    fn point_mass_sample_repeats_one_row() {
        let w = vec![State { point: vec![0.0], x: 0 }];
        let z = vec![State { point: vec![1.0], x: 0 }];
        let dgp = DiscreteDGP::new(w, z, vec![0.0], DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 2.0), vec![true]).unwrap();
        let d = dgp.sample(10, 0).unwrap();
        assert!(d.rows.iter().all(|o| *o == d.rows[0]));
    }

    #[test]
    fn spectral_law_has_prescribed_spectrum() {
        let k = KernelSpec::gaussian(0.5);
        let dgp = spectral_dgp(12, 6.0, &k, 3).unwrap();
        let sp = make_source_problem(&dgp, &k, &k, 1.0, Variant::Transformed, 0).unwrap();
        let mut s: Vec<f64> = sp.svd().singular_values.iter().map(|v| v * v).collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (j, v) in s.iter().enumerate() {
            let want = 10f64.powf(-6.0 * j as f64 / 11.0);
            assert!((v / want - 1.0).abs() < 1e-6, "{j}: {v} vs {want}");
        }
    }
}
