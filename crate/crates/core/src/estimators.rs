//! Closed-form kernel adversarial estimators (KRAS, LRAS, KMMR), the
//! norm-constrained solve and a nested minimax oracle used to validate them.
//!
//! Both players live in representer coordinates: `h = Σ α_a K_H(p_a, ·)` over the
//! distinct W-points of the data and `g = Σ β_b K_G(q_b, ·)` over the distinct
//! Z-points plus the points where `m` evaluates `g`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, Dataset};
use crate::dml::{Adjoint, MomentSpec, Nuisance};
use crate::error::{invalid, KrasError, Result};
use crate::kernels::{gram, rkhs_norm, KernelSpec, RepresenterFunction, X0Set};
use crate::linalg::{condition_number, lu_solve, sym_pinv, RANK_RTOL};
use crate::workbench::bits;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    #[serde(alias = "kras")]
    Kras,
    #[serde(alias = "lras")]
    Lras,
    #[serde(alias = "kmmr")]
    Kmmr,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Kras, Method::Lras, Method::Kmmr];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Kras => "KRAS",
            Method::Lras => "LRAS",
            Method::Kmmr => "KMMR",
        })
    }
}

impl FromStr for Method {
    type Err = KrasError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kras" => Ok(Method::Kras),
            "lras" => Ok(Method::Lras),
            "kmmr" => Ok(Method::Kmmr),
            other => Err(KrasError::Config(format!("unknown method '{other}' (expected kras, lras or kmmr)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub method: Method,
    pub lambda_h: f64,
    #[serde(default)]
    pub lambda_g: f64,
    /// Stabilization constant `c`.
    #[serde(default = "one")]
    pub c: f64,
    /// Bound `B` on `‖h‖_H`; unconstrained when absent.
    #[serde(default)]
    pub norm_bound: Option<f64>,
    pub kernel_h: KernelSpec,
    pub kernel_g: KernelSpec,
    /// Ridge added to LRAS systems, relative to their mean diagonal.
    #[serde(default = "default_ridge")]
    pub ridge_floor: f64,
}

fn one() -> f64 {
    1.0
}

fn default_ridge() -> f64 {
    1e-10
}

impl EstimatorConfig {
    pub fn new(method: Method, lambda_h: f64, lambda_g: f64, kernel_h: KernelSpec, kernel_g: KernelSpec) -> Self {
        EstimatorConfig {
            method,
            lambda_h,
            lambda_g,
            c: 1.0,
            norm_bound: None,
            kernel_h,
            kernel_g,
            ridge_floor: default_ridge(),
        }
    }

    pub fn with_method(&self, method: Method) -> Self {
        EstimatorConfig { method, ..self.clone() }
    }

    pub fn with_lambdas(&self, lambda_h: f64, lambda_g: f64) -> Self {
        EstimatorConfig { lambda_h, lambda_g, ..self.clone() }
    }

    /// The configuration of the adjoint fit: kernels exchanged.
    pub fn adjoint(&self) -> Self {
        EstimatorConfig { kernel_h: self.kernel_g.clone(), kernel_g: self.kernel_h.clone(), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_h > 0.0) || !self.lambda_h.is_finite() {
            return invalid(format!("lambda_h must be positive, got {}", self.lambda_h));
        }
        if !(self.lambda_g >= 0.0) || !self.lambda_g.is_finite() {
            return invalid(format!("lambda_g must be nonnegative, got {}", self.lambda_g));
        }
        if self.method != Method::Kmmr && self.lambda_g == 0.0 {
            return invalid(format!("{} needs lambda_g > 0", self.method));
        }
        if self.c == 0.0 || !self.c.is_finite() {
            return invalid("stabilization constant c must be nonzero");
        }
        if let Some(b) = self.norm_bound {
            if !(b > 0.0) {
                return invalid(format!("norm bound must be positive, got {b}"));
            }
        }
        if !(self.ridge_floor >= 0.0) {
            return invalid("ridge_floor must be nonnegative");
        }
        self.kernel_h.validate()?;
        self.kernel_g.validate()
    }
}

/// Numbers describing a fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    /// Minimax objective `max_g L(h, g) + penalty(h)` at the solution, without the norm multiplier.
    pub objective: f64,
    /// Condition number of the inner (adversary) system; absent for KMMR.
    pub inner_condition: Option<f64>,
    pub outer_condition: f64,
    /// Absolute ridges added to the inner and outer systems (LRAS only).
    pub ridge_inner: f64,
    pub ridge_outer: f64,
    /// Multiplier added to the RKHS penalty by the norm constraint.
    pub norm_multiplier: f64,
    pub rkhs_norm: f64,
    pub iterations: usize,
}

/// A fitted nuisance `ĥ = I₀ h̃`.
#[derive(Clone)]
pub struct FittedNuisance {
    pub method: Method,
    pub function: RepresenterFunction,
    pub diagnostics: Diagnostics,
    problem: Option<Arc<KernelProblem>>,
}

impl fmt::Debug for FittedNuisance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FittedNuisance")
            .field("method", &self.method)
            .field("function", &self.function)
            .field("diagnostics", &self.diagnostics)
            .finish()
    }
}

impl FittedNuisance {
    pub fn predict(&self, point: &[f64], x: f64) -> f64 {
        predict(self, point, x)
    }

    pub fn rkhs_norm(&self) -> f64 {
        rkhs_norm(&self.function)
    }

    pub fn into_nuisance(self) -> Nuisance {
        let f = self.function;
        Arc::new(move |p: &[f64], x: f64| f.eval(p, x))
    }

    /// Writes `point_0.., coefficient` rows after a commented kernel header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().flexible(true).from_path(path)?;
        let k = &self.function.kernel;
        wtr.write_record([
            format!("# method={} family={:?} bandwidth={} nu={} degree={} offset={} dimension={}", self.method, k.family, fmt_f64(k.bandwidth), fmt_f64(k.nu), k.degree, fmt_f64(k.offset), k.dimension),
        ])?;
        let d = self.function.support_points.first().map_or(0, Vec::len);
        let mut header: Vec<String> = (0..d).map(|j| format!("point_{j}")).collect();
        header.push("coefficient".into());
        wtr.write_record(&header)?;
        for (p, c) in self.function.support_points.iter().zip(&self.function.coefficients) {
            let mut rec: Vec<String> = p.iter().map(|v| fmt_f64(*v)).collect();
            rec.push(fmt_f64(*c));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// `I₀(x) Σ γ_i K(p_i, point)`.
pub fn predict(f: &FittedNuisance, point: &[f64], x: f64) -> f64 {
    f.function.eval(point, x)
}

struct PointIndex {
    points: Vec<Vec<f64>>,
    lookup: HashMap<Vec<u64>, usize>,
}

impl PointIndex {
    fn new() -> Self {
        PointIndex { points: Vec::new(), lookup: HashMap::new() }
    }

    fn insert(&mut self, p: &[f64]) -> usize {
        let key = bits(p);
        if let Some(&i) = self.lookup.get(&key) {
            return i;
        }
        self.points.push(p.to_vec());
        self.lookup.insert(key, self.points.len() - 1);
        self.points.len() - 1
    }
}

/// Data reduced to the matrices every closed form needs, with cached Grams.
///
/// Adversary points are ordered with the distinct Z-points first.
#[derive(Clone, Debug)]
pub struct Design {
    pub w_points: Vec<Vec<f64>>,
    pub adv_points: Vec<Vec<f64>>,
    /// Number of leading adversary points that are Z-points.
    pub n_z_points: usize,
    pub kh: DMatrix<f64>,
    pub kg: DMatrix<f64>,
    /// `J[b, a] = Σ_i w_i I₀_i r_i 1{z_i = q_b, w_i = p_a}`.
    pub j: DMatrix<f64>,
    /// `Σ_i w_i I₀_i 1{z_i = q_b}`.
    pub z_mass_x0: DVector<f64>,
    /// `Σ_i w_i 1{z_i = q_b}`.
    pub z_mass: DVector<f64>,
    /// `Σ_i w_i 1{w_i = p_a}`.
    pub w_mass: DVector<f64>,
    /// `b[q] = Σ_i w_i Σ_k coef_ik 1{point_ik = q}`, so `E_n m(O; g) = Σ_q b[q] g(q)`.
    pub b: DVector<f64>,
    pub x0: X0Set,
    pub kernel_h: KernelSpec,
    pub kernel_g: KernelSpec,
}

impl Design {
    pub fn new(data: &Dataset, spec: &dyn MomentSpec, kernel_h: &KernelSpec, kernel_g: &KernelSpec) -> Result<Self> {
        kernel_h.validate()?;
        kernel_g.validate()?;
        let x0 = spec.x0_h();
        let mut wi = PointIndex::new();
        let mut zi = PointIndex::new();
        let rows: Vec<(usize, usize)> = data.rows.iter().map(|o| (wi.insert(&o.w), zi.insert(&o.z))).collect();
        let n_z_points = zi.points.len();
        let terms: Vec<Vec<(usize, f64)>> = data
            .rows
            .iter()
            .map(|o| spec.m_terms(o).into_iter().map(|t| (zi.insert(&t.point), t.coef)).collect())
            .collect();
        let (p, q) = (wi.points.len(), zi.points.len());
        let mut j = DMatrix::zeros(q, p);
        let mut z_mass_x0 = DVector::zeros(q);
        let mut z_mass = DVector::zeros(q);
        let mut w_mass = DVector::zeros(p);
        let mut b = DVector::zeros(q);
        for (i, o) in data.rows.iter().enumerate() {
            let wt = data.weight(i);
            let i0 = x0.indicator(o.x);
            let r = spec.r(o);
            if !r.is_finite() {
                return invalid(format!("non-finite r at row {i}"));
            }
            let (a, z) = rows[i];
            j[(z, a)] += wt * i0 * r;
            z_mass_x0[z] += wt * i0;
            z_mass[z] += wt;
            w_mass[a] += wt;
            for &(k, coef) in &terms[i] {
                if !coef.is_finite() {
                    return invalid(format!("non-finite moment coefficient at row {i}"));
                }
                b[k] += wt * coef;
            }
        }
        Ok(Design {
            kh: gram(kernel_h, &wi.points)?,
            kg: gram(kernel_g, &zi.points)?,
            w_points: wi.points,
            adv_points: zi.points,
            n_z_points,
            j,
            z_mass_x0,
            z_mass,
            w_mass,
            b,
            x0,
            kernel_h: kernel_h.clone(),
            kernel_g: kernel_g.clone(),
        })
    }

    pub fn p(&self) -> usize {
        self.w_points.len()
    }

    pub fn q(&self) -> usize {
        self.adv_points.len()
    }

    /// `b - J K_H α`: the empirical functional `g ↦ E_n{m(O;g) - I₀ r h g}` as point masses.
    pub fn residual_masses(&self, h_values: &DVector<f64>) -> DVector<f64> {
        &self.b - &self.j * h_values
    }

    fn h_function(&self, alpha: &DVector<f64>) -> RepresenterFunction {
        RepresenterFunction::new(self.w_points.clone(), alpha.iter().cloned().collect(), self.kernel_h.clone(), Some(self.x0.clone()))
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn ridge_for(m: &DMatrix<f64>, floor: f64) -> f64 {
    floor * m.trace().abs() / m.nrows().max(1) as f64
}

/// Precomputed closed form for one method; `solve(μ)` adds `μ‖h‖²_H` to the objective.
#[derive(Clone, Debug)]
pub struct KernelProblem {
    pub design: Design,
    pub config: EstimatorConfig,
    kind: ProblemKind,
}

#[derive(Clone, Debug)]
enum ProblemKind {
    /// `M = K_G (S K_G + λ_G I)⁻¹`.
    Kras { m: DMatrix<f64>, inner_condition: f64 },
    Lras {
        /// `G = J_zᵀ K_G,zz` (p × q_z).
        g: DMatrix<f64>,
        q_inv: DMatrix<f64>,
        /// `K_G,za b`.
        cb: DVector<f64>,
        base: DMatrix<f64>,
        rhs: DVector<f64>,
        inner_condition: f64,
        ridge_inner: f64,
        ridge_outer: f64,
    },
    Kmmr,
}

/// Solution of a [`KernelProblem`] for one multiplier.
#[derive(Clone, Debug)]
pub struct Solution {
    pub alpha: DVector<f64>,
    pub objective: f64,
    pub outer_condition: f64,
}

impl KernelProblem {
    pub fn new(design: Design, config: &EstimatorConfig) -> Result<Self> {
        config.validate()?;
        let c2 = config.c * config.c;
        let kind = match config.method {
            Method::Kras => {
                let q = design.q();
                let a = DMatrix::from_diagonal(&(&design.z_mass_x0 * c2)) * &design.kg + DMatrix::identity(q, q) * config.lambda_g;
                let inner_condition = condition_number(&a);
                let a_inv = a
                    .try_inverse()
                    .ok_or_else(|| KrasError::Conditioning("KRAS inner system is singular".into()))?;
                ProblemKind::Kras { m: symmetrize(&(&design.kg * a_inv)), inner_condition }
            }
            Method::Lras => {
                let qz = design.n_z_points;
                let kzz = design.kg.view((0, 0), (qz, qz)).into_owned();
                let kza = design.kg.rows(0, qz).into_owned();
                let s = design.z_mass_x0.rows(0, qz) * c2 + design.z_mass.rows(0, qz) * config.lambda_g;
                let q_mat = symmetrize(&(&kzz * DMatrix::from_diagonal(&s) * &kzz));
                let ridge_inner = ridge_for(&q_mat, config.ridge_floor);
                let q_mat = q_mat + DMatrix::identity(qz, qz) * ridge_inner;
                let inner_condition = condition_number(&q_mat);
                let q_inv = match q_mat.clone().cholesky() {
                    Some(ch) => ch.inverse(),
                    None => sym_pinv(&q_mat, RANK_RTOL),
                };
                let g = design.j.rows(0, qz).transpose() * &kzz;
                let cb = &kza * &design.b;
                let inner = symmetrize(&(&g * &q_inv * g.transpose()))
                    + DMatrix::from_diagonal(&design.w_mass) * (4.0 * config.lambda_h);
                let base = symmetrize(&(&design.kh * inner * &design.kh));
                let ridge_outer = ridge_for(&base, config.ridge_floor);
                let rhs = &design.kh * (&g * (&q_inv * &cb));
                if !inner_condition.is_finite() && q_inv.iter().any(|v| !v.is_finite()) {
                    return Err(KrasError::Conditioning("LRAS inner system produced non-finite values".into()));
                }
                ProblemKind::Lras { g, q_inv, cb, base, rhs, inner_condition, ridge_inner, ridge_outer }
            }
            Method::Kmmr => ProblemKind::Kmmr,
        };
        Ok(KernelProblem { design, config: config.clone(), kind })
    }

    pub fn inner_condition(&self) -> Option<f64> {
        match &self.kind {
            ProblemKind::Kras { inner_condition, .. } | ProblemKind::Lras { inner_condition, .. } => Some(*inner_condition),
            ProblemKind::Kmmr => None,
        }
    }

    /// Objective of `h = K_H α`: inner maximum plus the method's penalty on `h`.
    pub fn objective(&self, alpha: &DVector<f64>) -> f64 {
        let d = &self.design;
        let h = &d.kh * alpha;
        let lh = self.config.lambda_h;
        match &self.kind {
            ProblemKind::Kras { m, .. } => {
                let v = d.residual_masses(&h);
                0.25 * v.dot(&(m * &v)) + lh * alpha.dot(&h)
            }
            ProblemKind::Lras { g, q_inv, cb, .. } => {
                let u = cb - g.transpose() * &h;
                0.25 * u.dot(&(q_inv * &u)) + lh * h.dot(&h.component_mul(&d.w_mass))
            }
            ProblemKind::Kmmr => {
                let v = d.residual_masses(&h);
                v.dot(&(&d.kg * &v)) + lh * alpha.dot(&h)
            }
        }
    }

    pub fn solve(&self, mu: f64) -> Result<Solution> {
        let d = &self.design;
        let p = d.p();
        let lh = self.config.lambda_h;
        let eye = DMatrix::<f64>::identity(p, p);
        let (alpha, outer_condition) = match &self.kind {
            ProblemKind::Kras { m, .. } => {
                let jt_m = d.j.transpose() * m;
                let a = &jt_m * &d.j * &d.kh + &eye * (4.0 * (lh + mu));
                let rhs = &jt_m * &d.b;
                let cond = condition_number(&a);
                (lu_solve(&a, &DMatrix::from_column_slice(p, 1, rhs.as_slice()))?.column(0).into_owned(), cond)
            }
            ProblemKind::Kmmr => {
                let jt_k = d.j.transpose() * &d.kg;
                let a = &jt_k * &d.j * &d.kh + &eye * (lh + mu);
                let rhs = &jt_k * &d.b;
                let cond = condition_number(&a);
                (lu_solve(&a, &DMatrix::from_column_slice(p, 1, rhs.as_slice()))?.column(0).into_owned(), cond)
            }
            ProblemKind::Lras { base, rhs, ridge_outer, .. } => {
                let a = base + &d.kh * (4.0 * mu) + &eye * *ridge_outer;
                let cond = condition_number(&a);
                (sym_pinv(&a, RANK_RTOL) * rhs, cond)
            }
        };
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(KrasError::Conditioning(format!("{} solve produced non-finite coefficients", self.config.method)));
        }
        let objective = self.objective(&alpha);
        Ok(Solution { alpha, objective, outer_condition })
    }

    fn fitted(self: &Arc<Self>, sol: Solution, mu: f64) -> FittedNuisance {
        let function = self.design.h_function(&sol.alpha);
        let (ridge_inner, ridge_outer) = match &self.kind {
            ProblemKind::Lras { ridge_inner, ridge_outer, .. } => (*ridge_inner, *ridge_outer),
            _ => (0.0, 0.0),
        };
        let diagnostics = Diagnostics {
            objective: sol.objective,
            inner_condition: self.inner_condition(),
            outer_condition: sol.outer_condition,
            ridge_inner,
            ridge_outer,
            norm_multiplier: mu,
            rkhs_norm: sol.alpha.dot(&(&self.design.kh * &sol.alpha)).max(0.0).sqrt(),
            iterations: 0,
        };
        FittedNuisance { method: self.config.method, function, diagnostics, problem: Some(self.clone()) }
    }
}

fn check_method(config: &EstimatorConfig, method: Method) -> Result<()> {
    if config.method != method {
        return invalid(format!("configuration is for {}, not {method}", config.method));
    }
    Ok(())
}

/// Fits with the configured method and applies the norm bound when set.
pub fn fit(data: &Dataset, spec: &dyn MomentSpec, config: &EstimatorConfig) -> Result<FittedNuisance> {
    let design = Design::new(data, spec, &config.kernel_h, &config.kernel_g)?;
    fit_design(design, config)
}

/// As [`fit`] with a prepared design, so Grams can be reused across penalties.
pub fn fit_design(design: Design, config: &EstimatorConfig) -> Result<FittedNuisance> {
    let problem = Arc::new(KernelProblem::new(design, config)?);
    let sol = problem.solve(0.0)?;
    let fitted = problem.fitted(sol, 0.0);
    match config.norm_bound {
        Some(b) => constrain_norm(&fitted, b),
        None => Ok(fitted),
    }
}

pub fn fit_kras(data: &Dataset, spec: &dyn MomentSpec, config: &EstimatorConfig) -> Result<FittedNuisance> {
    check_method(config, Method::Kras)?;
    fit(data, spec, config)
}

pub fn fit_lras(data: &Dataset, spec: &dyn MomentSpec, config: &EstimatorConfig) -> Result<FittedNuisance> {
    check_method(config, Method::Lras)?;
    fit(data, spec, config)
}

pub fn fit_kmmr(data: &Dataset, spec: &dyn MomentSpec, config: &EstimatorConfig) -> Result<FittedNuisance> {
    check_method(config, Method::Kmmr)?;
    fit(data, spec, config)
}

const NORM_RTOL: f64 = 1e-6;
const MAX_BISECTIONS: usize = 400;

/// Enforces `‖h‖_H ≤ B` by raising the RKHS penalty with a multiplier found by bisection.
/// A fit that already satisfies the bound is returned unchanged.
pub fn constrain_norm(unconstrained: &FittedNuisance, b: f64) -> Result<FittedNuisance> {
    if !(b > 0.0) {
        return invalid(format!("norm bound must be positive, got {b}"));
    }
    if unconstrained.diagnostics.rkhs_norm <= b {
        return Ok(unconstrained.clone());
    }
    let problem = unconstrained
        .problem
        .as_ref()
        .ok_or_else(|| KrasError::InvalidInput("fit carries no problem to re-solve".into()))?;
    let norm_at = |mu: f64| -> Result<(Solution, f64)> {
        let s = problem.solve(mu)?;
        let n = s.alpha.dot(&(&problem.design.kh * &s.alpha)).max(0.0).sqrt();
        Ok((s, n))
    };
    let mut lo = 0.0;
    let mut hi = problem.config.lambda_h.max(1e-12);
    let mut upper = None;
    for _ in 0..MAX_BISECTIONS {
        let (s, n) = norm_at(hi)?;
        if n <= b {
            upper = Some((s, n));
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    let (mut best, mut best_norm) =
        upper.ok_or_else(|| KrasError::Convergence("norm constraint: multiplier could not be bracketed".into()))?;
    let mut iterations = 0;
    while best_norm < b * (1.0 - NORM_RTOL) {
        iterations += 1;
        if iterations > MAX_BISECTIONS {
            return Err(KrasError::Convergence(format!("norm constraint: bisection stalled at norm {best_norm} for B={b}")));
        }
        let mid = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * hi };
        let (s, n) = norm_at(mid)?;
        if n > b {
            lo = mid;
        } else {
            hi = mid;
            best = s;
            best_norm = n;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    let mut out = problem.fitted(best, hi);
    out.diagnostics.iterations = iterations;
    Ok(out)
}

/// Empirical inner maximum `M = 4c² max_g {E_n[m(O;g) - I₀ r h g - c² I₀ g²] - λ_G ‖g‖²_G}`
/// and its maximizer.
///
/// With `λ_G = 0` the maximizer is only determined on `X₀`; the pseudo-inverse picks
/// the minimal-coefficient one.
pub fn inner_max(h: &RepresenterFunction, data: &Dataset, spec: &dyn MomentSpec, config: &EstimatorConfig) -> Result<(RepresenterFunction, f64)> {
    let d = Design::new(data, spec, &config.kernel_h, &config.kernel_g)?;
    if config.c == 0.0 {
        return invalid("stabilization constant c must be nonzero");
    }
    let c2 = config.c * config.c;
    let hv = DVector::from_iterator(d.p(), d.w_points.iter().map(|p| h.eval_unmasked(p)));
    let v = d.residual_masses(&hv);
    let a = &d.kg * &v;
    let q = symmetrize(&(&d.kg * DMatrix::from_diagonal(&(&d.z_mass_x0 * c2)) * &d.kg + &d.kg * config.lambda_g));
    let q_pinv = sym_pinv(&q, RANK_RTOL);
    let beta = &q_pinv * &a * 0.5;
    let value = c2 * a.dot(&(&q_pinv * &a));
    let g = RepresenterFunction::new(d.adv_points.clone(), beta.iter().cloned().collect(), config.kernel_g.clone(), None);
    Ok((g, value))
}

/// `4c² {E_n[m(O;g) - I₀ r h g - c² I₀ g²] - λ_G ‖g‖²_G}` for a given adversary, evaluated row by row.
pub fn adversary_value(
    h: &dyn Fn(&[f64]) -> f64,
    g: &RepresenterFunction,
    data: &Dataset,
    spec: &dyn MomentSpec,
    config: &EstimatorConfig,
) -> f64 {
    let x0 = spec.x0_h();
    let c2 = config.c * config.c;
    let gv = |p: &[f64]| g.eval_unmasked(p);
    let e = data.mean(|o| {
        let i0 = x0.indicator(o.x);
        let gz = gv(&o.z);
        spec.m_terms(o).iter().map(|t| t.coef * gv(&t.point)).sum::<f64>() - i0 * spec.r(o) * h(&o.w) * gz - c2 * i0 * gz * gz
    });
    4.0 * c2 * (e - config.lambda_g * rkhs_norm(g).powi(2))
}

/// Settings of the nested oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    /// Stop when the outer objective changes by at most this much (twice in a row).
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings { tolerance: 1e-10, max_iterations: 5000 }
    }
}

/// Saddle function evaluated from the data and kernel calls alone.
struct Saddle<'a> {
    data: &'a Dataset,
    spec: &'a dyn MomentSpec,
    config: &'a EstimatorConfig,
    x0: X0Set,
    h_support: Vec<Vec<f64>>,
    g_support: Vec<Vec<f64>>,
    /// Per-row m-terms, cached so each evaluation does not rebuild them.
    terms: Vec<Vec<(Vec<f64>, f64)>>,
}

impl<'a> Saddle<'a> {
    fn new(data: &'a Dataset, spec: &'a dyn MomentSpec, config: &'a EstimatorConfig) -> Self {
        let mut hs: Vec<Vec<f64>> = Vec::new();
        let mut gs: Vec<Vec<f64>> = Vec::new();
        let push = |v: &mut Vec<Vec<f64>>, p: &[f64]| {
            if !v.iter().any(|q| bits(q) == bits(p)) {
                v.push(p.to_vec());
            }
        };
        let terms: Vec<Vec<(Vec<f64>, f64)>> =
            data.rows.iter().map(|o| spec.m_terms(o).into_iter().map(|t| (t.point, t.coef)).collect()).collect();
        for o in &data.rows {
            push(&mut hs, &o.w);
            push(&mut gs, &o.z);
        }
        if config.method != Method::Lras {
            for t in terms.iter().flatten() {
                push(&mut gs, &t.0);
            }
        }
        Saddle { data, spec, config, x0: spec.x0_h(), h_support: hs, g_support: gs, terms }
    }

    fn eval_h(&self, alpha: &[f64], p: &[f64]) -> f64 {
        self.h_support.iter().zip(alpha).map(|(s, a)| a * self.config.kernel_h.eval(s, p)).sum()
    }

    fn eval_g(&self, beta: &[f64], p: &[f64]) -> f64 {
        self.g_support.iter().zip(beta).map(|(s, b)| b * self.config.kernel_g.eval(s, p)).sum()
    }

    fn h_penalty(&self, alpha: &[f64]) -> f64 {
        match self.config.method {
            Method::Lras => self.data.mean(|o| self.eval_h(alpha, &o.w).powi(2)),
            _ => {
                let mut s = 0.0;
                for (i, pi) in self.h_support.iter().enumerate() {
                    s += alpha[i] * self.eval_h(alpha, pi);
                }
                s
            }
        }
    }

    fn g_penalty(&self, beta: &[f64]) -> f64 {
        match self.config.method {
            Method::Lras => self.data.mean(|o| self.eval_g(beta, &o.z).powi(2)),
            _ => self.g_support.iter().enumerate().map(|(i, p)| beta[i] * self.eval_g(beta, p)).sum(),
        }
    }

    /// `E_n[m(O;g) - I₀ r h g - c² I₀ g²] - λ_G pen(g) + λ_H pen(h)`.
    fn value(&self, alpha: &[f64], beta: &[f64]) -> f64 {
        let c2 = self.config.c * self.config.c;
        let mut e = 0.0;
        for (i, o) in self.data.rows.iter().enumerate() {
            let i0 = self.x0.indicator(o.x);
            let gz = self.eval_g(beta, &o.z);
            let m: f64 = self.terms[i].iter().map(|(p, c)| c * self.eval_g(beta, p)).sum();
            let hw = if i0 != 0.0 { self.eval_h(alpha, &o.w) } else { 0.0 };
            e += self.data.weight(i) * (m - i0 * self.spec.r(o) * hw * gz - c2 * i0 * gz * gz);
        }
        e - self.config.lambda_g * self.g_penalty(beta) + self.config.lambda_h * self.h_penalty(alpha)
    }

    /// KMMR: `L(ξ)` for the Riesz element `ξ(p) = L(K_G(p, ·))` of `L(g) = E_n[m(O;g) - I₀ r h g]`.
    fn riesz_value(&self, alpha: &[f64]) -> f64 {
        let hw: Vec<f64> = self
            .data
            .rows
            .iter()
            .map(|o| if self.x0.indicator(o.x) != 0.0 { self.eval_h(alpha, &o.w) } else { 0.0 })
            .collect();
        let functional = |g: &dyn Fn(&[f64]) -> f64| -> f64 {
            let mut e = 0.0;
            for (i, o) in self.data.rows.iter().enumerate() {
                let m: f64 = self.terms[i].iter().map(|(p, c)| c * g(p)).sum();
                e += self.data.weight(i) * (m - self.x0.indicator(o.x) * self.spec.r(o) * hw[i] * g(&o.z));
            }
            e
        };
        let xi = |p: &[f64]| functional(&|q: &[f64]| self.config.kernel_g.eval(p, q));
        functional(&xi) + self.config.lambda_h * self.h_penalty(alpha)
    }
}

/// Exact inner solve for a saddle that is a concave quadratic in β: the Hessian
/// is extracted once by unit central differences, the linear term per α.
struct InnerSolver<'a> {
    saddle: &'a Saddle<'a>,
    neg_hessian_pinv: DMatrix<f64>,
}

impl<'a> InnerSolver<'a> {
    fn new(saddle: &'a Saddle<'a>, p: usize) -> Self {
        let q = saddle.g_support.len();
        let alpha = vec![0.0; p];
        let mut beta = vec![0.0; q];
        let mut hess = DMatrix::zeros(q, q);
        let f = |beta: &mut Vec<f64>, i: usize, si: f64, j: usize, sj: f64| {
            beta[i] += si;
            beta[j] += sj;
            let v = saddle.value(&alpha, beta);
            beta[i] -= si;
            beta[j] -= sj;
            v
        };
        for i in 0..q {
            for j in i..q {
                let h = (f(&mut beta, i, 1.0, j, 1.0) - f(&mut beta, i, 1.0, j, -1.0) - f(&mut beta, i, -1.0, j, 1.0)
                    + f(&mut beta, i, -1.0, j, -1.0))
                    / 4.0;
                hess[(i, j)] = h;
                hess[(j, i)] = h;
            }
        }
        InnerSolver { saddle, neg_hessian_pinv: sym_pinv(&(-hess), RANK_RTOL) }
    }

    /// `(max_β F(α, β), β*)`.
    fn solve(&self, alpha: &[f64]) -> (f64, Vec<f64>) {
        let q = self.saddle.g_support.len();
        let mut beta = vec![0.0; q];
        let grad = DVector::from_fn(q, |i, _| {
            beta[i] = 1.0;
            let up = self.saddle.value(alpha, &beta);
            beta[i] = -1.0;
            let down = self.saddle.value(alpha, &beta);
            beta[i] = 0.0;
            (up - down) / 2.0
        });
        let b = &self.neg_hessian_pinv * grad;
        let b: Vec<f64> = b.iter().cloned().collect();
        (self.saddle.value(alpha, &b), b)
    }
}

/// Ground-truth minimax solution by direct optimization over representer coefficients:
/// exact inner maximization and Polak-Ribière conjugate gradients with exact line
/// searches on the outer problem.
pub fn nested_oracle(data: &Dataset, spec: &dyn MomentSpec, config: &EstimatorConfig, settings: &OracleSettings) -> Result<FittedNuisance> {
    config.validate()?;
    if data.n() > 50 {
        return invalid(format!("nested oracle is limited to n <= 50, got {}", data.n()));
    }
    let saddle = Saddle::new(data, spec, config);
    let p = saddle.h_support.len();
    let inner = match config.method {
        Method::Kmmr => None,
        _ => Some(InnerSolver::new(&saddle, p)),
    };
    let outer = |alpha: &[f64]| -> (f64, Vec<f64>) {
        match &inner {
            Some(s) => s.solve(alpha),
            None => (saddle.riesz_value(alpha), vec![]),
        }
    };
    let gradient = |alpha: &mut Vec<f64>, beta: &[f64]| -> DVector<f64> {
        DVector::from_fn(p, |a, _| {
            let f = |al: &Vec<f64>| match &inner {
                Some(_) => saddle.value(al, beta),
                None => saddle.riesz_value(al),
            };
            alpha[a] += 1.0;
            let up = f(alpha);
            alpha[a] -= 2.0;
            let down = f(alpha);
            alpha[a] += 1.0;
            (up - down) / 2.0
        })
    };
    let mut alpha = vec![0.0; p];
    let (mut value, mut beta) = outer(&alpha);
    let mut g = gradient(&mut alpha, &beta);
    let mut dir = -g.clone();
    let mut small = 0;
    let mut iterations = 0;
    while iterations < settings.max_iterations {
        iterations += 1;
        if g.norm() == 0.0 {
            small = 2;
            break;
        }
        if dir.dot(&g) >= 0.0 {
            dir = -g.clone();
        }
        // Outer objective is quadratic along the line: fit it through three points.
        let scale = alpha.iter().fold(1.0_f64, |m, v| m.max(v.abs())) / dir.amax();
        let along = |t: f64| -> f64 {
            let a: Vec<f64> = alpha.iter().zip(dir.iter()).map(|(x, d)| x + t * d).collect();
            outer(&a).0
        };
        let (fp, fm) = (along(scale), along(-scale));
        let curv = (fp + fm - 2.0 * value) / (2.0 * scale * scale);
        let slope = (fp - fm) / (2.0 * scale);
        if !(curv > 0.0) {
            return Err(KrasError::Convergence("nested oracle: outer objective is not convex along the search line".into()));
        }
        let t = -slope / (2.0 * curv);
        for (x, d) in alpha.iter_mut().zip(dir.iter()) {
            *x += t * d;
        }
        let (new_value, new_beta) = outer(&alpha);
        let change = (value - new_value).abs();
        value = new_value;
        beta = new_beta;
        let g_new = gradient(&mut alpha, &beta);
        let pr = (g_new.dot(&(&g_new - &g)) / g.dot(&g)).max(0.0);
        dir = -&g_new + &dir * if iterations % p.max(1) == 0 { 0.0 } else { pr };
        g = g_new;
        small = if change <= settings.tolerance { small + 1 } else { 0 };
        if small >= 2 {
            break;
        }
    }
    if small < 2 {
        return Err(KrasError::Convergence(format!("nested oracle did not converge in {} iterations", settings.max_iterations)));
    }
    let function = RepresenterFunction::new(saddle.h_support.clone(), alpha.clone(), config.kernel_h.clone(), Some(spec.x0_h()));
    let norm = rkhs_norm(&function);
    Ok(FittedNuisance {
        method: config.method,
        function,
        diagnostics: Diagnostics { objective: value, rkhs_norm: norm, iterations, ..Default::default() },
        problem: None,
    })
}

/// Fitter for the h-equation, for use in cross-fitting.
pub fn h_fitter(config: EstimatorConfig, spec: Arc<dyn MomentSpec>) -> impl Fn(&Dataset) -> Result<Nuisance> + Sync {
    move |d: &Dataset| Ok(fit(d, &*spec, &config)?.into_nuisance())
}

/// Fitter for the adjoint equation `T* g = ρ̃`: the same estimator on swapped rows with
/// the adjoint moment structure and exchanged kernels.
pub fn g_fitter(config: EstimatorConfig, spec: Arc<dyn MomentSpec>) -> impl Fn(&Dataset) -> Result<Nuisance> + Sync {
    let adj = Adjoint(spec);
    let cfg = config.adjoint();
    move |d: &Dataset| Ok(fit(&d.swapped(), &adj, &cfg)?.into_nuisance())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workbench::{build_dml_workbench, random_dgp, RandomDgpConfig};

    fn sample(n: usize, seed: u64) -> (Dataset, Arc<dyn MomentSpec>) {
        let cfg = RandomDgpConfig { n_w: 6, n_z: 5, n_x: 2, r_low: 0.5, r_high: 1.5, random_x0: false };
        let dgp = random_dgp(&cfg, seed).unwrap().with_x0_mask(vec![true, false]).unwrap();
        let k = KernelSpec::gaussian(1.0);
        let wb = build_dml_workbench(&dgp, &k, &k, 1.0, vec![true, true], 0.3, seed).unwrap();
        (wb.dgp.sample(n, seed + 1).unwrap(), Arc::new(wb.moments))
    }

    fn config(method: Method) -> EstimatorConfig {
        EstimatorConfig::new(method, 0.1, 0.1, KernelSpec::gaussian(1.0), KernelSpec::gaussian(1.0))
    }

    #[test]
    fn config_validation() {
        let mut c = config(Method::Kras);
        c.lambda_g = 0.0;
        assert!(c.validate().is_err());
        assert!(c.with_method(Method::Kmmr).validate().is_ok());
        c.lambda_g = 0.1;
        c.c = 0.0;
        assert!(c.validate().is_err());
        assert_eq!("Lras".parse::<Method>().unwrap(), Method::Lras);
        assert!("ridge".parse::<Method>().is_err());
    }

    #[test]
    fn zero_outcome_gives_zero_fit() {
        let (mut d, spec) = sample(20, 3);
        d.rows.iter_mut().for_each(|o| o.s = 0.0);
        for m in Method::ALL {
            let f = fit(&d, &*spec, &config(m)).unwrap();
            assert!(f.function.coefficients.iter().all(|c| *c == 0.0), "{m}");
        }
    }

    #[test]
    fn predictions_vanish_off_x0() {
        let (d, spec) = sample(20, 4);
        for m in Method::ALL {
            let f = fit(&d, &*spec, &config(m)).unwrap();
            assert_eq!(f.predict(&[0.3], 1.0), 0.0);
            assert_eq!(f.predict(&[0.3], 0.0), f.function.eval_unmasked(&[0.3]));
        }
    }

    #[test]
    fn single_coefficient_prediction() {
        let k = KernelSpec::gaussian(1.0);
        let f = FittedNuisance {
            method: Method::Kras,
            function: RepresenterFunction::new(vec![vec![0.5]], vec![2.0], k.clone(), None),
            diagnostics: Diagnostics::default(),
            problem: None,
        };
        assert_eq!(f.predict(&[0.5], 0.0), 2.0 * k.eval(&[0.5], &[0.5]));
    }

    #[test]
    fn kras_norm_decreases_in_lambda() {
        let (d, spec) = sample(30, 5);
        let mut last = f64::INFINITY;
        for e in -4..=3 {
            let cfg = config(Method::Kras).with_lambdas(10f64.powi(e), 0.1);
            let n = fit(&d, &*spec, &cfg).unwrap().rkhs_norm();
            assert!(n <= last * (1.0 + 1e-12), "{e}: {n} > {last}");
            last = n;
        }
        assert!(last < 1e-2);
    }

    #[test]
    fn closed_forms_match_oracle() {
        let (d, spec) = sample(20, 6);
        for (m, tol) in [(Method::Kras, 1e-6), (Method::Kmmr, 1e-6), (Method::Lras, 1e-4)] {
            let cfg = config(m);
            let cf = fit(&d, &*spec, &cfg).unwrap();
            let or = nested_oracle(&d, &*spec, &cfg, &OracleSettings::default()).unwrap();
            let (a, b) = (cf.diagnostics.objective, or.diagnostics.objective);
            assert!((a - b).abs() <= tol * a.abs().max(1.0), "{m}: {a} vs {b}");
            for o in &d.rows {
                let (x, y) = (cf.predict(&o.w, o.x), or.predict(&o.w, o.x));
                assert!((x - y).abs() <= 1e-4 * x.abs().max(1.0), "{m}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn inner_max_dominates_random_adversaries() {
        use rand::{Rng, SeedableRng};
        let (d, spec) = sample(25, 7);
        let cfg = config(Method::Kras);
        let h = fit(&d, &*spec, &cfg).unwrap();
        let (g, value) = inner_max(&h.function, &d, &*spec, &cfg).unwrap();
        let hf = |p: &[f64]| h.function.eval_unmasked(p);
        assert!((adversary_value(&hf, &g, &d, &*spec, &cfg) - value).abs() < 1e-9 * value.abs().max(1.0));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let coefs: Vec<f64> = g.coefficients.iter().map(|c| c + rng.gen_range(-0.5..0.5)).collect();
            let probe = RepresenterFunction::new(g.support_points.clone(), coefs, g.kernel.clone(), None);
            assert!(adversary_value(&hf, &probe, &d, &*spec, &cfg) <= value + 1e-12);
        }
    }

    #[test]
    fn norm_constraint() {
        let (d, spec) = sample(30, 8);
        let cfg = config(Method::Kras).with_lambdas(1e-3, 0.1);
        let f = fit(&d, &*spec, &cfg).unwrap();
        let slack = constrain_norm(&f, f.rkhs_norm() * 2.0).unwrap();
        assert_eq!(slack.function, f.function);
        let b = f.rkhs_norm() / 2.0;
        let c = constrain_norm(&f, b).unwrap();
        assert!((c.rkhs_norm() - b).abs() <= 1e-6 * b);
        assert!(c.rkhs_norm() <= b * (1.0 + 1e-6));
        let tiny = constrain_norm(&f, 1e-9).unwrap();
        assert!(tiny.rkhs_norm() <= 1e-9 * (1.0 + 1e-6));
        for m in [Method::Lras, Method::Kmmr] {
            let f = fit(&d, &*spec, &config(m).with_lambdas(1e-3, 0.1)).unwrap();
            let c = constrain_norm(&f, f.rkhs_norm() / 3.0).unwrap();
            assert!((c.rkhs_norm() * 3.0 / f.rkhs_norm() - 1.0).abs() <= 1e-6, "{m}");
        }
    }

    #[test]
    fn kmmr_interpolates_as_penalty_vanishes() {
        let cfg = RandomDgpConfig { n_w: 6, n_z: 4, n_x: 1, r_low: 0.5, r_high: 1.5, random_x0: false };
        let dgp = random_dgp(&cfg, 2).unwrap();
        let k = KernelSpec::gaussian(1.0);
        let wb = build_dml_workbench(&dgp, &k, &k, 1.0, vec![true], 0.3, 2).unwrap();
        let d = wb.dgp.sample(40, 3).unwrap();
        let mut last = f64::INFINITY;
        for e in [-2, -4, -6, -8] {
            let c = config(Method::Kmmr).with_lambdas(10f64.powi(e), 0.0);
            let f = fit(&d, &wb.moments, &c).unwrap();
            let design = Design::new(&d, &wb.moments, &k, &k).unwrap();
            let h = DVector::from_iterator(design.p(), design.w_points.iter().map(|p| f.function.eval_unmasked(p)));
            let v = design.residual_masses(&h);
            let resid = v.dot(&(&design.kg * &v));
            assert!(resid <= last);
            last = resid;
        }
        assert!(last < 1e-8, "{last}");
    }

    #[test]
    fn oracle_is_deterministic() {
        let (d, spec) = sample(10, 9);
        let cfg = config(Method::Kras);
        let a = nested_oracle(&d, &*spec, &cfg, &OracleSettings::default()).unwrap();
        let b = nested_oracle(&d, &*spec, &cfg, &OracleSettings::default()).unwrap();
        assert_eq!(a.function, b.function);
    }
}
