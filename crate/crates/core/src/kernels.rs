//! Kernel functions, Gram matrices, representer functions and critical radii.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, KrasError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
    SobolevMatern,
    Polynomial,
    DiscreteDelta,
}

/// A kernel together with the constant used in its critical-radius formula.
///
/// `bandwidth` is the length scale for the Gaussian and Matérn families and the
/// amplitude for `discrete_delta`. For `sobolev_matern`, `nu` is the Sobolev
/// smoothness of the RKHS; the Matérn smoothness is `nu - dimension / 2` and must
/// be a positive half-integer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    #[serde(default = "one")]
    pub bandwidth: f64,
    #[serde(default = "one")]
    pub nu: f64,
    #[serde(default = "two")]
    pub degree: u32,
    /// Additive offset of the polynomial kernel `(x.y + offset)^degree`.
    #[serde(default = "one")]
    pub offset: f64,
    #[serde(default = "one_usize")]
    pub dimension: usize,
    #[serde(default = "one")]
    pub radius_constant: f64,
}

fn one() -> f64 {
    1.0
}
fn two() -> u32 {
    2
}
fn one_usize() -> usize {
    1
}

impl KernelSpec {
    fn base(family: KernelFamily) -> Self {
        KernelSpec { family, bandwidth: 1.0, nu: 1.0, degree: 2, offset: 1.0, dimension: 1, radius_constant: 1.0 }
    }

    pub fn gaussian(bandwidth: f64) -> Self {
        KernelSpec { bandwidth, ..Self::base(KernelFamily::Gaussian) }
    }

    pub fn sobolev(nu: f64, dimension: usize, bandwidth: f64) -> Self {
        KernelSpec { nu, dimension, bandwidth, ..Self::base(KernelFamily::SobolevMatern) }
    }

    pub fn polynomial(degree: u32, offset: f64) -> Self {
        KernelSpec { degree, offset, ..Self::base(KernelFamily::Polynomial) }
    }

    pub fn discrete_delta(amplitude: f64) -> Self {
        KernelSpec { bandwidth: amplitude, ..Self::base(KernelFamily::DiscreteDelta) }
    }

    pub fn with_dimension(mut self, d: usize) -> Self {
        self.dimension = d;
        self
    }

    pub fn with_radius_constant(mut self, c: f64) -> Self {
        self.radius_constant = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) || !(self.radius_constant > 0.0) || self.dimension == 0 {
            return invalid(format!("kernel parameters must be positive: {self:?}"));
        }
        match self.family {
            KernelFamily::SobolevMatern => {
                let p = self.matern_order()?;
                let _ = p;
            }
            KernelFamily::Polynomial => {
                if self.degree == 0 || self.offset < 0.0 {
                    return invalid("polynomial kernel needs degree >= 1 and offset >= 0");
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Integer `p` with Matérn smoothness `p + 1/2`.
    fn matern_order(&self) -> Result<u32> {
        let s = self.nu - self.dimension as f64 / 2.0;
        let p = s - 0.5;
        if s <= 0.0 || (p - p.round()).abs() > 1e-9 || p < -1e-9 {
            return invalid(format!(
                "sobolev_matern needs nu - d/2 to be a positive half-integer, got {s}"
            ));
        }
        Ok(p.round() as u32)
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * self.bandwidth * self.bandwidth)).exp()
            }
            KernelFamily::SobolevMatern => {
                let r: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let p = self.matern_order().unwrap_or(0);
                matern_half_integer(p, r / self.bandwidth)
            }
            KernelFamily::Polynomial => {
                let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                (dot + self.offset).powi(self.degree as i32)
            }
            KernelFamily::DiscreteDelta => {
                if x.len() == y.len() && x.iter().zip(y).all(|(a, b)| a.to_bits() == b.to_bits()) {
                    self.bandwidth
                } else {
                    0.0
                }
            }
        }
    }

    /// `sup_v K(v, v)` when it is finite independently of the domain.
    pub fn diag_sup(&self) -> Option<f64> {
        match self.family {
            KernelFamily::Gaussian | KernelFamily::SobolevMatern => Some(1.0),
            KernelFamily::DiscreteDelta => Some(self.bandwidth),
            KernelFamily::Polynomial => None,
        }
    }
}

/// Matérn kernel with smoothness `p + 1/2` at scaled distance `t`.
fn matern_half_integer(p: u32, t: f64) -> f64 {
    let s = p as f64 + 0.5;
    let a = (2.0 * s).sqrt() * t;
    // k(t) = exp(-a) * p!/(2p)! * sum_i (p+i)!/(i!(p-i)!) (2a)^{p-i}
    let fact = |k: u32| (1..=k).fold(1.0_f64, |acc, v| acc * v as f64);
    let mut sum = 0.0;
    for i in 0..=p {
        sum += fact(p + i) / (fact(i) * fact(p - i)) * (2.0 * a).powi((p - i) as i32);
    }
    (-a).exp() * fact(p) / fact(2 * p) * sum
}

/// Symmetric matrix of pairwise kernel values.
pub fn gram(kernel: &KernelSpec, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if points.is_empty() {
        return invalid("gram needs at least one point");
    }
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(&points[i], &points[j]);
            if !v.is_finite() {
                return invalid(format!("non-finite kernel value at ({i},{j})"));
            }
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Matrix `K(a_i, b_j)`.
pub fn cross_gram(kernel: &KernelSpec, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| kernel.eval(&a[i], &b[j]))
}

pub fn min_eigenvalue(k: &DMatrix<f64>) -> f64 {
    crate::linalg::sym_eigen(k.clone()).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Set of X-values on which a structural-zero mask keeps a function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum X0Set {
    All,
    /// Closed interval `[lo, hi]`.
    Interval { lo: f64, hi: f64 },
    /// Finite set of admissible values, compared exactly.
    Values { values: Vec<f64> },
}

impl X0Set {
    pub fn contains(&self, x: f64) -> bool {
        match self {
            X0Set::All => true,
            X0Set::Interval { lo, hi } => x >= *lo && x <= *hi,
            X0Set::Values { values } => values.iter().any(|v| v.to_bits() == x.to_bits()),
        }
    }

    pub fn indicator(&self, x: f64) -> f64 {
        if self.contains(x) {
            1.0
        } else {
            0.0
        }
    }
}

/// `f(v) = I₀(x) Σ_i γ_i K(p_i, v)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresenterFunction {
    pub support_points: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
    pub kernel: KernelSpec,
    pub mask: Option<X0Set>,
}

impl RepresenterFunction {
    pub fn new(support_points: Vec<Vec<f64>>, coefficients: Vec<f64>, kernel: KernelSpec, mask: Option<X0Set>) -> Self {
        assert_eq!(support_points.len(), coefficients.len());
        RepresenterFunction { support_points, coefficients, kernel, mask }
    }

    pub fn zero(kernel: KernelSpec) -> Self {
        RepresenterFunction { support_points: vec![], coefficients: vec![], kernel, mask: None }
    }

    /// Value without the structural-zero mask.
    pub fn eval_unmasked(&self, point: &[f64]) -> f64 {
        self.support_points
            .iter()
            .zip(&self.coefficients)
            .map(|(p, c)| c * self.kernel.eval(p, point))
            .sum()
    }

    pub fn eval(&self, point: &[f64], x: f64) -> f64 {
        match &self.mask {
            Some(m) if !m.contains(x) => 0.0,
            _ => self.eval_unmasked(point),
        }
    }

    pub fn coefficient_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.coefficients)
    }
}

/// `sqrt(γᵀ K γ)`, the RKHS norm of the unmasked function.
pub fn rkhs_norm(f: &RepresenterFunction) -> f64 {
    if f.coefficients.is_empty() {
        return 0.0;
    }
    let k = cross_gram(&f.kernel, &f.support_points, &f.support_points);
    let g = f.coefficient_vector();
    (g.dot(&(k * &g))).max(0.0).sqrt()
}

/// Effective sample size `⌊n μ₀ / 2⌋` under structural zeros, `n` otherwise.
pub fn effective_n(n: usize, mu0: Option<f64>) -> Result<usize> {
    match mu0 {
        None => Ok(n),
        Some(m) if m > 0.0 && m <= 1.0 => Ok((n as f64 * m / 2.0).floor() as usize),
        Some(m) => invalid(format!("mu0 must lie in (0, 1], got {m}")),
    }
}

/// Order of the critical radius of the kernel's unit ball at sample size `n`.
///
/// Finite-rank families (polynomial, discrete_delta) use the parametric order `C/√n_eff`.
pub fn critical_radius(kernel: &KernelSpec, n: usize, mu0: Option<f64>) -> Result<f64> {
    let n_eff = effective_n(n, mu0)?;
    if n_eff < 3 {
        return Err(KrasError::InvalidInput(format!("effective sample size {n_eff} < 3")));
    }
    let ne = n_eff as f64;
    let c = kernel.radius_constant;
    Ok(match kernel.family {
        KernelFamily::Gaussian => c * (ne.ln() / ne).sqrt(),
        KernelFamily::SobolevMatern => {
            let (nu, d) = (kernel.nu, kernel.dimension as f64);
            c * ne.powf(-nu / (2.0 * nu + d))
        }
        KernelFamily::Polynomial | KernelFamily::DiscreteDelta => c / ne.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
    }

    #[test]
    fn gram_single_point_gaussian() {
        let k = gram(&KernelSpec::gaussian(0.7), &[vec![0.3, -1.0]]).unwrap();
        assert_eq!(k[(0, 0)], 1.0);
    }

    #[test]
    fn gram_two_identical_points_is_rank_one() {
        let p = vec![0.5];
        let k = gram(&KernelSpec::polynomial(2, 1.0), &[p.clone(), p]).unwrap();
        assert!(k.iter().all(|v| (*v - 1.5625).abs() < 1e-15));
        assert!(min_eigenvalue(&k).abs() < 1e-12);
    }

    #[test]
    fn gram_random_gaussian_is_psd() {
        let k = gram(&KernelSpec::gaussian(1.0), &random_points(10, 2, 1)).unwrap();
        assert!(min_eigenvalue(&k) >= -1e-12);
    }

    #[test]
    fn gram_rejects_empty_and_nonfinite() {
        assert!(gram(&KernelSpec::gaussian(1.0), &[]).is_err());
        assert!(gram(&KernelSpec::polynomial(2, 1.0), &[vec![f64::INFINITY]]).is_err());
    }

    #[test]
    fn matern_half_integer_closed_forms() {
        // p = 0: exponential; p = 1: (1 + √3 t) e^{-√3 t}; p = 2: (1 + √5 t + 5t²/3) e^{-√5 t}.
        for t in [0.0, 0.3, 1.7] {
            assert!((matern_half_integer(0, t) - (-t).exp()).abs() < 1e-15);
            let a = 3f64.sqrt() * t;
            assert!((matern_half_integer(1, t) - (1.0 + a) * (-a).exp()).abs() < 1e-14);
            let b = 5f64.sqrt() * t;
            assert!((matern_half_integer(2, t) - (1.0 + b + b * b / 3.0) * (-b).exp()).abs() < 1e-14);
        }
        let k = KernelSpec::sobolev(1.0, 1, 0.5);
        k.validate().unwrap();
        assert!((k.eval(&[0.0], &[0.5]) - (-1.0f64).exp()).abs() < 1e-15);
        assert!(KernelSpec::sobolev(1.2, 1, 1.0).validate().is_err());
    }

    #[test]
    fn rkhs_norm_trivial_cases() {
        let k = KernelSpec::gaussian(1.0);
        assert_eq!(rkhs_norm(&RepresenterFunction::new(vec![vec![0.0]], vec![0.0], k.clone(), None)), 0.0);
        let f = RepresenterFunction::new(vec![vec![1.0]], vec![-2.5], k, None);
        assert!((rkhs_norm(&f) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn critical_radius_formulas() {
        let g = KernelSpec::gaussian(1.0);
        assert!((critical_radius(&g, 100, None).unwrap() - 0.214_596).abs() < 1e-6);
        let s = KernelSpec::sobolev(1.0, 1, 1.0);
        assert!((critical_radius(&s, 1000, None).unwrap() - 0.1).abs() < 1e-12);
        let adj = critical_radius(&g, 100, Some(0.5)).unwrap();
        assert!((adj - (25f64.ln() / 25.0).sqrt()).abs() < 1e-15);
        assert!(critical_radius(&g, 5, Some(0.5)).is_err());
        assert!(critical_radius(&g, 2, None).is_err());
    }

    #[test]
    fn masked_evaluation_vanishes_off_x0() {
        let f = RepresenterFunction::new(
            vec![vec![0.0]],
            vec![1.0],
            KernelSpec::gaussian(1.0),
            Some(X0Set::Interval { lo: 0.0, hi: 1.0 }),
        );
        assert_eq!(f.eval(&[0.0], 2.0), 0.0);
        assert_eq!(f.eval(&[0.0], 0.5), 1.0);
    }
}
