//! Moment specifications and the cross-fitted debiased estimator of θ.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Observation};
use crate::error::{invalid, KrasError, Result};
use crate::kernels::X0Set;

/// One point-evaluation term `coef * f(point)` of a linear moment map.
/// `x` is the structural-zero coordinate of `point`.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub coef: f64,
    pub point: Vec<f64>,
    pub x: f64,
}

impl Term {
    pub fn new(coef: f64, point: Vec<f64>, x: f64) -> Self {
        Term { coef, point, x }
    }
}

/// Constants `B₂`, `B₃` bounding the moment maps in L².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentBounds {
    pub b2: f64,
    pub b3: f64,
}

/// A function of a point and its structural-zero coordinate.
pub type Nuisance = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;

/// The maps `m(o; g)`, `m̃(o; h)`, the weight `r(o)` and the structural-zero sets.
///
/// Both maps are written as finite sums of point evaluations, which makes them
/// linear in the function argument by construction and tells the estimators
/// where the adversary has to be represented.
pub trait MomentSpec: Send + Sync {
    /// Terms of `m(o; g)`; points live in Z-space.
    fn m_terms(&self, o: &Observation) -> Vec<Term>;

    /// Terms of `m̃(o; h)`; points live in W-space.
    fn m_tilde_terms(&self, o: &Observation) -> Vec<Term>;

    fn r(&self, o: &Observation) -> f64 {
        o.r
    }

    /// Set `X₀` outside which `ρ` vanishes (equation `T h = ρ`).
    fn x0_h(&self) -> X0Set {
        X0Set::All
    }

    /// Set outside which `ρ̃` vanishes (equation `T* g = ρ̃`).
    fn x0_g(&self) -> X0Set {
        X0Set::All
    }

    fn bounds(&self) -> Option<MomentBounds> {
        None
    }

    fn m(&self, o: &Observation, g: &dyn Fn(&[f64], f64) -> f64) -> f64 {
        self.m_terms(o).iter().map(|t| t.coef * g(&t.point, t.x)).sum()
    }

    fn m_tilde(&self, o: &Observation, h: &dyn Fn(&[f64], f64) -> f64) -> f64 {
        self.m_tilde_terms(o).iter().map(|t| t.coef * h(&t.point, t.x)).sum()
    }
}

/// The same moment structure seen from the adjoint equation: W and Z swap,
/// `m` and `m̃` swap, and the two structural-zero sets swap.
///
/// Observations passed to an `Adjoint` spec are expected to be swapped rows.
pub struct Adjoint(pub Arc<dyn MomentSpec>);

impl MomentSpec for Adjoint {
    fn m_terms(&self, o: &Observation) -> Vec<Term> {
        self.0.m_tilde_terms(&o.swapped())
    }
    fn m_tilde_terms(&self, o: &Observation) -> Vec<Term> {
        self.0.m_terms(&o.swapped())
    }
    fn r(&self, o: &Observation) -> f64 {
        self.0.r(&o.swapped())
    }
    fn x0_h(&self) -> X0Set {
        self.0.x0_g()
    }
    fn x0_g(&self) -> X0Set {
        self.0.x0_h()
    }
    fn bounds(&self) -> Option<MomentBounds> {
        self.0.bounds()
    }
}

/// Largest deviation from linearity of `m` and `m̃` at one observation:
/// `|m(o; a f + b g) - a m(o; f) - b m(o; g)|` for the given probe functions.
pub fn linearity_defect(
    spec: &dyn MomentSpec,
    o: &Observation,
    f: &dyn Fn(&[f64], f64) -> f64,
    g: &dyn Fn(&[f64], f64) -> f64,
    a: f64,
    b: f64,
) -> f64 {
    let comb = |p: &[f64], x: f64| a * f(p, x) + b * g(p, x);
    let dm = spec.m(o, &comb) - a * spec.m(o, f) - b * spec.m(o, g);
    let dt = spec.m_tilde(o, &comb) - a * spec.m_tilde(o, f) - b * spec.m_tilde(o, g);
    dm.abs().max(dt.abs())
}

/// `φ(o; h, g) = m̃(o; h) + m(o; g) - r(o) h(w) g(z)`.
pub fn influence(
    o: &Observation,
    h: &dyn Fn(&[f64], f64) -> f64,
    g: &dyn Fn(&[f64], f64) -> f64,
    spec: &dyn MomentSpec,
) -> f64 {
    spec.m_tilde(o, h) + spec.m(o, g) - spec.r(o) * h(&o.w, o.x) * g(&o.z, o.x)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DmlResult {
    pub theta_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub fold_estimates: Vec<f64>,
    /// Mixed-bias remainder diagnostic, when the truth is known.
    pub remainder_proxy: Option<f64>,
    pub n: usize,
    pub k: usize,
}

/// Normal quantile for two-sided 95% intervals.
pub const Z_975: f64 = 1.96;

/// Deterministic shuffled round-robin fold labels.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (i, &p) in perm.iter().enumerate() {
        fold[p] = i % k;
    }
    fold
}

/// Fits a nuisance from a training sample.
pub type Fitter<'a> = &'a (dyn Fn(&Dataset) -> Result<Nuisance> + Sync);

/// θ̂ and its standard error from influence values already evaluated out of fold.
pub fn summarize(phi: &[f64], folds: &[usize], k: usize) -> DmlResult {
    let n = phi.len();
    let theta = phi.iter().sum::<f64>() / n as f64;
    let var = phi.iter().map(|p| (p - theta) * (p - theta)).sum::<f64>() / n as f64;
    let se = (var / n as f64).sqrt();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (p, &f) in phi.iter().zip(folds) {
        sums[f] += p;
        counts[f] += 1;
    }
    let fold_estimates = sums.iter().zip(&counts).map(|(s, c)| s / (*c).max(1) as f64).collect();
    DmlResult {
        theta_hat: theta,
        se,
        ci_low: theta - Z_975 * se,
        ci_high: theta + Z_975 * se,
        fold_estimates,
        remainder_proxy: None,
        n,
        k,
    }
}

/// Cross-fitted estimator: nuisances are fit on each fold's complement and φ is
/// averaged over the held-out rows.
pub fn crossfit(
    data: &Dataset,
    k: usize,
    seed: u64,
    fit_h: Fitter<'_>,
    fit_g: Fitter<'_>,
    spec: &dyn MomentSpec,
) -> Result<DmlResult> {
    let n = data.n();
    if k < 2 || n < 2 * k {
        return invalid(format!("crossfit needs K >= 2 and n >= 2K (K={k}, n={n})"));
    }
    let folds = fold_assignment(n, k, seed);
    let per_fold: Vec<Result<Vec<(usize, f64)>>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
            let held: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
            let wrap = |e: KrasError| KrasError::Fold { fold: f, source: Box::new(e) };
            let sub = data.subset(&train).map_err(wrap)?;
            let h = fit_h(&sub).map_err(wrap)?;
            let g = fit_g(&sub).map_err(wrap)?;
            Ok(held.iter().map(|&i| (i, influence(&data.rows[i], &*h, &*g, spec))).collect())
        })
        .collect();
    let mut phi = vec![0.0; n];
    for fold in per_fold {
        for (i, v) in fold? {
            phi[i] = v;
        }
    }
    Ok(summarize(&phi, &folds, k))
}

/// Constants of the penalty schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningConstants {
    #[serde(default = "one")]
    pub c_h: f64,
    #[serde(default = "one")]
    pub c_g: f64,
    /// Stabilization constant `c`.
    #[serde(default = "one")]
    pub c: f64,
    /// `B₁ = B′/c²`; when set, `λ_G` is at least `157 c² δ² / B₁²`.
    #[serde(default)]
    pub b1: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl Default for TuningConstants {
    fn default() -> Self {
        TuningConstants { c_h: 1.0, c_g: 1.0, c: 1.0, b1: None }
    }
}

/// `λ_H = C_H δ^{2/(1+min(β,1))}` capped at 1, and `λ_G = max(C_G δ², 157 c² δ²/B₁²)`.
pub fn tune_lambdas(delta_n: f64, beta: f64, k: &TuningConstants) -> Result<(f64, f64)> {
    if !(delta_n > 0.0 && delta_n < 1.0) {
        return invalid(format!("delta_n must lie in (0,1), got {delta_n}"));
    }
    if !(beta > 0.0) || !(k.c_h > 0.0) || !(k.c_g > 0.0) {
        return invalid("beta and tuning constants must be positive");
    }
    let b = beta.min(1.0);
    let lambda_h = (k.c_h * delta_n.powf(2.0 / (1.0 + b))).min(1.0);
    let mut lambda_g = k.c_g * delta_n * delta_n;
    if let Some(b1) = k.b1 {
        if !(b1 > 0.0) {
            return invalid("B1 must be positive");
        }
        lambda_g = lambda_g.max(157.0 * k.c * k.c * delta_n * delta_n / (b1 * b1));
    }
    Ok((lambda_h, lambda_g))
}

/// `min(h_weak · g_rmse, g_weak · h_rmse)`, the bound on the mixed-bias remainder.
pub fn remainder_diag(h_weak: f64, h_rmse: f64, g_weak: f64, g_rmse: f64) -> Result<f64> {
    if [h_weak, h_rmse, g_weak, g_rmse].iter().any(|v| !(*v >= 0.0)) {
        return invalid("remainder inputs must be nonnegative");
    }
    Ok((h_weak * g_rmse).min(g_weak * h_rmse))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Plain;
    impl MomentSpec for Plain {
        fn m_terms(&self, o: &Observation) -> Vec<Term> {
            vec![Term::new(o.s, o.z.clone(), o.x)]
        }
        fn m_tilde_terms(&self, o: &Observation) -> Vec<Term> {
            vec![Term::new(2.0, o.w.clone(), o.x), Term::new(-1.0, vec![o.w[0] + 1.0], o.x)]
        }
    }

    fn obs(s: f64) -> Observation {
        Observation { w: vec![0.5], z: vec![-1.0], x: 0.0, s, r: 0.7, w_index: None, z_index: None }
    }

    #[test]
    fn influence_of_zero_nuisances_is_zero() {
        let zero = |_: &[f64], _: f64| 0.0;
        assert_eq!(influence(&obs(3.0), &zero, &zero, &Plain), 0.0);
    }

    #[test]
    fn influence_three_terms() {
        let h = |p: &[f64], _: f64| p[0] * p[0];
        let g = |p: &[f64], _: f64| p[0] + 3.0;
        let o = obs(2.0);
        // m̃ = 2·0.25 − 1·2.25, m = 2·2, r h g = 0.7·0.25·2
        let want = (0.5 - 2.25) + 4.0 - 0.7 * 0.25 * 2.0;
        assert!((influence(&o, &h, &g, &Plain) - want).abs() < 1e-15);
    }

    #[test]
    fn adjoint_swaps_roles() {
        let spec: Arc<dyn MomentSpec> = Arc::new(Plain);
        let adj = Adjoint(spec.clone());
        let o = obs(2.0);
        let sw = o.swapped();
        assert_eq!(adj.m_terms(&sw), spec.m_tilde_terms(&o));
        assert_eq!(adj.m_tilde_terms(&sw), spec.m_terms(&o));
        assert_eq!(adj.r(&sw), 0.7);
    }

    #[test]
    fn linearity_probe_passes_for_term_maps() {
        let f = |p: &[f64], _: f64| p[0].sin();
        let g = |p: &[f64], _: f64| p[0].exp();
        assert!(linearity_defect(&Plain, &obs(1.3), &f, &g, 0.4, -2.0) < 1e-12);
    }

    #[test]
    fn folds_are_balanced_and_deterministic() {
        let a = fold_assignment(23, 5, 7);
        assert_eq!(a, fold_assignment(23, 5, 7));
        assert_ne!(a, fold_assignment(23, 5, 8));
        for f in 0..5 {
            let c = a.iter().filter(|&&v| v == f).count();
            assert!(c == 4 || c == 5);
        }
    }

    #[test]
    fn constant_influence_gives_degenerate_interval() {
        let r = summarize(&[2.0; 10], &fold_assignment(10, 2, 0), 2);
        assert_eq!(r.se, 0.0);
        assert_eq!(r.ci_low, 2.0);
        assert_eq!(r.ci_high, 2.0);
        assert_eq!(r.fold_estimates, vec![2.0, 2.0]);
    }

    #[test]
    fn tuning_exponents() {
        let k = TuningConstants::default();
        let (lh, lg) = tune_lambdas(0.01, 1.0, &k).unwrap();
        assert!((lh - 0.01).abs() < 1e-15);
        assert!((lg - 1e-4).abs() < 1e-18);
        let (lh, _) = tune_lambdas(0.01, 0.5, &k).unwrap();
        assert!((lh - 0.01f64.powf(4.0 / 3.0)).abs() < 1e-15);
        let (l3, _) = tune_lambdas(0.01, 3.0, &k).unwrap();
        assert!((l3 - 0.01).abs() < 1e-15);
        let big = TuningConstants { c_h: 1e6, ..k };
        assert_eq!(tune_lambdas(0.01, 1.0, &big).unwrap().0, 1.0);
        let floor = TuningConstants { b1: Some(2.0), ..k };
        let (_, lg) = tune_lambdas(0.1, 1.0, &floor).unwrap();
        assert!((lg - 157.0 * 0.01 / 4.0).abs() < 1e-12);
        assert!(tune_lambdas(1.0, 1.0, &k).is_err());
        assert!(tune_lambdas(0.1, 0.0, &k).is_err());
    }

    #[test]
    fn remainder_arithmetic() {
        assert_eq!(remainder_diag(1.0, 2.0, 3.0, 4.0).unwrap(), 4.0);
        assert_eq!(remainder_diag(0.0, 2.0, 3.0, 4.0).unwrap(), 0.0);
        assert!(remainder_diag(-1.0, 2.0, 3.0, 4.0).is_err());
    }
}
