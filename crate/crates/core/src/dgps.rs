//! Continuous-data generators for three causal designs with known targets:
//! proximal inference, proximal policy shifts and outcomes missing not at
//! random with a shadow variable.
//!
//! Exogenous noise is normal truncated to `±truncation·sd` by rejection, so
//! every variable has compact support and linear bridge functions stay exact.

use std::path::Path;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, Dataset, Observation};
use crate::dml::{MomentBounds, MomentSpec, Nuisance, Term};
use crate::error::{invalid, KrasError, Result};
use crate::kernels::{KernelSpec, RepresenterFunction, X0Set};

pub fn expit(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` (Golub-Welsch), sorted by node.
fn standard_gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let jac = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            let k = i.max(j) as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = crate::linalg::sym_eigen(jac);
    let mut out: Vec<(f64, f64)> = (0..n).map(|j| (eig.eigenvalues[j], 2.0 * eig.eigenvectors[(0, j)].powi(2))).collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Gauss-Legendre nodes and weights on `[lo, hi]`. Standard rules are cached per `n`.
pub fn gauss_legendre(n: usize, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<(f64, f64)>>>>> = OnceLock::new();
    let rule = {
        let mut cache = CACHE.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
        cache.entry(n).or_insert_with(|| Arc::new(standard_gauss_legendre(n))).clone()
    };
    let (mid, half) = ((lo + hi) / 2.0, (hi - lo) / 2.0);
    rule.iter().map(|&(x, w)| (mid + half * x, half * w)).collect()
}

/// Normal(0, sd) truncated to `[-k·sd, k·sd]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncatedNormal {
    pub sd: f64,
    pub k: f64,
}

impl TruncatedNormal {
    pub fn bound(&self) -> f64 {
        self.k * self.sd
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.sd == 0.0 {
            return 0.0;
        }
        let normal = Normal::new(0.0, self.sd).expect("positive sd");
        loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= self.bound() {
                return v;
            }
        }
    }

    /// Unnormalized density; the normalizing constant cancels in every ratio used here.
    pub fn kernel(&self, v: f64) -> f64 {
        if v.abs() > self.bound() {
            0.0
        } else {
            (-0.5 * (v / self.sd).powi(2)).exp()
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn abs_sum(a: &[f64]) -> f64 {
    a.iter().map(|v| v.abs()).sum()
}

/// Structural coefficients shared by the two proximal designs.
///
/// `L` (dimension `l_dim`) and `U` are exogenous; treatment depends on
/// `η = alpha0 + alpha_l·L + alpha_u U`;
/// `W′ = c_w U + c_wl·L + e_W`, `Z′ = d_a A + d_u U + d_l·L + e_Z`,
/// `Y = b0 + b_a A + b_l·L + b_u U + e_Y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sem {
    pub l_dim: usize,
    pub alpha0: f64,
    pub alpha_l: Vec<f64>,
    pub alpha_u: f64,
    pub c_w: f64,
    pub c_wl: Vec<f64>,
    pub d_a: f64,
    pub d_u: f64,
    pub d_l: Vec<f64>,
    pub b0: f64,
    pub b_a: f64,
    pub b_l: Vec<f64>,
    pub b_u: f64,
    pub noise_sd: f64,
    pub truncation: f64,
}

impl Default for Sem {
    fn default() -> Self {
        Sem {
            l_dim: 1,
            alpha0: 0.0,
            alpha_l: vec![0.5],
            alpha_u: 0.5,
            c_w: 1.0,
            c_wl: vec![0.3],
            d_a: 0.5,
            d_u: 1.0,
            d_l: vec![0.3],
            b0: 0.0,
            b_a: 1.0,
            b_l: vec![0.5],
            b_u: 1.0,
            noise_sd: 1.0,
            truncation: 3.0,
        }
    }
}

impl Sem {
    /// No confounding and no treatment effect.
    pub fn null() -> Self {
        Sem { alpha_l: vec![0.0], alpha_u: 0.0, b_a: 0.0, b_u: 0.0, d_u: 0.0, c_w: 1.0, ..Sem::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.l_dim == 0 {
            return invalid("l_dim must be at least 1");
        }
        for (name, v) in [("alpha_l", &self.alpha_l), ("c_wl", &self.c_wl), ("d_l", &self.d_l), ("b_l", &self.b_l)] {
            if v.len() != self.l_dim {
                return invalid(format!("{name} needs {} entries", self.l_dim));
            }
        }
        if self.c_w == 0.0 {
            return invalid("c_w must be nonzero for the outcome bridge to exist");
        }
        if !(self.noise_sd > 0.0) || !(self.truncation > 0.0) {
            return invalid("noise_sd and truncation must be positive");
        }
        Ok(())
    }

    pub fn noise(&self) -> TruncatedNormal {
        TruncatedNormal { sd: self.noise_sd, k: self.truncation }
    }

    /// Largest `|η|` over the support.
    fn eta_bound(&self) -> f64 {
        self.alpha0.abs() + (abs_sum(&self.alpha_l) + self.alpha_u.abs()) * self.noise().bound()
    }

    fn eta(&self, l: &[f64], u: f64) -> f64 {
        self.alpha0 + dot(&self.alpha_l, l) + self.alpha_u * u
    }

    /// Outcome bridge `h0(a, l, w′) = b0 + b_a a + b_l·l + (b_u/c_w)(w′ - c_wl·l)`.
    pub fn h0(&self, l: &[f64], a: f64, wp: f64) -> f64 {
        self.b0 + self.b_a * a + dot(&self.b_l, l) + self.b_u / self.c_w * (wp - dot(&self.c_wl, l))
    }

    fn draw_lu(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
        let e = self.noise();
        let l = (0..self.l_dim).map(|_| e.sample(rng)).collect();
        let u = e.sample(rng);
        (l, u)
    }

    fn y_bound(&self, a_max: f64) -> f64 {
        let b = self.noise().bound();
        self.b0.abs() + self.b_a.abs() * a_max + (abs_sum(&self.b_l) + self.b_u.abs() + 1.0) * b
    }
}

/// Density on `[c, d]` proportional to `1 + τ t(a)`, with `t` mapping `[c, d]` onto `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Tilted {
    c: f64,
    d: f64,
}

impl Tilted {
    fn density(&self, a: f64, tau: f64) -> f64 {
        if a < self.c || a > self.d {
            return 0.0;
        }
        let t = (2.0 * a - self.c - self.d) / (self.d - self.c);
        (1.0 + tau * t) / (self.d - self.c)
    }

    fn inverse_cdf(&self, u: f64, tau: f64) -> f64 {
        let t = if tau.abs() < 1e-12 {
            2.0 * u - 1.0
        } else {
            (-1.0 + (1.0 - 2.0 * tau * (1.0 - tau / 2.0 - 2.0 * u)).max(0.0).sqrt()) / tau
        };
        let t = t.clamp(-1.0, 1.0);
        (self.c + self.d) / 2.0 + t * (self.d - self.c) / 2.0
    }
}

/// Role-named table written alongside a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct RoleTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl RoleTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(&self.headers)?;
        for r in &self.rows {
            wtr.write_record(r.iter().map(|v| fmt_f64(*v)))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn role_headers(l_dim: usize, tail: &[&str]) -> Vec<String> {
    (0..l_dim).map(|j| format!("l{j}")).chain(tail.iter().map(|s| s.to_string())).collect()
}

/// A sample with its moment structure.
pub struct Generated {
    pub data: Dataset,
    pub spec: Arc<dyn MomentSpec>,
    pub table: RoleTable,
}

/// Known target with its Monte Carlo standard error (zero for closed forms).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OracleTheta {
    pub value: f64,
    pub mc_se: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum OracleMethod {
    ClosedForm,
    FullDataMc { draws: usize, seed: u64 },
}

fn mean_se(v: &[f64]) -> OracleTheta {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    OracleTheta { value: m, mc_se: (var / n).sqrt() }
}

fn check_draws(draws: usize) -> Result<()> {
    if draws < 2 {
        return invalid("Monte Carlo oracle needs at least 2 draws");
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Treatment {
    Binary,
    Continuous,
}

/// Weight `π(a, l)` of the proximal target `E[Σ_a π(a, L) Y(a)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProximalWeight {
    /// `2a - 1`: average treatment effect (binary).
    Ate,
    /// `a`: mean outcome under treatment (binary); `ρ̃` vanishes at `a = 0`.
    TreatedMean,
    /// `1/(d - c)`: average dose response over `[c, d]` (continuous).
    DoseAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProximalParams {
    pub sem: Sem,
    pub treatment: Treatment,
    pub weight: ProximalWeight,
    /// Continuous support `[c, d]` of `A`.
    pub c: f64,
    pub d: f64,
    /// Continuous treatments use tilt `τ = tau_max · tanh(η)`.
    pub tau_max: f64,
    pub propensity_floor: f64,
    /// Quadrature nodes for continuous `m̃`.
    pub quadrature_nodes: usize,
}

impl Default for ProximalParams {
    fn default() -> Self {
        ProximalParams {
            sem: Sem::default(),
            treatment: Treatment::Binary,
            weight: ProximalWeight::Ate,
            c: 0.0,
            d: 1.0,
            tau_max: 0.5,
            propensity_floor: 0.02,
            quadrature_nodes: 16,
        }
    }
}

impl ProximalParams {
    pub fn validate(&self) -> Result<()> {
        self.sem.validate()?;
        match (self.treatment, self.weight) {
            (Treatment::Binary, ProximalWeight::DoseAverage) | (Treatment::Continuous, ProximalWeight::Ate | ProximalWeight::TreatedMean) => {
                return invalid(format!("weight {:?} does not apply to {:?} treatment", self.weight, self.treatment));
            }
            _ => {}
        }
        match self.treatment {
            Treatment::Binary => {
                let e = self.sem.eta_bound();
                let lo = expit(-e);
                if lo < self.propensity_floor {
                    return invalid(format!("propensity reaches {lo:.3e}, below the floor {}", self.propensity_floor));
                }
            }
            Treatment::Continuous => {
                if !(self.c < self.d) || !(0.0..1.0).contains(&self.tau_max) || self.quadrature_nodes == 0 {
                    return invalid("continuous treatment needs c < d, 0 <= tau_max < 1 and quadrature nodes");
                }
                if (1.0 - self.tau_max) / (self.d - self.c) < self.propensity_floor {
                    return invalid("treatment density falls below the floor");
                }
            }
        }
        Ok(())
    }

    fn pi(&self, a: f64) -> f64 {
        match self.weight {
            ProximalWeight::Ate => 2.0 * a - 1.0,
            ProximalWeight::TreatedMean => a,
            ProximalWeight::DoseAverage => 1.0 / (self.d - self.c),
        }
    }

    /// Treatment levels and weights of `m̃(o; h) = Σ_k ω_k π(a_k) h(a_k, l, w′)`.
    fn levels(&self) -> Vec<(f64, f64)> {
        match self.treatment {
            Treatment::Binary => vec![(0.0, 1.0), (1.0, 1.0)],
            Treatment::Continuous => gauss_legendre(self.quadrature_nodes, self.c, self.d),
        }
    }

    fn draw_a(&self, l: &[f64], u: f64, rng: &mut ChaCha8Rng) -> f64 {
        let eta = self.sem.eta(l, u);
        match self.treatment {
            Treatment::Binary => f64::from(u8::from(rng.gen::<f64>() < expit(eta))),
            Treatment::Continuous => Tilted { c: self.c, d: self.d }.inverse_cdf(rng.gen(), self.tau_max * eta.tanh()),
        }
    }

    /// `p(a | l)`, integrating the unmeasured confounder out by quadrature.
    pub fn propensity(&self, a: f64, l: &[f64]) -> f64 {
        self.propensity_on(&self.confounder_nodes(), a, l)
    }

    fn confounder_nodes(&self) -> Vec<(f64, f64)> {
        let b = self.sem.noise().bound();
        gauss_legendre(64, -b, b)
    }

    fn propensity_on(&self, nodes: &[(f64, f64)], a: f64, l: &[f64]) -> f64 {
        let e = self.sem.noise();
        let (mut num, mut den) = (0.0, 0.0);
        for &(u, w) in nodes {
            let pu = e.kernel(u) * w;
            let eta = self.sem.eta(l, u);
            let pa = match self.treatment {
                Treatment::Binary => {
                    let p1 = expit(eta);
                    if a == 1.0 {
                        p1
                    } else {
                        1.0 - p1
                    }
                }
                Treatment::Continuous => Tilted { c: self.c, d: self.d }.density(a, self.tau_max * eta.tanh()),
            };
            num += pu * pa;
            den += pu;
        }
        num / den
    }
}

/// `r ≡ 1`, `m(o; g) = y g(z)`, `m̃(o; h) = Σ_k ω_k π(a_k) h(l, a_k, w′)`.
///
/// Points are `w = (l, a, w′)` and `z = (l, a, z′)`; the structural-zero coordinate is `a`.
pub struct ProximalSpec {
    pub params: ProximalParams,
    levels: Vec<(f64, f64)>,
}

impl ProximalSpec {
    pub fn new(params: ProximalParams) -> Result<Self> {
        params.validate()?;
        let levels = params.levels();
        Ok(ProximalSpec { params, levels })
    }
}

fn with_a(point: &[f64], l_dim: usize, a: f64) -> Vec<f64> {
    let mut p = point.to_vec();
    p[l_dim] = a;
    p
}

impl MomentSpec for ProximalSpec {
    fn m_terms(&self, o: &Observation) -> Vec<Term> {
        vec![Term::new(o.s, o.z.clone(), o.x)]
    }
    fn m_tilde_terms(&self, o: &Observation) -> Vec<Term> {
        let ld = self.params.sem.l_dim;
        self.levels
            .iter()
            .map(|&(a, w)| Term::new(w * self.params.pi(a), with_a(&o.w, ld, a), a))
            .filter(|t| t.coef != 0.0)
            .collect()
    }
    fn x0_g(&self) -> X0Set {
        match self.params.weight {
            ProximalWeight::TreatedMean => X0Set::Values { values: vec![1.0] },
            _ => X0Set::All,
        }
    }
}

pub fn gen_proximal(params: &ProximalParams, n: usize, seed: u64) -> Result<Generated> {
    let spec = ProximalSpec::new(params.clone())?;
    let sem = &params.sem;
    let e = sem.noise();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut table = Vec::with_capacity(n);
    for _ in 0..n {
        let (l, u) = sem.draw_lu(&mut rng);
        let a = params.draw_a(&l, u, &mut rng);
        let wp = sem.c_w * u + dot(&sem.c_wl, &l) + e.sample(&mut rng);
        let zp = sem.d_a * a + sem.d_u * u + dot(&sem.d_l, &l) + e.sample(&mut rng);
        let y = sem.b0 + sem.b_a * a + dot(&sem.b_l, &l) + sem.b_u * u + e.sample(&mut rng);
        let mut w = l.clone();
        w.extend([a, wp]);
        let mut z = l.clone();
        z.extend([a, zp]);
        rows.push(Observation { w, z, x: a, s: y, r: 1.0, w_index: None, z_index: None });
        let mut rec = l;
        rec.extend([a, zp, wp, y]);
        table.push(rec);
    }
    Ok(Generated {
        data: Dataset::new(rows)?,
        spec: Arc::new(spec),
        table: RoleTable { headers: role_headers(sem.l_dim, &["a", "zprime", "wprime", "y"]), rows: table },
    })
}

/// `h0` and a reference `g(z) = π(a, l)/p(a | l)`.
///
/// The reference `g` is not the treatment bridge, but `φ` stays unbiased because `h0` is exact.
pub fn proximal_nuisances(params: &ProximalParams) -> Result<(Nuisance, Nuisance)> {
    params.validate()?;
    let ld = params.sem.l_dim;
    let p1 = params.clone();
    let h: Nuisance = Arc::new(move |w: &[f64], _x: f64| p1.sem.h0(&w[..ld], w[ld], w[ld + 1]));
    let p2 = params.clone();
    let nodes = params.confounder_nodes();
    let g: Nuisance = Arc::new(move |z: &[f64], _x: f64| {
        let (l, a) = (&z[..ld], z[ld]);
        let pi = p2.pi(a);
        if pi == 0.0 {
            0.0
        } else {
            pi / p2.propensity_on(&nodes, a, l)
        }
    });
    Ok((h, g))
}

/// `E[Σ_a π(a, L) Y(a)]`.
pub fn oracle_theta_proximal(params: &ProximalParams, method: OracleMethod) -> Result<OracleTheta> {
    params.validate()?;
    let sem = &params.sem;
    // Exogenous noise is centered, so E[Y(a)] = b0 + b_a a.
    let mean_y = |a: f64| sem.b0 + sem.b_a * a;
    match method {
        OracleMethod::ClosedForm => {
            let value = match params.weight {
                ProximalWeight::Ate => sem.b_a,
                ProximalWeight::TreatedMean => mean_y(1.0),
                ProximalWeight::DoseAverage => mean_y((params.c + params.d) / 2.0),
            };
            Ok(OracleTheta { value, mc_se: 0.0 })
        }
        OracleMethod::FullDataMc { draws, seed } => {
            check_draws(draws)?;
            let e = sem.noise();
            let levels = params.levels();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..draws)
                .map(|_| {
                    let (l, u) = sem.draw_lu(&mut rng);
                    let ey = e.sample(&mut rng);
                    levels
                        .iter()
                        .map(|&(a, w)| w * params.pi(a) * (sem.b0 + sem.b_a * a + dot(&sem.b_l, &l) + sem.b_u * u + ey))
                        .sum()
                })
                .collect();
            Ok(mean_se(&v))
        }
    }
}

/// Residuals `E_n[(Y - h0(W)) φ_j(Z)]` and their standard errors for test functions `φ_j`
/// of `Z = (l, a, z′)`: `1, a, l_0, z′, z′², a z′`.
pub fn proximal_bridge_residuals(params: &ProximalParams, data: &Dataset) -> Vec<(f64, f64)> {
    let ld = params.sem.l_dim;
    let tests: [&dyn Fn(&[f64]) -> f64; 6] = [
        &|_| 1.0,
        &|z| z[ld],
        &|z| z[0],
        &|z| z[ld + 1],
        &|z| z[ld + 1] * z[ld + 1],
        &|z| z[ld] * z[ld + 1],
    ];
    tests
        .iter()
        .map(|f| {
            let v: Vec<f64> = data
                .rows
                .iter()
                .map(|o| (o.s - params.sem.h0(&o.w[..ld], o.w[ld], o.w[ld + 1])) * f(&o.z))
                .collect();
            let t = mean_se(&v);
            (t.value, t.mc_se)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyShiftParams {
    pub sem: Sem,
    pub c: f64,
    pub d: f64,
    pub delta: f64,
    pub epsilon: f64,
    /// Tilt `τ = tau_max · tanh(η)` of the treatment density.
    pub tau_max: f64,
}

impl Default for PolicyShiftParams {
    fn default() -> Self {
        PolicyShiftParams { sem: Sem::default(), c: 0.0, d: 1.0, delta: 0.2, epsilon: 0.1, tau_max: 0.5 }
    }
}

impl PolicyShiftParams {
    pub fn validate(&self) -> Result<()> {
        self.sem.validate()?;
        if !(self.delta >= 0.0) || !(self.epsilon > 0.0) {
            return invalid("policy shift needs delta >= 0 and epsilon > 0");
        }
        if !(self.d - self.delta - self.epsilon > self.c) {
            return invalid(format!("need d - delta - epsilon > c (c={}, d={}, delta={}, epsilon={})", self.c, self.d, self.delta, self.epsilon));
        }
        if !(0.0..1.0).contains(&self.tau_max) {
            return invalid("tau_max must lie in [0, 1)");
        }
        Ok(())
    }

    fn tilted(&self) -> Tilted {
        Tilted { c: self.c, d: self.d }
    }

    /// `q(a) = a + δ` below `d - δ - ε`, then linear onto `[d - ε, d]`.
    pub fn q(&self, a: f64) -> f64 {
        let (d, dl, ep) = (self.d, self.delta, self.epsilon);
        if a < d - dl - ep {
            a + dl
        } else {
            a + dl * (d - a) / (dl + ep)
        }
    }

    /// `(q⁻¹(a), dq⁻¹/da)` on `[c + δ, d]`.
    pub fn q_inverse(&self, a: f64) -> (f64, f64) {
        let (d, dl, ep) = (self.d, self.delta, self.epsilon);
        if a < d - ep {
            (a - dl, 1.0)
        } else {
            let slope = (dl + ep) / ep;
            ((a - dl * d / (dl + ep)) * slope, slope)
        }
    }

    pub fn x0(&self) -> X0Set {
        X0Set::Interval { lo: self.c + self.delta, hi: self.d }
    }

    /// `p(a | l, w′)`, integrating `U` against its conditional law given `(l, w′)`.
    fn conditional_density(&self, a: f64, l: &[f64], wp: f64) -> f64 {
        let sem = &self.sem;
        let e = sem.noise();
        let shift = wp - dot(&sem.c_wl, l);
        // e_W = shift - c_w u must stay inside its support.
        let (mut lo, mut hi) = ((shift - e.bound()) / sem.c_w, (shift + e.bound()) / sem.c_w);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        let (lo, hi) = (lo.max(-e.bound()), hi.min(e.bound()));
        if lo >= hi {
            return f64::NAN;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (u, w) in gauss_legendre(48, lo, hi) {
            let pu = e.kernel(u) * e.kernel(shift - sem.c_w * u) * w;
            num += pu * self.tilted().density(a, self.tau_max * sem.eta(l, u).tanh());
            den += pu;
        }
        num / den
    }

    /// `ρ̃(a, l, w′) = I₀(a) (dq⁻¹/da) p(q⁻¹(a) | l, w′) / p(a | l, w′)`.
    pub fn rho_tilde(&self, a: f64, l: &[f64], wp: f64) -> f64 {
        if !self.x0().contains(a) {
            return 0.0;
        }
        let (ainv, jac) = self.q_inverse(a);
        jac * self.conditional_density(ainv, l, wp) / self.conditional_density(a, l, wp)
    }

    /// Bound on `ρ̃` from the density tilt: `((δ+ε)/ε) (1+τ_max)/(1-τ_max)`.
    pub fn rho_tilde_bound(&self) -> f64 {
        (self.delta + self.epsilon) / self.epsilon * (1.0 + self.tau_max) / (1.0 - self.tau_max)
    }

    /// Largest `ρ̃` over sampled `(l, w′)` and a grid of treatment values in `X₀`.
    pub fn rho_tilde_sup(&self, points: usize, grid: usize, seed: u64) -> Result<f64> {
        let g = gen_policy_shift(self, points.max(2), seed)?;
        let ld = self.sem.l_dim;
        let lo = self.c + self.delta;
        let mut sup: f64 = 0.0;
        for o in &g.data.rows {
            for k in 0..=grid {
                let a = lo + (self.d - lo) * k as f64 / grid as f64;
                let v = self.rho_tilde(a, &o.w[..ld], o.w[ld + 1]);
                if v.is_finite() {
                    sup = sup.max(v);
                }
            }
        }
        Ok(sup)
    }
}

/// `r ≡ 1`, `m(o; g) = y g(z)`, `m̃(o; h) = h(l, q(a), w′)`.
pub struct PolicyShiftSpec {
    pub params: PolicyShiftParams,
}

impl MomentSpec for PolicyShiftSpec {
    fn m_terms(&self, o: &Observation) -> Vec<Term> {
        vec![Term::new(o.s, o.z.clone(), o.x)]
    }
    fn m_tilde_terms(&self, o: &Observation) -> Vec<Term> {
        let ld = self.params.sem.l_dim;
        let qa = self.params.q(o.x);
        vec![Term::new(1.0, with_a(&o.w, ld, qa), qa)]
    }
    fn x0_g(&self) -> X0Set {
        self.params.x0()
    }
    fn bounds(&self) -> Option<MomentBounds> {
        let p = &self.params;
        Some(MomentBounds { b2: p.rho_tilde_bound().sqrt(), b3: p.sem.y_bound(p.c.abs().max(p.d.abs())) })
    }
}

pub fn gen_policy_shift(params: &PolicyShiftParams, n: usize, seed: u64) -> Result<Generated> {
    params.validate()?;
    let sem = &params.sem;
    let e = sem.noise();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut table = Vec::with_capacity(n);
    for _ in 0..n {
        let (l, u) = sem.draw_lu(&mut rng);
        let a = params.tilted().inverse_cdf(rng.gen(), params.tau_max * sem.eta(&l, u).tanh());
        let wp = sem.c_w * u + dot(&sem.c_wl, &l) + e.sample(&mut rng);
        let zp = sem.d_a * a + sem.d_u * u + dot(&sem.d_l, &l) + e.sample(&mut rng);
        let y = sem.b0 + sem.b_a * a + dot(&sem.b_l, &l) + sem.b_u * u + e.sample(&mut rng);
        let mut w = l.clone();
        w.extend([a, wp]);
        let mut z = l.clone();
        z.extend([a, zp]);
        rows.push(Observation { w, z, x: a, s: y, r: 1.0, w_index: None, z_index: None });
        let mut rec = l;
        rec.extend([a, zp, wp, y]);
        table.push(rec);
    }
    Ok(Generated {
        data: Dataset::new(rows)?,
        spec: Arc::new(PolicyShiftSpec { params: params.clone() }),
        table: RoleTable { headers: role_headers(sem.l_dim, &["a", "zprime", "wprime", "y"]), rows: table },
    })
}

/// `E[Y(q(A))]` by full-data Monte Carlo; no closed form is offered.
pub fn oracle_theta_policy(params: &PolicyShiftParams, method: OracleMethod) -> Result<OracleTheta> {
    params.validate()?;
    let OracleMethod::FullDataMc { draws, seed } = method else {
        return Err(KrasError::Config("policy shift target has no closed form; use full_data_mc".into()));
    };
    check_draws(draws)?;
    let sem = &params.sem;
    let e = sem.noise();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..draws)
        .map(|_| {
            let (l, u) = sem.draw_lu(&mut rng);
            let a = params.tilted().inverse_cdf(rng.gen(), params.tau_max * sem.eta(&l, u).tanh());
            sem.b0 + sem.b_a * params.q(a) + dot(&sem.b_l, &l) + sem.b_u * u + e.sample(&mut rng)
        })
        .collect();
    Ok(mean_se(&v))
}

/// Monte Carlo check of `‖m̃(·; h)‖₂ ≤ B₂ ‖I₀ h‖₂` over random RKHS functions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MBoundReport {
    /// Largest observed ratio.
    pub b2_hat: f64,
    pub min_ratio: f64,
    /// `√(sup ρ̃)` over a grid.
    pub bound: f64,
    /// Standard error of the ratio attaining `b2_hat`.
    pub se_at_max: f64,
    pub pass: bool,
}

pub fn verify_m_bound(params: &PolicyShiftParams, sample_size: usize, draws: usize, seed: u64) -> Result<MBoundReport> {
    let g = gen_policy_shift(params, sample_size, seed)?;
    let spec = PolicyShiftSpec { params: params.clone() };
    let x0 = params.x0();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let kernel = KernelSpec::gaussian(1.0);
    let n = g.data.n() as f64;
    let (mut b2_hat, mut min_ratio, mut se_at_max) = (0.0_f64, f64::INFINITY, 0.0);
    for _ in 0..draws {
        let centers: Vec<Vec<f64>> = (0..5).map(|_| g.data.rows[rng.gen_range(0..g.data.n())].w.clone()).collect();
        let coefs: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = RepresenterFunction::new(centers, coefs, kernel.clone(), None);
        let num: Vec<f64> = g.data.rows.iter().map(|o| spec.m_tilde(o, &|p, _| h.eval_unmasked(p)).powi(2)).collect();
        let den: Vec<f64> = g.data.rows.iter().map(|o| x0.indicator(o.x) * h.eval_unmasked(&o.w).powi(2)).collect();
        let (mn, md) = (num.iter().sum::<f64>() / n, den.iter().sum::<f64>() / n);
        if md <= 0.0 {
            continue;
        }
        let r2 = mn / md;
        // Delta method for the ratio of means.
        let var = num.iter().zip(&den).map(|(a, b)| (a - r2 * b).powi(2)).sum::<f64>() / (n * n) / (md * md);
        let ratio = r2.sqrt();
        let se = var.sqrt() / (2.0 * ratio);
        if ratio > b2_hat {
            b2_hat = ratio;
            se_at_max = se;
        }
        min_ratio = min_ratio.min(ratio);
    }
    let bound = params.rho_tilde_sup(200, 50, seed ^ 0x77)?.sqrt();
    let pass = b2_hat.is_finite() && min_ratio > 0.0 && b2_hat <= bound + 3.0 * se_at_max;
    Ok(MBoundReport { b2_hat, min_ratio, bound, se_at_max, pass })
}

/// `Y = beta0 + beta_x·X + e_Y`, `Z′ = gamma0 + gamma_x·X + gamma_y Y + e_Z`,
/// `P(Δ = 1 | x, y) = expit(alpha0 + alpha_x·x + alpha_y y)`; target `E[(1 - Δ) Y]`.
///
/// `alpha0 = +inf` gives complete data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MnarParams {
    pub x_dim: usize,
    pub beta0: f64,
    pub beta_x: Vec<f64>,
    pub gamma0: f64,
    pub gamma_x: Vec<f64>,
    /// Shadow-variable association with the outcome.
    pub gamma_y: f64,
    pub alpha0: f64,
    pub alpha_x: Vec<f64>,
    pub alpha_y: f64,
    pub noise_sd: f64,
    pub truncation: f64,
    pub response_floor: f64,
}

impl Default for MnarParams {
    fn default() -> Self {
        MnarParams {
            x_dim: 1,
            beta0: 1.0,
            beta_x: vec![0.5],
            gamma0: 0.0,
            gamma_x: vec![0.3],
            gamma_y: 1.0,
            alpha0: 1.0,
            alpha_x: vec![0.2],
            alpha_y: -0.3,
            noise_sd: 1.0,
            truncation: 3.0,
            response_floor: 0.05,
        }
    }
}

impl MnarParams {
    pub fn validate(&self) -> Result<()> {
        if self.x_dim == 0 || self.beta_x.len() != self.x_dim || self.gamma_x.len() != self.x_dim || self.alpha_x.len() != self.x_dim {
            return invalid("covariate coefficient vectors must have x_dim entries");
        }
        if self.gamma_y == 0.0 {
            return invalid("shadow variable must be associated with the outcome (gamma_y != 0)");
        }
        if !(self.noise_sd > 0.0) || !(self.truncation > 0.0) {
            return invalid("noise_sd and truncation must be positive");
        }
        if self.alpha0 == f64::INFINITY {
            return Ok(());
        }
        let b = self.noise().bound();
        let y_max = self.beta0.abs() + (abs_sum(&self.beta_x) + 1.0) * b;
        let worst = self.alpha0 - abs_sum(&self.alpha_x) * b - self.alpha_y.abs() * y_max;
        let p = expit(worst);
        if !(p > self.response_floor) {
            return invalid(format!("response probability reaches {p:.3e}, outside ({}, 1]", self.response_floor));
        }
        Ok(())
    }

    fn noise(&self) -> TruncatedNormal {
        TruncatedNormal { sd: self.noise_sd, k: self.truncation }
    }

    pub fn response_probability(&self, x: &[f64], y: f64) -> f64 {
        if self.alpha0 == f64::INFINITY {
            return 1.0;
        }
        expit(self.alpha0 + dot(&self.alpha_x, x) + self.alpha_y * y)
    }

    /// Odds of missingness `exp(-(alpha0 + alpha_x·x + alpha_y y))`.
    pub fn h0(&self, x: &[f64], y: f64) -> f64 {
        (-(self.alpha0 + dot(&self.alpha_x, x) + self.alpha_y * y)).exp()
    }

    /// `g0(x, z′) = (z′ - gamma0 - gamma_x·x) / gamma_y`, whose conditional mean given `(x, y)` is `y`.
    pub fn g0(&self, x: &[f64], zp: f64) -> f64 {
        (zp - self.gamma0 - dot(&self.gamma_x, x)) / self.gamma_y
    }
}

/// `r(o) = δ`, `m(o; g) = (1 - δ) g(x, z′)`, `m̃(o; h) = δ (δy) h(x, δy)`.
pub struct MnarSpec {
    pub params: MnarParams,
}

impl MomentSpec for MnarSpec {
    fn m_terms(&self, o: &Observation) -> Vec<Term> {
        vec![Term::new(1.0 - o.r, o.z.clone(), o.x)]
    }
    fn m_tilde_terms(&self, o: &Observation) -> Vec<Term> {
        let dy = o.w[self.params.x_dim];
        vec![Term::new(o.r * dy, o.w.clone(), o.x)]
    }
}

/// Rows carry `w = (x, δy)`, `z = (x, z′)`, `r = δ`, `s = δy` and the first covariate as `x`.
pub fn gen_mnar_shadow(params: &MnarParams, n: usize, seed: u64) -> Result<Generated> {
    params.validate()?;
    let e = params.noise();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut table = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..params.x_dim).map(|_| e.sample(&mut rng)).collect();
        let y = params.beta0 + dot(&params.beta_x, &x) + e.sample(&mut rng);
        let zp = params.gamma0 + dot(&params.gamma_x, &x) + params.gamma_y * y + e.sample(&mut rng);
        let delta = f64::from(u8::from(rng.gen::<f64>() < params.response_probability(&x, y)));
        let dy = delta * y;
        let mut w = x.clone();
        w.push(dy);
        let mut z = x.clone();
        z.push(zp);
        rows.push(Observation { w, z, x: x[0], s: dy, r: delta, w_index: None, z_index: None });
        let mut rec = x;
        rec.extend([zp, dy, delta]);
        table.push(rec);
    }
    Ok(Generated {
        data: Dataset::new(rows)?,
        spec: Arc::new(MnarSpec { params: params.clone() }),
        table: RoleTable { headers: role_headers(params.x_dim, &["zprime", "y", "delta"]), rows: table },
    })
}

pub fn mnar_nuisances(params: &MnarParams) -> Result<(Nuisance, Nuisance)> {
    params.validate()?;
    let xd = params.x_dim;
    let (p1, p2) = (params.clone(), params.clone());
    let h: Nuisance = Arc::new(move |w: &[f64], _x: f64| p1.h0(&w[..xd], w[xd]));
    let g: Nuisance = Arc::new(move |z: &[f64], _x: f64| p2.g0(&z[..xd], z[xd]));
    Ok((h, g))
}

/// `E[(1 - Δ) Y]` by Monte Carlo over full data, averaging `Δ` out analytically.
pub fn oracle_theta_mnar(params: &MnarParams, method: OracleMethod) -> Result<OracleTheta> {
    params.validate()?;
    let OracleMethod::FullDataMc { draws, seed } = method else {
        return Err(KrasError::Config("missing-data target has no closed form; use full_data_mc".into()));
    };
    check_draws(draws)?;
    let e = params.noise();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..draws)
        .map(|_| {
            let x: Vec<f64> = (0..params.x_dim).map(|_| e.sample(&mut rng)).collect();
            let y = params.beta0 + dot(&params.beta_x, &x) + e.sample(&mut rng);
            (1.0 - params.response_probability(&x, y)) * y
        })
        .collect();
    Ok(mean_se(&v))
}

/// Partial correlation of `Z′` and `Δ` given `(X, Y)` on full data, with its standard error `1/√n`.
pub fn mnar_shadow_probe(params: &MnarParams, n: usize, seed: u64) -> Result<(f64, f64)> {
    params.validate()?;
    let e = params.noise();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = params.x_dim + 2;
    let mut design = DMatrix::zeros(n, k);
    let mut zs = DMatrix::zeros(n, 1);
    let mut ds = DMatrix::zeros(n, 1);
    for i in 0..n {
        let x: Vec<f64> = (0..params.x_dim).map(|_| e.sample(&mut rng)).collect();
        let y = params.beta0 + dot(&params.beta_x, &x) + e.sample(&mut rng);
        let zp = params.gamma0 + dot(&params.gamma_x, &x) + params.gamma_y * y + e.sample(&mut rng);
        let delta = f64::from(u8::from(rng.gen::<f64>() < params.response_probability(&x, y)));
        design[(i, 0)] = 1.0;
        for (j, v) in x.iter().enumerate() {
            design[(i, j + 1)] = *v;
        }
        design[(i, k - 1)] = y;
        zs[(i, 0)] = zp;
        ds[(i, 0)] = delta;
    }
    let resid = |t: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let xtx = design.transpose() * &design;
        let coef = crate::linalg::lu_solve(&xtx, &(design.transpose() * t))?;
        Ok(t - &design * coef)
    };
    let (rz, rd) = (resid(&zs)?, resid(&ds)?);
    let denom = (rz.norm_squared() * rd.norm_squared()).sqrt();
    let corr = if denom > 0.0 { rz.dot(&rd) / denom } else { 0.0 };
    Ok((corr, 1.0 / (n as f64).sqrt()))
}

/// One of the three designs, as stored in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExampleParams {
    Proximal(ProximalParams),
    PolicyShift(PolicyShiftParams),
    Mnar(MnarParams),
}

impl ExampleParams {
    pub fn generate(&self, n: usize, seed: u64) -> Result<Generated> {
        match self {
            ExampleParams::Proximal(p) => gen_proximal(p, n, seed),
            ExampleParams::PolicyShift(p) => gen_policy_shift(p, n, seed),
            ExampleParams::Mnar(p) => gen_mnar_shadow(p, n, seed),
        }
    }

    /// Exact `h0` and a reference `g` for which `φ` is unbiased. The policy-shift
    /// reference `g` is zero, which reduces `φ` to the plug-in `m̃(o; h0)`.
    pub fn reference_nuisances(&self) -> Result<(Nuisance, Nuisance)> {
        match self {
            ExampleParams::Proximal(p) => proximal_nuisances(p),
            ExampleParams::PolicyShift(p) => {
                p.validate()?;
                let (sem, ld) = (p.sem.clone(), p.sem.l_dim);
                let h: Nuisance = Arc::new(move |w: &[f64], _x: f64| sem.h0(&w[..ld], w[ld], w[ld + 1]));
                let g: Nuisance = Arc::new(|_: &[f64], _: f64| 0.0);
                Ok((h, g))
            }
            ExampleParams::Mnar(p) => mnar_nuisances(p),
        }
    }

    pub fn oracle_theta(&self, method: OracleMethod) -> Result<OracleTheta> {
        match self {
            ExampleParams::Proximal(p) => oracle_theta_proximal(p, method),
            ExampleParams::PolicyShift(p) => oracle_theta_policy(p, method),
            ExampleParams::Mnar(p) => oracle_theta_mnar(p, method),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dml::linearity_defect;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let nodes = gauss_legendre(5, 0.0, 2.0);
        let integral: f64 = nodes.iter().map(|(x, w)| w * x.powi(9)).sum();
        assert!((integral - 2f64.powi(10) / 10.0).abs() < 1e-10);
    }

    #[test]
    fn tilted_inverse_cdf_hits_endpoints() {
        let t = Tilted { c: 1.0, d: 3.0 };
        for tau in [-0.6, 0.0, 0.6] {
            assert!((t.inverse_cdf(0.0, tau) - 1.0).abs() < 1e-12);
            assert!((t.inverse_cdf(1.0, tau) - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let p = ProximalParams::default();
        assert_eq!(gen_proximal(&p, 50, 4).unwrap().data, gen_proximal(&p, 50, 4).unwrap().data);
        let m = MnarParams::default();
        assert_eq!(gen_mnar_shadow(&m, 50, 4).unwrap().data, gen_mnar_shadow(&m, 50, 4).unwrap().data);
        let s = PolicyShiftParams::default();
        assert_eq!(gen_policy_shift(&s, 50, 4).unwrap().data, gen_policy_shift(&s, 50, 4).unwrap().data);
    }

    #[test]
    fn null_design_has_zero_target() {
        let p = ProximalParams { sem: Sem::null(), ..Default::default() };
        assert_eq!(oracle_theta_proximal(&p, OracleMethod::ClosedForm).unwrap().value, 0.0);
        let mc = oracle_theta_proximal(&p, OracleMethod::FullDataMc { draws: 20_000, seed: 1 }).unwrap();
        assert!(mc.value.abs() <= 1e-9);
    }

    #[test]
    fn closed_form_matches_monte_carlo() {
        for p in [
            ProximalParams { weight: ProximalWeight::TreatedMean, ..Default::default() },
            ProximalParams { treatment: Treatment::Continuous, weight: ProximalWeight::DoseAverage, ..Default::default() },
        ] {
            let cf = oracle_theta_proximal(&p, OracleMethod::ClosedForm).unwrap();
            let mc = oracle_theta_proximal(&p, OracleMethod::FullDataMc { draws: 200_000, seed: 2 }).unwrap();
            assert!((cf.value - mc.value).abs() <= 4.0 * mc.mc_se + 1e-12, "{} vs {} ± {}", cf.value, mc.value, mc.mc_se);
        }
    }

    #[test]
    fn outcome_bridge_solves_the_moment_equation() {
        for p in [ProximalParams::default(), ProximalParams { treatment: Treatment::Continuous, weight: ProximalWeight::DoseAverage, ..Default::default() }] {
            let g = gen_proximal(&p, 100_000, 3).unwrap();
            for (m, se) in proximal_bridge_residuals(&p, &g.data) {
                assert!(m.abs() <= 3.0 * se, "{m} vs {se}");
            }
        }
    }

    #[test]
    fn treated_mean_has_structural_zeros() {
        let p = ProximalParams { weight: ProximalWeight::TreatedMean, ..Default::default() };
        let g = gen_proximal(&p, 20, 1).unwrap();
        assert!(g.data.rows.iter().all(|o| g.spec.m_tilde_terms(o).iter().all(|t| t.x == 1.0)));
        assert_eq!(g.spec.x0_g(), X0Set::Values { values: vec![1.0] });
    }

    #[test]
    fn propensity_floor_is_enforced() {
        let mut p = ProximalParams::default();
        p.sem.alpha_u = 5.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn policy_parameters_are_checked() {
        let p = PolicyShiftParams { delta: 0.6, epsilon: 0.5, ..Default::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn q_maps_onto_the_shifted_interval() {
        let p = PolicyShiftParams::default();
        let grid: Vec<f64> = (0..=10_000).map(|k| p.c + (p.d - p.c) * k as f64 / 10_000.0).collect();
        let q: Vec<f64> = grid.iter().map(|a| p.q(*a)).collect();
        assert!(q.iter().all(|v| *v >= p.c + p.delta - 1e-12 && *v <= p.d + 1e-12));
        assert!(q.windows(2).all(|w| w[1] > w[0]));
        assert!((q[0] - (p.c + p.delta)).abs() < 1e-12 && (q[10_000] - p.d).abs() < 1e-12);
        for a in &grid {
            let (back, _) = p.q_inverse(p.q(*a));
            assert!((back - a).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_policy_targets_the_outcome_mean() {
        let p = PolicyShiftParams { delta: 0.0, epsilon: 1e-6, ..Default::default() };
        let g = gen_policy_shift(&p, 1000, 5).unwrap();
        assert!(g.data.rows.iter().all(|o| (p.q(o.x) - o.x).abs() < 1e-15));
        let t = oracle_theta_policy(&p, OracleMethod::FullDataMc { draws: 100_000, seed: 6 }).unwrap();
        let big = gen_policy_shift(&p, 100_000, 7).unwrap();
        let y: Vec<f64> = big.data.rows.iter().map(|o| o.s).collect();
        let ybar = mean_se(&y);
        assert!((t.value - ybar.value).abs() <= 4.0 * (t.mc_se + ybar.mc_se));
    }

    #[test]
    fn positive_shift_raises_the_target() {
        let p = PolicyShiftParams::default();
        let mc = OracleMethod::FullDataMc { draws: 200_000, seed: 7 };
        let shifted = oracle_theta_policy(&p, mc).unwrap();
        let base = oracle_theta_policy(&PolicyShiftParams { delta: 0.0, ..p.clone() }, mc).unwrap();
        assert!(shifted.value > base.value);
        assert!(oracle_theta_policy(&p, OracleMethod::ClosedForm).is_err());
    }

    #[test]
    fn moment_maps_are_linear() {
        let p = PolicyShiftParams::default();
        let g = gen_policy_shift(&p, 10, 8).unwrap();
        let f = |v: &[f64], _x: f64| v.iter().map(|t| t.sin()).sum::<f64>();
        let h = |v: &[f64], _x: f64| v.iter().map(|t| t * t).sum::<f64>();
        for o in &g.data.rows {
            assert!(linearity_defect(&*g.spec, o, &f, &h, 2.0, -3.0) < 1e-12);
        }
    }

    #[test]
    fn m_bound_holds() {
        let p = PolicyShiftParams::default();
        let r = verify_m_bound(&p, 4000, 100, 9).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.bound <= p.rho_tilde_bound().sqrt() + 1e-9);
    }

    #[test]
    fn off_x0_bins_get_no_mass() {
        let p = PolicyShiftParams::default();
        let g = gen_policy_shift(&p, 5000, 10).unwrap();
        let lo = p.c + p.delta;
        for k in 0..4 {
            let (a, b) = (p.c + lo * k as f64 / 4.0, p.c + lo * (k + 1) as f64 / 4.0);
            let mass = g.data.mean(|o| g.spec.m_tilde(o, &|_, x| f64::from(u8::from(x >= a && x < b))));
            assert_eq!(mass, 0.0);
        }
    }

    #[test]
    fn complete_data_has_zero_target() {
        let p = MnarParams { alpha0: f64::INFINITY, ..Default::default() };
        let g = gen_mnar_shadow(&p, 200, 1).unwrap();
        assert!(g.data.rows.iter().all(|o| o.r == 1.0));
        assert!(g.data.rows.iter().all(|o| g.spec.m(o, &|_, _| 1.0) == 0.0));
        assert_eq!(oracle_theta_mnar(&p, OracleMethod::FullDataMc { draws: 1000, seed: 1 }).unwrap().value, 0.0);
    }

    #[test]
    fn shadow_variable_is_conditionally_independent() {
        let (corr, se) = mnar_shadow_probe(&MnarParams::default(), 100_000, 11).unwrap();
        assert!(corr.abs() <= 3.0 * se, "{corr} vs {se}");
    }

    #[test]
    fn mnar_nuisances_reproduce_the_target() {
        let p = MnarParams::default();
        let g = gen_mnar_shadow(&p, 200_000, 12).unwrap();
        let (h, gg) = mnar_nuisances(&p).unwrap();
        let psi: Vec<f64> = g.data.rows.iter().map(|o| g.spec.m_tilde(o, &*h)).collect();
        let phi: Vec<f64> = g.data.rows.iter().map(|o| g.spec.m(o, &*gg)).collect();
        let t = oracle_theta_mnar(&p, OracleMethod::FullDataMc { draws: 200_000, seed: 13 }).unwrap();
        for v in [mean_se(&psi), mean_se(&phi)] {
            assert!((v.value - t.value).abs() <= 4.0 * (v.mc_se + t.mc_se), "{} vs {}", v.value, t.value);
        }
    }

    #[test]
    fn missingness_floor_is_enforced() {
        let p = MnarParams { alpha0: -6.0, ..Default::default() };
        assert!(p.validate().is_err());
    }
}
