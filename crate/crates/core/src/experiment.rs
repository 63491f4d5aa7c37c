//! Experiment configuration, the replication runner, rate fits and theory envelopes.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dgps::{ExampleParams, MnarParams, PolicyShiftParams, ProximalParams};
use crate::dml::{tune_lambdas, MomentSpec, Nuisance, TuningConstants};
use crate::error::{invalid, KrasError, Result};
use crate::estimators::{fit, EstimatorConfig, FittedNuisance, Method};
use crate::kernels::{critical_radius, KernelSpec};
use crate::workbench::{build_dml_workbench, exact_errors, random_dgp, spectral_dgp, DiscreteDGP, DmlWorkbench, RandomDgpConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Workbench,
    Proximal,
    PolicyShift,
    Mnar,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Workbench => "workbench",
            Scenario::Proximal => "proximal",
            Scenario::PolicyShift => "policy_shift",
            Scenario::Mnar => "mnar",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawKind {
    /// Prescribed spectrum of the transformed operator (see [`spectral_dgp`]).
    Spectral,
    /// Random pmf and weights (see [`random_dgp`]).
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkbenchSection {
    pub law: LawKind,
    /// Number of W-states and of Z-states.
    pub states: usize,
    /// Spectral range of the spectral law, in decades of `σ²`.
    pub decades: f64,
    /// X-values of the random law.
    pub n_x: usize,
    /// X₀ of the h-equation as a mask over X-values; everything when absent.
    pub x0_mask: Option<Vec<bool>>,
    pub noise_halfwidth: f64,
    pub law_seed: u64,
}

impl Default for WorkbenchSection {
    fn default() -> Self {
        WorkbenchSection { law: LawKind::Spectral, states: 20, decades: 6.0, n_x: 1, x0_mask: None, noise_halfwidth: 1.0, law_seed: 1 }
    }
}

impl WorkbenchSection {
    pub fn law(&self, kernel_h: &KernelSpec) -> Result<DiscreteDGP> {
        let dgp = match self.law {
            LawKind::Spectral => spectral_dgp(self.states, self.decades, kernel_h, self.law_seed)?,
            LawKind::Random => {
                let cfg = RandomDgpConfig { n_w: self.states, n_z: self.states, n_x: self.n_x, r_low: 0.5, r_high: 1.5, random_x0: false };
                random_dgp(&cfg, self.law_seed)?
            }
        };
        match &self.x0_mask {
            Some(mask) => dgp.with_x0_mask(mask.clone()),
            None => Ok(dgp),
        }
    }

    /// Both nuisance equations with β-source conditions on the configured law.
    pub fn build(&self, kernel_h: &KernelSpec, kernel_g: &KernelSpec, beta: f64) -> Result<DmlWorkbench> {
        let dgp = self.law(kernel_h)?;
        let all = vec![true; dgp.x_values.len()];
        build_dml_workbench(&dgp, kernel_h, kernel_g, beta, all, self.noise_halfwidth, self.law_seed.wrapping_add(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateSection {
    pub betas: Vec<f64>,
    pub tolerance: f64,
}

impl Default for RateSection {
    fn default() -> Self {
        RateSection { betas: vec![0.5, 1.0, 3.0], tolerance: 0.15 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasSection {
    pub betas: Vec<f64>,
    pub states: usize,
    pub decades: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub points: usize,
    pub tolerance: f64,
    pub min_r_squared: f64,
    pub law_seed: u64,
}

impl Default for BiasSection {
    fn default() -> Self {
        BiasSection {
            betas: vec![0.5, 1.0, 1.5, 3.0],
            states: 60,
            decades: 12.0,
            lambda_min: 1e-9,
            lambda_max: 1e-5,
            points: 25,
            tolerance: 0.10,
            min_r_squared: 0.98,
            law_seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceSource {
    /// Exact `h0` and a reference `g` known to the generator.
    Oracle,
    /// Cross-fitted estimates from the first configured method.
    Fitted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmlSection {
    pub n: usize,
    pub folds: usize,
    pub replications: usize,
    pub nuisances: NuisanceSource,
    pub coverage_low: f64,
    pub coverage_high: f64,
    /// Fitted nuisances pass when `|mean θ̂ - θ| ≤ bias_multiple · mean se`.
    pub bias_multiple: f64,
    /// Draws for Monte Carlo targets.
    pub oracle_draws: usize,
}

impl Default for DmlSection {
    fn default() -> Self {
        DmlSection {
            n: 1000,
            folds: 5,
            replications: 500,
            nuisances: NuisanceSource::Oracle,
            coverage_low: 0.92,
            coverage_high: 0.97,
            bias_multiple: 2.0,
            oracle_draws: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub instances: usize,
    pub max_states: usize,
    pub h_draws: usize,
    pub tolerance: f64,
    pub max_tolerance: f64,
    /// Sample size of the structural-zero and norm-constraint fits.
    pub fit_n: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection { instances: 50, max_states: 50, h_draws: 20, tolerance: 1e-10, max_tolerance: 1e-9, fit_n: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    /// Datasets for the closed-form versus oracle check.
    pub oracle_datasets: usize,
    pub oracle_n: usize,
    /// Paired datasets for the conditioning contrast.
    pub condition_pairs: usize,
    pub condition_n: usize,
    /// Share of pairs in which LRAS must be worse conditioned.
    pub condition_share: f64,
    /// Sample size and replications of the three-method table.
    pub n: usize,
    pub replications: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection { oracle_datasets: 20, oracle_n: 30, condition_pairs: 50, condition_n: 100, condition_share: 0.9, n: 1000, replications: 20 }
    }
}

/// A complete experiment description, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default = "default_n_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "one_usize")]
    pub replications: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "one")]
    pub beta: f64,
    pub kernel_h: KernelSpec,
    pub kernel_g: KernelSpec,
    #[serde(default)]
    pub tuning: TuningConstants,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_ridge")]
    pub ridge_floor: f64,
    #[serde(default)]
    pub norm_bound: Option<f64>,
    /// Size of the evaluation sample for Monte Carlo errors in continuous scenarios.
    #[serde(default = "default_eval")]
    pub eval_size: usize,
    #[serde(default)]
    pub workbench: WorkbenchSection,
    #[serde(default)]
    pub example: Option<ExampleParams>,
    #[serde(default)]
    pub rates: RateSection,
    #[serde(default)]
    pub bias: BiasSection,
    #[serde(default)]
    pub dml: DmlSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub compare: CompareSection,
}

fn default_n_grid() -> Vec<usize> {
    vec![250, 500, 1000, 2000, 4000]
}
fn one_usize() -> usize {
    1
}
fn one() -> f64 {
    1.0
}
fn default_methods() -> Vec<Method> {
    vec![Method::Kras]
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_ridge() -> f64 {
    1e-10
}
fn default_eval() -> usize {
    2000
}

impl ExperimentConfig {
    /// A workbench experiment with Gaussian kernels of the given bandwidth and default sections.
    pub fn workbench(bandwidth: f64) -> Self {
        ExperimentConfig {
            scenario: Scenario::Workbench,
            n_grid: default_n_grid(),
            replications: 1,
            methods: default_methods(),
            beta: 1.0,
            kernel_h: KernelSpec::gaussian(bandwidth),
            kernel_g: KernelSpec::gaussian(bandwidth),
            tuning: TuningConstants::default(),
            seed: 0,
            out: default_out(),
            ridge_floor: default_ridge(),
            norm_bound: None,
            eval_size: default_eval(),
            workbench: WorkbenchSection::default(),
            example: None,
            rates: RateSection::default(),
            bias: BiasSection::default(),
            dml: DmlSection::default(),
            verify: VerifySection::default(),
            compare: CompareSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| KrasError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KrasError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(KrasError::Config(m));
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[1] <= w[0]) {
            return cfg_err("n_grid must be non-empty and strictly increasing".into());
        }
        if self.replications == 0 {
            return cfg_err("replications must be at least 1".into());
        }
        if self.methods.is_empty() {
            return cfg_err("at least one method is required".into());
        }
        if !(self.beta > 0.0) {
            return cfg_err(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.ridge_floor >= 0.0) {
            return cfg_err("ridge_floor must be nonnegative".into());
        }
        self.kernel_h.validate()?;
        self.kernel_g.validate()?;
        if let Some(ex) = &self.example {
            let kind = match ex {
                ExampleParams::Proximal(_) => Scenario::Proximal,
                ExampleParams::PolicyShift(_) => Scenario::PolicyShift,
                ExampleParams::Mnar(_) => Scenario::Mnar,
            };
            if kind != self.scenario {
                return cfg_err(format!("[example] describes {} but scenario is {}", kind.name(), self.scenario.name()));
            }
        }
        if self.dml.folds < 2 || self.dml.replications == 0 {
            return cfg_err("dml needs at least 2 folds and 1 replication".into());
        }
        Ok(())
    }

    /// Generator parameters of a continuous scenario; defaults when `[example]` is absent.
    pub fn example_params(&self) -> Option<ExampleParams> {
        match (&self.example, self.scenario) {
            (Some(e), _) => Some(e.clone()),
            (None, Scenario::Workbench) => None,
            (None, Scenario::Proximal) => Some(ExampleParams::Proximal(ProximalParams::default())),
            (None, Scenario::PolicyShift) => Some(ExampleParams::PolicyShift(PolicyShiftParams::default())),
            (None, Scenario::Mnar) => Some(ExampleParams::Mnar(MnarParams::default())),
        }
    }

    pub fn estimator(&self, method: Method, lambda_h: f64, lambda_g: f64) -> EstimatorConfig {
        let mut e = EstimatorConfig::new(method, lambda_h, lambda_g, self.kernel_h.clone(), self.kernel_g.clone());
        e.c = self.tuning.c;
        e.ridge_floor = self.ridge_floor;
        e.norm_bound = self.norm_bound;
        e
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one `(n, replication)` cell; independent of every other cell.
pub fn cell_seed(seed: u64, n_index: usize, replication: usize) -> u64 {
    splitmix64(seed ^ splitmix64(((n_index as u64) << 32) | replication as u64))
}

/// One fitted method on one replication.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicationRow {
    pub scenario: String,
    pub beta: f64,
    pub method: Method,
    pub n: usize,
    pub n_index: usize,
    pub replication: usize,
    pub seed: u64,
    pub delta_n: f64,
    pub lambda_h: f64,
    pub lambda_g: f64,
    pub rmse: f64,
    /// NaN where no exact conditional expectation is available.
    pub weak_error: f64,
    pub rkhs_norm: f64,
    pub objective: f64,
    pub inner_condition: Option<f64>,
    pub outer_condition: f64,
    /// Empty on success.
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ReplicationTable {
    pub rows: Vec<ReplicationRow>,
    pub failures: usize,
}

impl ReplicationTable {
    pub fn extend(&mut self, other: ReplicationTable) {
        self.rows.extend(other.rows);
        self.failures += other.failures;
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut wtr = csv::Writer::from_path(path)?;
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Truth and evaluation rule of one scenario.
enum Truth {
    Workbench(Box<DmlWorkbench>),
    Continuous { params: ExampleParams, h0: Nuisance },
}

impl Truth {
    fn new(config: &ExperimentConfig, beta: f64) -> Result<Truth> {
        match config.example_params() {
            None => Ok(Truth::Workbench(Box::new(config.workbench.build(&config.kernel_h, &config.kernel_g, beta)?))),
            Some(params) => {
                let (h0, _) = params.reference_nuisances()?;
                Ok(Truth::Continuous { params, h0 })
            }
        }
    }

    fn sample(&self, n: usize, seed: u64) -> Result<(Dataset, std::sync::Arc<dyn MomentSpec>)> {
        match self {
            Truth::Workbench(wb) => Ok((wb.dgp.sample(n, seed)?, std::sync::Arc::new(wb.moments.clone()))),
            Truth::Continuous { params, .. } => {
                let g = params.generate(n, seed)?;
                Ok((g.data, g.spec))
            }
        }
    }

    /// Share of the mass on X₀ when it is a proper subset.
    fn mu0(&self, data: &Dataset, spec: &dyn MomentSpec) -> Option<f64> {
        let mu = match self {
            Truth::Workbench(wb) => wb.dgp.p_w().dot(&wb.dgp.i0_w()),
            Truth::Continuous { .. } => data.mean(|o| spec.x0_h().indicator(o.x)),
        };
        (mu < 1.0 - 1e-12).then_some(mu)
    }

    /// `(rmse, weak error)` of a fit.
    fn errors(&self, f: &FittedNuisance, eval: Option<&(Dataset, std::sync::Arc<dyn MomentSpec>)>) -> Result<(f64, f64)> {
        match self {
            Truth::Workbench(wb) => {
                let dgp = &wb.dgp;
                let h = DVector::from_iterator(dgp.nw(), dgp.w_support.iter().map(|s| f.predict(&s.point, dgp.x_values[s.x])));
                let e = exact_errors(&wb.h_problem, &h)?;
                Ok((e.rmse, e.weak_error))
            }
            Truth::Continuous { h0, .. } => {
                let (data, spec) = eval.expect("continuous scenarios carry an evaluation sample");
                let x0 = spec.x0_h();
                let mse = data.mean(|o| spec.r(o) * x0.indicator(o.x) * (f.predict(&o.w, o.x) - h0(&o.w, o.x)).powi(2));
                Ok((mse.max(0.0).sqrt(), f64::NAN))
            }
        }
    }
}

const EVAL_STREAM: u64 = 0xe7a1_5eed;

/// Monte Carlo table over `n_grid × replications` at `config.beta`, one row per method.
///
/// Cells run in parallel on the current rayon pool and are gathered in cell order, so the
/// table does not depend on the number of threads.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ReplicationTable> {
    run_experiment_at(config, config.beta)
}

pub fn run_experiment_at(config: &ExperimentConfig, beta: f64) -> Result<ReplicationTable> {
    config.validate()?;
    let truth = Truth::new(config, beta)?;
    let cells: Vec<(usize, usize)> = (0..config.n_grid.len()).flat_map(|i| (0..config.replications).map(move |r| (i, r))).collect();
    let results: Vec<Vec<ReplicationRow>> = cells.par_iter().map(|&(i, r)| run_cell(config, &truth, beta, i, r)).collect();
    let rows: Vec<ReplicationRow> = results.into_iter().flatten().collect();
    let failures = rows.iter().filter(|r| !r.error.is_empty()).count();
    Ok(ReplicationTable { rows, failures })
}

fn run_cell(config: &ExperimentConfig, truth: &Truth, beta: f64, n_index: usize, rep: usize) -> Vec<ReplicationRow> {
    let n = config.n_grid[n_index];
    let seed = cell_seed(config.seed, n_index, rep);
    let blank = |method: Method| ReplicationRow {
        scenario: config.scenario.name().to_string(),
        beta,
        method,
        n,
        n_index,
        replication: rep,
        seed,
        delta_n: f64::NAN,
        lambda_h: f64::NAN,
        lambda_g: f64::NAN,
        rmse: f64::NAN,
        weak_error: f64::NAN,
        rkhs_norm: f64::NAN,
        objective: f64::NAN,
        inner_condition: None,
        outer_condition: f64::NAN,
        error: String::new(),
    };
    let fail = |e: KrasError| -> Vec<ReplicationRow> {
        config.methods.iter().map(|m| ReplicationRow { error: format!("n={n} replication={rep}: {e}"), ..blank(*m) }).collect()
    };
    let (data, spec) = match truth.sample(n, seed) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let eval = match truth {
        Truth::Continuous { params, .. } => match params.generate(config.eval_size, seed ^ EVAL_STREAM) {
            Ok(g) => Some((g.data, g.spec)),
            Err(e) => return fail(e),
        },
        Truth::Workbench(_) => None,
    };
    let tuned = critical_radius(&config.kernel_h, n, truth.mu0(&data, &*spec)).and_then(|d| Ok((d, tune_lambdas(d, beta, &config.tuning)?)));
    let (delta, (lh, lg)) = match tuned {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    config
        .methods
        .iter()
        .map(|&m| {
            let mut row = ReplicationRow { delta_n: delta, lambda_h: lh, lambda_g: lg, ..blank(m) };
            let res = fit(&data, &*spec, &config.estimator(m, lh, lg)).and_then(|f| Ok((truth.errors(&f, eval.as_ref())?, f)));
            match res {
                Ok(((rmse, weak), f)) => {
                    row.rmse = rmse;
                    row.weak_error = weak;
                    row.rkhs_norm = f.rkhs_norm();
                    row.objective = f.diagnostics.objective;
                    row.inner_condition = f.diagnostics.inner_condition;
                    row.outer_condition = f.diagnostics.outer_condition;
                }
                Err(e) => row.error = format!("n={n} replication={rep} method={m}: {e}"),
            }
            row
        })
        .collect()
}

/// Least-squares fit of `log y = intercept + slope · log x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PowerLaw {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLaw> {
    if points.iter().any(|(x, y)| !(*x > 0.0) || !(*y > 0.0)) {
        return invalid("power-law fits need positive x and y");
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return invalid(format!("degenerate x range: {} distinct values, need at least 3", xs.len()));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(PowerLaw { slope, intercept: my - slope * mx, r_squared })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorColumn {
    Rmse,
    WeakError,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateAxis {
    N,
    DeltaN,
}

/// Predicted exponent of the mean error against the axis under the tuning rule.
///
/// Against `δ_n`: RMSE `min(β,1)/(1+min(β,1))`, weak error `1`. Against `n` the
/// exponents are halved and negated, ignoring the logarithm in `δ_n`.
pub fn target_exponent(column: ErrorColumn, axis: RateAxis, beta: f64) -> f64 {
    let b = beta.min(1.0);
    let e = match column {
        ErrorColumn::Rmse => b / (1.0 + b),
        ErrorColumn::WeakError => 1.0,
    };
    match axis {
        RateAxis::DeltaN => e,
        RateAxis::N => -e / 2.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RatePoint {
    pub n: usize,
    pub x: f64,
    pub mean: f64,
    /// Monte Carlo standard error of the mean.
    pub se: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateReport {
    pub method: Method,
    pub beta: f64,
    pub column: ErrorColumn,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub target_exponent: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub points: Vec<RatePoint>,
}

/// Minimum `r²` for a rate fit to pass.
pub const RATE_MIN_R2: f64 = 0.9;

/// Slope of log mean error on log `x` for one method and β, over successful rows.
pub fn fit_rate(table: &ReplicationTable, method: Method, beta: f64, column: ErrorColumn, axis: RateAxis, tolerance: f64) -> Result<RateReport> {
    let mut ns: Vec<usize> = table.rows.iter().filter(|r| r.method == method && r.beta == beta).map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut points = Vec::new();
    for n in ns {
        let sel: Vec<&ReplicationRow> =
            table.rows.iter().filter(|r| r.method == method && r.beta == beta && r.n == n && r.error.is_empty()).collect();
        let vals: Vec<f64> = sel
            .iter()
            .map(|r| match column {
                ErrorColumn::Rmse => r.rmse,
                ErrorColumn::WeakError => r.weak_error,
            })
            .filter(|v| v.is_finite())
            .collect();
        if vals.is_empty() {
            continue;
        }
        let k = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / k;
        let var = if vals.len() > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) } else { 0.0 };
        let x = match axis {
            RateAxis::N => n as f64,
            RateAxis::DeltaN => sel[0].delta_n,
        };
        points.push(RatePoint { n, x, mean, se: (var / k).sqrt(), count: vals.len() });
    }
    let pl = fit_power_law(&points.iter().map(|p| (p.x, p.mean)).collect::<Vec<_>>())?;
    let target = target_exponent(column, axis, beta);
    Ok(RateReport {
        method,
        beta,
        column,
        slope: pl.slope,
        intercept: pl.intercept,
        r_squared: pl.r_squared,
        target_exponent: target,
        tolerance,
        pass: (pl.slope - target).abs() <= tolerance && pl.r_squared >= RATE_MIN_R2,
        points,
    })
}

/// Bound shapes up to universal constants and the probability level of the bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Envelope {
    /// `δ²/λ_H + λ_G/λ_H + λ_H^{min(β,1)}`, the squared-RMSE shape.
    pub rmse_bound_shape: f64,
    /// `δ² + λ_G + λ_H^{min(β+1,2)}`, the squared weak-error shape.
    pub weak_bound_shape: f64,
    /// May be negative, in which case the bound is vacuous.
    pub kappa: f64,
    /// Whether `δ_n² ≥ log(log n)/n`, the regime in which `κ → 1`.
    pub loglog_regime: bool,
}

pub fn kappa_c1(b: f64) -> f64 {
    1.0 / (8.0 * b * b * (1.0 + 17.0 * std::f64::consts::E))
}

pub fn theory_envelope(delta_n: f64, lambda_h: f64, lambda_g: f64, beta: f64, b: f64, n: usize) -> Result<Envelope> {
    if ![delta_n, lambda_h, beta, b].iter().all(|v| *v > 0.0) || !(lambda_g >= 0.0) || n == 0 {
        return invalid("envelope inputs must be positive");
    }
    let d2 = delta_n * delta_n;
    let rmse_bound_shape = d2 / lambda_h + lambda_g / lambda_h + lambda_h.powf(beta.min(1.0));
    let weak_bound_shape = d2 + lambda_g + lambda_h.powf((beta + 1.0).min(2.0));
    let steps = if delta_n < 5.0 * b / 6.0 { ((b / delta_n).ln() / 1.2f64.ln()).floor() } else { 0.0 };
    let nf = n as f64;
    let kappa = 1.0 - (36.0 + 18.0 * steps) * (-kappa_c1(b) * nf * d2).exp();
    let loglog_regime = nf > std::f64::consts::E && d2 >= nf.ln().ln() / nf;
    Ok(Envelope { rmse_bound_shape, weak_bound_shape, kappa, loglog_regime })
}

/// One outcome of a suite, printed as a pass/fail line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, threshold: impl Into<String>, pass: bool) -> Self {
        Check { name: name.into(), value, threshold: threshold.into(), pass }
    }

    /// `value ≤ limit`.
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check::new(name, value, format!("<= {limit:e}"), value <= limit)
    }

    pub fn line(&self) -> String {
        format!("{} {:<48} value={:<14.6e} threshold {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.value, self.threshold)
    }
}

/// A long-format plotting record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlotRow {
    pub figure: String,
    pub series: String,
    pub beta: f64,
    pub x: f64,
    pub y: f64,
}

/// Output of one subcommand: checks plus named CSV tables.
#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub checks: Vec<Check>,
    pub tables: Vec<(String, Vec<u8>)>,
    pub plot: Vec<PlotRow>,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn add_table<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        for r in rows {
            wtr.serialize(r)?;
        }
        let bytes = wtr.into_inner().map_err(|e| KrasError::Io(e.into_error()))?;
        self.tables.push((name.to_string(), bytes));
        Ok(())
    }

    /// Writes every table (and the plot data when asked) into `dir`, with the checks as `checks.csv`.
    pub fn write(&self, dir: &Path, emit_plotdata: bool) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, bytes) in &self.tables {
            let p = dir.join(name);
            fs::write(&p, bytes)?;
            written.push(p);
        }
        let p = dir.join("checks.csv");
        write_rows(&p, &self.checks)?;
        written.push(p);
        if emit_plotdata {
            let p = dir.join("plotdata.csv");
            write_rows(&p, &self.plot)?;
            written.push(p);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law_is_recovered() {
        let pts: Vec<(f64, f64)> = [0.4, 0.2, 0.1, 0.05].iter().map(|d: &f64| (*d, 3.0 * d.powf(0.5))).collect();
        let pl = fit_power_law(&pts).unwrap();
        assert!((pl.slope - 0.5).abs() < 1e-12);
        assert!((pl.r_squared - 1.0).abs() < 1e-12);
        assert!((pl.intercept - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_x_range_is_rejected() {
        assert!(fit_power_law(&[(1.0, 1.0), (1.0, 2.0), (2.0, 3.0)]).is_err());
    }

    #[test]
    fn targets() {
        assert_eq!(target_exponent(ErrorColumn::Rmse, RateAxis::DeltaN, 1.0), 0.5);
        assert_eq!(target_exponent(ErrorColumn::Rmse, RateAxis::DeltaN, 3.0), 0.5);
        assert!((target_exponent(ErrorColumn::Rmse, RateAxis::DeltaN, 0.5) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(target_exponent(ErrorColumn::WeakError, RateAxis::DeltaN, 0.5), 1.0);
    }

    #[test]
    fn kappa_small_n_is_vacuous() {
        let c1 = kappa_c1(1.0);
        assert!((c1 - 2.648e-3).abs() < 1e-6);
        let e = theory_envelope(0.5, 0.1, 0.0, 1.0, 1.0, 100).unwrap();
        let expected = 1.0 - 90.0 * (-c1 * 100.0 * 0.25f64).exp();
        assert!((e.kappa - expected).abs() < 1e-12);
        assert!(e.kappa < 0.0);
    }

    #[test]
    fn envelope_limits() {
        let e = theory_envelope(1e-9, 0.2, 0.0, 0.5, 1.0, 10).unwrap();
        assert!((e.rmse_bound_shape - 0.2f64.powf(0.5)).abs() < 1e-12);
        let d = 0.01;
        let e = theory_envelope(d, d, d * d, 1.0, 1.0, 10).unwrap();
        assert!((e.rmse_bound_shape / d - 3.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_grows_with_n() {
        let k: Vec<f64> = [100, 1000, 10_000, 100_000].iter().map(|&n| theory_envelope(0.3, 0.1, 0.01, 1.0, 1.0, n).unwrap().kappa).collect();
        assert!(k.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn cell_seeds_differ() {
        let s: Vec<u64> = (0..3).flat_map(|i| (0..100).map(move |r| cell_seed(7, i, r))).collect();
        let mut u = s.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), s.len());
    }

    #[test]
    fn config_parses_and_validates() {
        let text = r#"
            scenario = "workbench"
            n_grid = [100, 200, 400]
            replications = 2
            methods = ["KRAS", "kmmr"]
            [kernel_h]
            family = "gaussian"
            bandwidth = 0.3
            [kernel_g]
            family = "gaussian"
            bandwidth = 0.3
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.methods, vec![Method::Kras, Method::Kmmr]);
        assert!(ExperimentConfig::from_toml(&text.replace("[100, 200, 400]", "[200, 100, 400]")).is_err());
        assert!(ExperimentConfig::from_toml(&text.replace("replications = 2", "replications = 0")).is_err());
        assert!(ExperimentConfig::from_toml(&text.replace("scenario", "scenery")).is_err());
    }

    #[test]
    fn single_cell_gives_one_row_per_method() {
        let mut cfg = ExperimentConfig::workbench(0.3);
        cfg.n_grid = vec![300];
        cfg.methods = vec![Method::Kras, Method::Kmmr, Method::Lras];
        let t = run_experiment(&cfg).unwrap();
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.failures, 0);
        assert_eq!(run_experiment(&cfg).unwrap(), t);
    }

    #[test]
    fn continuous_scenario_reports_rmse_only() {
        let mut cfg = ExperimentConfig::workbench(1.0);
        cfg.scenario = Scenario::Proximal;
        cfg.n_grid = vec![80];
        cfg.eval_size = 200;
        let t = run_experiment(&cfg).unwrap();
        assert_eq!(t.failures, 0, "{:?}", t.rows);
        assert!(t.rows[0].rmse.is_finite() && t.rows[0].weak_error.is_nan());
    }
}
