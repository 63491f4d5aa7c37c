//! Cross-fitted average treatment effect under negative-control proxies with KRAS nuisances.

use kras::dgps::{gen_proximal, oracle_theta_proximal, OracleMethod, ProximalParams};
use kras::dml::{crossfit, tune_lambdas, TuningConstants};
use kras::estimators::{g_fitter, h_fitter, EstimatorConfig, Method};
use kras::kernels::{critical_radius, KernelSpec};

fn main() -> kras::Result<()> {
    let params = ProximalParams::default();
    let truth = oracle_theta_proximal(&params, OracleMethod::ClosedForm)?.value;
    let n = 500;
    let generated = gen_proximal(&params, n, 21)?;
    // Points are (l, a, proxy), three coordinates with the default single covariate.
    let kernel = KernelSpec::gaussian(1.0).with_dimension(3);
    let delta = critical_radius(&kernel, n - n / 5, None)?;
    // With c_H = 1 the penalty sits near delta_n and shrinks both nuisances toward zero at this n.
    let (lh, lg) = tune_lambdas(delta, 1.0, &TuningConstants { c_h: 0.01, c_g: 0.1, ..Default::default() })?;
    let cfg = EstimatorConfig::new(Method::Kras, lh, lg, kernel.clone(), kernel);
    let fh = h_fitter(cfg.clone(), generated.spec.clone());
    let fg = g_fitter(cfg, generated.spec.clone());
    let r = crossfit(&generated.data, 5, 21, &fh, &fg, &*generated.spec)?;
    println!("true ATE {truth:.4}");
    println!("theta_hat {:.4} (se {:.4}), 95% CI [{:.4}, {:.4}]", r.theta_hat, r.se, r.ci_low, r.ci_high);
    println!("fold estimates {:?}", r.fold_estimates.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    Ok(())
}
