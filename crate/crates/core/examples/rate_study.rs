//! A reduced Monte Carlo rate study: error slopes against the critical radius.

use kras::experiment::{fit_rate, run_experiment_at, ErrorColumn, ExperimentConfig, RateAxis};
use kras::estimators::Method;

fn main() -> kras::Result<()> {
    let mut cfg = ExperimentConfig::workbench(0.3);
    cfg.replications = 40;
    cfg.seed = 5;
    cfg.tuning.c_h = 0.01;
    for beta in [0.5, 1.0] {
        let table = run_experiment_at(&cfg, beta)?;
        for column in [ErrorColumn::Rmse, ErrorColumn::WeakError] {
            let r = fit_rate(&table, Method::Kras, beta, column, RateAxis::DeltaN, 0.15)?;
            println!(
                "beta={beta} {column:?}: slope {:.3} (target {:.3}, r2 {:.3}) {}",
                r.slope,
                r.target_exponent,
                r.r_squared,
                if r.pass { "ok" } else { "off" }
            );
            for p in &r.points {
                println!("    n={:5} delta_n={:.4} mean={:.5}", p.n, p.x, p.mean);
            }
        }
    }
    Ok(())
}
