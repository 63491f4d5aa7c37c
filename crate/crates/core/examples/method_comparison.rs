//! KRAS, LRAS and KMMR on one workbench sample: exact errors, conditioning and the nested oracle.

use kras::dml::{tune_lambdas, TuningConstants};
use kras::estimators::{fit, nested_oracle, EstimatorConfig, Method, OracleSettings};
use kras::kernels::{critical_radius, KernelSpec};
use kras::workbench::{build_dml_workbench, exact_errors, spectral_dgp};
use nalgebra::DVector;

fn main() -> kras::Result<()> {
    let kernel = KernelSpec::gaussian(0.3);
    let dgp = spectral_dgp(20, 6.0, &kernel, 1)?;
    let wb = build_dml_workbench(&dgp, &kernel, &kernel, 1.0, vec![true], 1.0, 2)?;
    let n = 1000;
    let data = wb.dgp.sample(n, 17)?;
    let delta = critical_radius(&kernel, n, None)?;
    let (lh, lg) = tune_lambdas(delta, 1.0, &TuningConstants { c_h: 0.01, ..Default::default() })?;
    println!("n={n} delta_n={delta:.4} lambda_h={lh:.3e} lambda_g={lg:.3e}");
    for m in Method::ALL {
        let cfg = EstimatorConfig::new(m, lh, lg, kernel.clone(), kernel.clone());
        let f = fit(&data, &wb.moments, &cfg)?;
        let h = DVector::from_iterator(wb.dgp.nw(), wb.dgp.w_points().iter().map(|p| f.predict(p, 0.0)));
        let e = exact_errors(&wb.h_problem, &h)?;
        let d = &f.diagnostics;
        println!(
            "{m}: rmse {:.4} weak {:.5} inner cond {:>10} outer cond {:.2}",
            e.rmse,
            e.weak_error,
            d.inner_condition.map_or("-".to_string(), |c| format!("{c:.2}")),
            d.outer_condition
        );
    }

    // The closed forms solve the same saddle point that gradient-based nesting reaches.
    let small = wb.dgp.sample(30, 18)?;
    for m in Method::ALL {
        let cfg = EstimatorConfig::new(m, 0.05, 0.01, kernel.clone(), kernel.clone());
        let cf = fit(&small, &wb.moments, &cfg)?;
        let or = nested_oracle(&small, &wb.moments, &cfg, &OracleSettings::default())?;
        println!("{m}: closed-form objective {:.10} oracle {:.10}", cf.diagnostics.objective, or.diagnostics.objective);
    }
    Ok(())
}
