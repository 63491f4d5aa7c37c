//! Tuning schedule, bound shapes and the probability level kappa along a grid of n.

use kras::dml::{tune_lambdas, TuningConstants};
use kras::experiment::{kappa_c1, theory_envelope};
use kras::kernels::{critical_radius, KernelSpec};

fn main() -> kras::Result<()> {
    let kernel = KernelSpec::gaussian(1.0);
    println!("c1(b=1) = {:.4e}", kappa_c1(1.0));
    println!("{:>7} {:>8} {:>10} {:>10} {:>11} {:>11} {:>9}", "n", "delta_n", "lambda_h", "lambda_g", "rmse shape", "weak shape", "kappa");
    for n in [100, 1_000, 10_000, 100_000, 1_000_000] {
        let delta = critical_radius(&kernel, n, None)?;
        let (lh, lg) = tune_lambdas(delta, 1.0, &TuningConstants::default())?;
        let e = theory_envelope(delta, lh, lg, 1.0, 1.0, n)?;
        println!(
            "{n:>7} {delta:>8.4} {lh:>10.3e} {lg:>10.3e} {:>11.3e} {:>11.3e} {:>9.4}",
            e.rmse_bound_shape, e.weak_bound_shape, e.kappa
        );
    }
    Ok(())
}
