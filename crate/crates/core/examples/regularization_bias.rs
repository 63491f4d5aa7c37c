//! Population Tikhonov bias against lambda for several source-condition exponents.

use kras::experiment::fit_power_law;
use kras::kernels::KernelSpec;
use kras::workbench::{make_source_problem, spectral_dgp, Variant};

fn main() -> kras::Result<()> {
    let kernel = KernelSpec::gaussian(0.3);
    let dgp = spectral_dgp(60, 12.0, &kernel, 1)?;
    let lambdas: Vec<f64> = (0..25).map(|i| 10f64.powf(-9.0 + 4.0 * i as f64 / 24.0)).collect();
    println!("{:>5} {:>10} {:>10} {:>10} {:>10}", "beta", "h slope", "target", "weak slope", "target");
    for beta in [0.5, 1.0, 1.5, 3.0] {
        let problem = make_source_problem(&dgp, &kernel, &kernel, beta, Variant::Transformed, 2)?;
        let (h, w): (Vec<_>, Vec<_>) = lambdas
            .iter()
            .map(|&l| {
                let (hb, wb) = problem.bias(l);
                ((l, hb), (l, wb))
            })
            .unzip();
        let (hs, ws) = (fit_power_law(&h)?, fit_power_law(&w)?);
        println!("{beta:>5} {:>10.4} {:>10} {:>10.4} {:>10}", hs.slope, beta.min(2.0), ws.slope, (beta + 1.0).min(2.0));
    }
    Ok(())
}
