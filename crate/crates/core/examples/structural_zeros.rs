//! Structural zeros in a policy-shift design: the fitted representer vanishes below c + delta.

use kras::dgps::{gen_policy_shift, PolicyShiftParams};
use kras::estimators::{g_fitter, EstimatorConfig, Method};
use kras::kernels::{critical_radius, KernelSpec};

fn main() -> kras::Result<()> {
    let params = PolicyShiftParams::default();
    let x0 = params.x0();
    let generated = gen_policy_shift(&params, 300, 4)?;
    let kernel = KernelSpec::gaussian(1.0);
    let mu0 = generated.data.mean(|o| x0.indicator(o.x));
    println!("share of treatments in X0: {mu0:.3}");
    for m in Method::ALL {
        let cfg = EstimatorConfig::new(m, 0.01, 0.01, kernel.clone(), kernel.clone());
        let g = g_fitter(cfg, generated.spec.clone())(&generated.data)?;
        let (mut zeros, mut inside) = (0, 0);
        for o in &generated.data.rows {
            if x0.contains(o.x) {
                inside += 1;
            } else if g(&o.z, o.x) == 0.0 {
                zeros += 1;
            }
        }
        println!("{m}: exact zeros off X0 {zeros}/{}", generated.data.n() - inside);
    }
    let plain = critical_radius(&kernel, 300, None)?;
    let adjusted = critical_radius(&kernel, 300, Some(mu0))?;
    println!("critical radius: n=300 gives {plain:.4}, effective floor(n mu0 / 2) gives {adjusted:.4}");
    Ok(())
}
