//! Exact operator identities on a random finite-state law.

use kras::kernels::KernelSpec;
use kras::linalg::weighted_norm;
use kras::workbench::{
    adjointness_defect, cond_exp_operator, kernel_integral_operator, operator_sqrt, random_dgp, rkhs_norm_of_values, Direction,
    RandomDgpConfig, Side,
};
use nalgebra::DVector;

fn main() -> kras::Result<()> {
    let cfg = RandomDgpConfig { n_w: 30, n_z: 25, n_x: 2, r_low: 0.5, r_high: 1.5, random_x0: true };
    let dgp = random_dgp(&cfg, 3)?;
    let kernel = KernelSpec::gaussian(0.5);

    let t = cond_exp_operator(&dgp, Direction::Forward)?;
    let t_star = cond_exp_operator(&dgp, Direction::Adjoint)?;
    println!("adjointness defect <Tf, g> - <f, T*g>: {:.3e}", adjointness_defect(&t, &t_star));

    let t_h = kernel_integral_operator(&dgp, &kernel, Side::W)?;
    let s = operator_sqrt(&t_h)?;
    println!("max |S S - T_H|: {:.3e}", (s.compose(&s).entries - &t_h.entries).amax());

    let f = DVector::from_fn(dgp.nw(), |i, _| (i as f64 * 0.7).sin());
    let h_norm = rkhs_norm_of_values(&kernel, &dgp.w_points(), &s.apply(&f))?;
    println!("||S f||_H = {h_norm:.12}, ||f||_2 = {:.12}", weighted_norm(&f, &dgp.p_w()));
    Ok(())
}
