//! Propagator masses, the ball-averaged propagator and the convolution
//! envelope.

use std::f64::consts::PI;

use swe2d::kernels::{conv_g2q, green_power_mass, green_power_mass_quadrature, lemma1_bound, lemma2_check, varphi};
use swe2d::specfun::QuadratureBudget;

fn main() -> swe2d::Result<()> {
    let budget = QuadratureBudget::default().with_rel_tol(1e-8);

    println!("int G_t^(2p): closed form vs quadrature");
    for (p, t) in [(0.25, 1.0), (0.5, 2.0), (0.75, 0.5)] {
        let closed = green_power_mass(p, t)?;
        let quad = green_power_mass_quadrature(p, t, &budget)?;
        println!("  p={p} t={t}: {closed:.12} {:.12}", quad.value);
    }

    // phi is flat at height t - s in the middle of the ball
    let (t, r, s) = (1.0, 2.0, 0.25);
    for d in [0.0, 1.0, 2.0, 2.5, 2.8] {
        println!("  phi({t}, {r}, {s}; |y| = {d}) = {:.6}", varphi(t, r, s, [d, 0.0])?);
    }
    println!("  cone volume (t - s) pi R^2 = {:.6}", (t - s) * PI * r * r);

    let q = 2.0 / 3.0;
    println!("conv / bound, t = 1, s = 0.4");
    for w in [0.0, 0.2, 0.4, 0.5, 0.9, 1.3] {
        let bound = lemma1_bound(1.0, 0.4, w, q)?;
        let conv = conv_g2q(bound.t, bound.s, bound.w, q, &budget)?;
        println!(
            "  w={w:<4} conv {:.6} bound {:.6} ratio {:.4}{}",
            conv.value,
            bound.value,
            conv.value / bound.value,
            if bound.on_boundary { " (boundary)" } else { "" }
        );
    }

    let loose = budget.with_rel_tol(1e-5);
    for delta in [1.0, 1.0 / q] {
        let e = lemma2_check(0.0, 1.0, [0.3, 0.1], q, delta, &loose)?;
        println!("envelope delta={delta:.3}: lhs {:.6} rhs {:.6} ratio {:.4}", e.lhs.value, e.rhs, e.ratio());
    }
    Ok(())
}
