//! The two sides of the Riesz constant identity for a few noise exponents.

use std::f64::consts::PI;

use swe2d::specfun::{ball_ball_riesz, c_beta, kappa_beta, Beta, QuadratureBudget};

fn main() -> swe2d::Result<()> {
    let budget = QuadratureBudget::default().with_rel_tol(1e-8);
    println!("{:>5} {:>12} {:>14} {:>14} {:>10}", "beta", "c_beta", "4pi^2 c kappa", "ball-ball", "rel");
    for b in [0.25, 0.5, 1.0, 1.5, 1.75] {
        let beta = Beta::new(b)?;
        let c = c_beta(beta);
        let fourier = 4.0 * PI * PI * c * kappa_beta(beta, &budget)?.value;
        let direct = ball_ball_riesz(beta, &budget)?.value;
        println!(
            "{b:>5} {c:>12.8} {fourier:>14.8} {direct:>14.8} {:>10.2e}",
            (fourier - direct).abs() / direct
        );
    }
    Ok(())
}
