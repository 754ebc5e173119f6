//! Monte Carlo variance of a ball average against the exact additive value,
//! on a small grid.

use swe2d::clt::{exact_variance_additive, simulate_batch, variance_estimate};
use swe2d::noise::{GridSpec, NoiseMethod, NoisePlan};
use swe2d::solver::{KickPlacement, ModelParams, SigmaSpec};
use swe2d::specfun::{Beta, QuadratureBudget};

fn main() -> swe2d::Result<()> {
    let beta = Beta::new(1.0)?;
    let params = ModelParams::new(beta, SigmaSpec::Constant { c: 1.0 }, 1.0, 1.0)?;
    let grid = GridSpec::new(6.0, 64, 0.05)?;
    let plan = NoisePlan::new(grid, beta, NoiseMethod::CirculantEmbedding, 42)?;
    let times = [0.5, 1.0];
    let radii = [1.0, 2.0];
    let batch = simulate_batch(&params, &grid, &plan, KickPlacement::Midpoint, &times, &radii, 0, 400)?;
    let budget = QuadratureBudget::default().with_rel_tol(1e-8);
    for (ti, &t) in times.iter().enumerate() {
        for (ri, &r) in radii.iter().enumerate() {
            let mc = variance_estimate(&batch.column(ti, ri))?;
            let exact = exact_variance_additive(beta, t, r, 1.0, &budget)?;
            println!(
                "t={t} R={r}: {:.4} +- {:.4} vs {:.4} (z {:.2})",
                mc.value,
                mc.se,
                exact.value,
                mc.z_score(exact.value)
            );
        }
    }
    Ok(())
}
