//! Picard iterates of one noise path and the moment constants that bound them.

use swe2d::noise::{GridSpec, NoiseMethod, NoisePlan};
use swe2d::solver::{picard_moment_constants, picard_solve, KickPlacement, ModelParams, SigmaSpec};
use swe2d::specfun::Beta;

fn main() -> swe2d::Result<()> {
    let beta = Beta::new(1.0)?;
    let params = ModelParams::new(beta, SigmaSpec::SineShifted { c0: 2.0 }, 1.0, 1.0)?;
    let grid = GridSpec::new(4.0, 32, 0.05)?;
    let plan = NoisePlan::new(grid, beta, NoiseMethod::CirculantEmbedding, 3)?;
    let run = picard_solve(&params, &grid, &plan, KickPlacement::Midpoint, 8, 0, 256 << 20)?;
    for (k, d) in run.differences().iter().enumerate() {
        println!("||u_{} - u_{}|| = {d:.3e}", k + 1, k);
    }
    let (kappa, c) = picard_moment_constants(beta, 2.0, 1.0, 1.0, 1.0, 2.0)?;
    println!("moment growth: kappa {kappa:.4}, C {c:.4}");
    Ok(())
}
