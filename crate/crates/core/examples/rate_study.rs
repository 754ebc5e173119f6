//! Increment norms in time from the exact additive covariance, and the decay
//! of the shape moments in R from a small nonlinear batch.

use swe2d::clt::{exact_increment_additive, rate_study, simulate_batch};
use swe2d::noise::{GridSpec, NoiseMethod, NoisePlan};
use swe2d::solver::{KickPlacement, ModelParams, SigmaSpec};
use swe2d::specfun::{Beta, QuadratureBudget};

fn main() -> swe2d::Result<()> {
    let beta = Beta::new(1.0)?;
    let budget = QuadratureBudget::default().with_rel_tol(1e-8);
    let r = 10.0;
    let mut pts = Vec::new();
    for d in [0.01, 0.04, 0.16, 0.36] {
        let e = exact_increment_additive(beta, 1.0, 1.0 - d, r, 1.0, &budget)?;
        println!("||F_R(1) - F_R(1 - {d})||_2 = {:.4}", e.value);
        pts.push((f64::ln(d), e.value.ln()));
    }
    for w in pts.windows(2) {
        println!("  local slope {:.3}", (w[1].1 - w[0].1) / (w[1].0 - w[0].0));
    }

    let params = ModelParams::new(beta, SigmaSpec::SineShifted { c0: 2.0 }, 1.0, 1.0)?;
    let grid = GridSpec::new(10.0, 64, 0.05)?;
    let plan = NoisePlan::new(grid, beta, NoiseMethod::CirculantEmbedding, 4)?;
    let batch = simulate_batch(&params, &grid, &plan, KickPlacement::Midpoint, &[1.0], &[1.0, 2.0, 3.0, 4.0], 0, 500)?;
    match rate_study(&batch, 0)? {
        Some(fit) => println!(
            "moment distance ~ R^{:.2} (95% CI {:.2} to {:.2}){}",
            fit.slope,
            fit.ci.0,
            fit.ci.1,
            if fit.inconclusive { ", at the noise floor" } else { "" }
        ),
        None => println!("no rate fit"),
    }
    Ok(())
}
