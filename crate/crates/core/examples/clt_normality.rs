//! Shape of the ball average for the nonlinear noise `sin(u) + 2`.

use swe2d::clt::{normality_report, simulate_batch, variance_limit, Standardize, XiProfile};
use swe2d::noise::{GridSpec, NoiseMethod, NoisePlan};
use swe2d::solver::{KickPlacement, ModelParams, SigmaSpec};
use swe2d::specfun::{Beta, QuadratureBudget};

fn main() -> swe2d::Result<()> {
    let beta = Beta::new(1.0)?;
    let params = ModelParams::new(beta, SigmaSpec::SineShifted { c0: 2.0 }, 1.0, 1.0)?;
    let grid = GridSpec::new(8.0, 64, 0.05)?;
    let plan = NoisePlan::new(grid, beta, NoiseMethod::CirculantEmbedding, 9)?;
    let radii = [1.0, 3.0];
    let batch = simulate_batch(&params, &grid, &plan, KickPlacement::Midpoint, &[1.0], &radii, 0, 600)?;
    let xi = XiProfile::from_batch(&batch, params.sigma.eval(1.0))?;
    let limit = variance_limit(beta, 1.0, &xi, &QuadratureBudget::default().with_rel_tol(1e-8))?.value;
    for (ri, r) in radii.iter().enumerate() {
        let col = batch.column(0, ri);
        let s = normality_report(&col, Standardize::Empirical)?;
        println!(
            "R={r}: Var R^(b-4) {:.4} (limit {limit:.4}), KS p {:.3}, skew {:.3} +- {:.3}, excess kurtosis {:.3} +- {:.3}",
            s.sd * s.sd * r.powf(beta.value() - 4.0),
            s.ks_p_value,
            s.skewness,
            s.skewness_se,
            s.excess_kurtosis,
            s.kurtosis_se
        );
    }
    Ok(())
}
