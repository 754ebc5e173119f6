//! Draws noise increments and compares their empirical cell covariance with
//! the exact one.

use swe2d::harness::noise_covariance_check;
use swe2d::noise::{cell_cov, GridSpec, NoiseMethod, NoisePlan};
use swe2d::specfun::Beta;

fn main() -> swe2d::Result<()> {
    let beta = Beta::new(1.0)?;
    let grid = GridSpec::new(4.0, 64, 0.05)?;
    let offsets = [[0, 0], [1, 0], [1, 1], [3, 2], [10, 0]];
    for method in [NoiseMethod::CirculantEmbedding, NoiseMethod::SpectralTruncation] {
        let plan = NoisePlan::new(grid, beta, method, 1)?;
        println!("{method:?}, min eigenvalue {:.3e}", plan.min_eigenvalue());
        let est = noise_covariance_check(&plan, &offsets, 2000, 0);
        for (o, e) in offsets.iter().zip(est) {
            let exact = cell_cov(beta, &grid, *o);
            println!(
                "  offset {o:?}: {:.5} +- {:.5}, exact {exact:.5}, z {:.2}",
                e.value,
                e.se,
                e.z_score(exact)
            );
        }
    }
    Ok(())
}
