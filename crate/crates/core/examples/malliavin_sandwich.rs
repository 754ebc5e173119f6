//! Malliavin derivative against the propagator, additive and linear noise.

use swe2d::harness::{malliavin_check, ExperimentConfig, ExperimentKind};

const CONFIG: &str = r#"
seed = 1
replica_count = 200

[model]
beta = 1.0
lipschitz = 1.0
horizon = 1.0
sigma = { kind = "constant", c = 1.0 }

[grid]
half_width = 2.0
n = 64
dt = 0.02

[malliavin]
source_time = 0.5
cells = 12
"#;

fn main() -> swe2d::Result<()> {
    for sigma in [r#"{ kind = "constant", c = 1.0 }"#, r#"{ kind = "linear" }"#] {
        let text = CONFIG.replace(r#"{ kind = "constant", c = 1.0 }"#, sigma);
        let config = ExperimentConfig::from_toml(&text)?;
        let grid = config.validate(ExperimentKind::MalliavinCheck)?;
        let report = malliavin_check(&config, grid)?;
        println!("{} noise: {:?}", report.kind, report.verdict);
        if let Some(dev) = report.max_relative_deviation {
            println!("  D vs c G on 2x2 blocks: {dev:.4}");
        }
        if let (Some(lo), Some(hi)) = (report.lower_constant, report.upper_constant) {
            println!("  lower constant {:.4} +- {:.4}, largest ratio {hi:.4}", lo.value, lo.se);
        }
        for row in report.rows.iter().take(5) {
            println!("  |x - y| = {:.3}: ratio {:.4}", row.distance, row.ratio.value);
        }
    }
    Ok(())
}
