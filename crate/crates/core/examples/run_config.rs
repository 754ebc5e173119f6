//! Runs one experiment from a TOML file, as the command-line tool does.
//!
//! `cargo run --release --example run_config -- configs/additive_variance.toml clt`

use std::path::PathBuf;

use swe2d::harness::{run, ExperimentConfig, ExperimentKind, RunOptions};

fn main() -> swe2d::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(args.next().unwrap_or_else(|| "configs/constants.toml".into()));
    let config = ExperimentConfig::load(&path)?;
    let kind = match args.next().as_deref() {
        Some(name) => serde_json::from_value::<ExperimentKind>(serde_json::Value::String(name.into()))?,
        None => config.kind.unwrap_or(ExperimentKind::Constants),
    };
    let outcome = run(kind, &config, RunOptions::default())?;
    println!("{:?}", outcome.status);
    for a in &outcome.artifacts {
        println!("  wrote {}", a.display());
    }
    Ok(())
}
