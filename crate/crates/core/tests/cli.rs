use std::path::PathBuf;
use std::process::Command;

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("swe2d-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn swe2d(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_swe2d")).args(args).output().unwrap()
}

const CONSTANTS: &str = r#"
[model]
beta = 1.0
lipschitz = 1.0
horizon = 1.0
sigma = { kind = "constant", c = 1.0 }

[grid]
n = 64
dt = 0.02
"#;

#[test]
fn constants_succeeds_and_writes_json() {
    let dir = scratch("ok");
    let cfg = dir.join("c.toml");
    std::fs::write(&cfg, CONSTANTS).unwrap();
    let out = dir.join("out");
    let run = swe2d(&["constants", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("constants.json")).unwrap()).unwrap();
    assert_eq!(json["verdict"], "consistent");
}

#[test]
fn invalid_input_exits_with_2() {
    let dir = scratch("bad");
    let cfg = dir.join("c.toml");
    std::fs::write(&cfg, CONSTANTS.replace("dt = 0.02", "dt = 0.2")).unwrap();
    assert_eq!(swe2d(&["constants", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    std::fs::write(&cfg, CONSTANTS.replace("horizon", "horizn")).unwrap();
    assert_eq!(swe2d(&["constants", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.join("missing.toml");
    assert_eq!(swe2d(&["kernels", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn undecidable_statistics_exit_with_4() {
    // additive noise is exactly Gaussian, so the shape moments sit at the
    // noise floor and the rate fit is inconclusive
    let dir = scratch("floor");
    let cfg = dir.join("c.toml");
    let text = format!(
        "replica_count = 600\nradii = [1.0, 2.0, 3.0, 4.0]\ncheckpoints = [1.0]\noutput = \"{}\"\n{}",
        dir.join("out").display(),
        CONSTANTS.replace("n = 64\ndt = 0.02", "n = 32\ndt = 0.05")
    );
    std::fs::write(&cfg, text).unwrap();
    let run = swe2d(&["rate-study", "--config", cfg.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(4), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(dir.join("out/report.json").exists());
}
