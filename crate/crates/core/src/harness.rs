//! Experiment configuration, execution and persistence.
//!
//! A run reads one TOML file, validates it as a whole, computes, and writes
//! JSON and CSV artifacts into the output directory. Every file is written to
//! a temporary name first and renamed into place. Monte Carlo runs save their
//! replica batch every `checkpoint_every` replicas so an interrupted run can
//! be resumed.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::clt::{simulate_batch, spatial_average, CltReport, McEstimate, ReplicaBatch, Verdict};
use crate::error::{Error, Result};
use crate::kernels::{conv_g2q, green, green_power_mass, green_power_mass_quadrature, lemma1_bound, lemma2_check, psi_r, varphi};
use crate::noise::{cell_cov, write_field, GridSpec, NoiseMethod, NoisePlan, ZeroMode};
use crate::quadrature::{kronrod_adaptive, Estimate};
use crate::solver::{discrete_green, malliavin_path, solve_path, KickPlacement, ModelParams, SigmaSpec};
use crate::specfun::{ball_ball_riesz, c_beta, kappa_beta, QuadratureBudget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Constants,
    Kernels,
    NoiseCheck,
    Simulate,
    Clt,
    RateStudy,
    MalliavinCheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Constants => "constants",
            ExperimentKind::Kernels => "kernels",
            ExperimentKind::NoiseCheck => "noise-check",
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Clt => "clt",
            ExperimentKind::RateStudy => "rate-study",
            ExperimentKind::MalliavinCheck => "malliavin-check",
        }
    }

    fn needs_replicas(self) -> bool {
        matches!(
            self,
            ExperimentKind::Simulate | ExperimentKind::Clt | ExperimentKind::RateStudy | ExperimentKind::MalliavinCheck
        )
    }
}

/// Grid section. `half_width` defaults to `2 (max radius + horizon)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub half_width: Option<f64>,
    pub n: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub method: NoiseMethod,
    #[serde(default)]
    pub zero_mode: ZeroMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MalliavinConfig {
    /// Source time `s`; must be a multiple of `dt`.
    pub source_time: f64,
    /// Number of test cells inside the light cone (linear case).
    #[serde(default = "default_test_cells")]
    pub cells: usize,
    /// Test cells satisfy `|x - y| <= cone_fraction (T - s)`.
    #[serde(default = "default_cone_fraction")]
    pub cone_fraction: f64,
}

fn default_test_cells() -> usize {
    24
}

fn default_cone_fraction() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseCheckConfig {
    #[serde(default = "default_draws")]
    pub draws: usize,
    /// Cell offsets `[di, dj]` at which the covariance is compared.
    #[serde(default = "default_offsets")]
    pub offsets: Vec<[i64; 2]>,
}

fn default_draws() -> usize {
    10_000
}

fn default_offsets() -> Vec<[i64; 2]> {
    vec![
        [0, 0],
        [1, 0],
        [0, 1],
        [1, 1],
        [2, 0],
        [2, 1],
        [3, 0],
        [3, 3],
        [5, 2],
        [8, 0],
        [-4, 7],
        [16, 16],
    ]
}

impl Default for NoiseCheckConfig {
    fn default() -> Self {
        Self {
            draws: default_draws(),
            offsets: default_offsets(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldFormat {
    #[default]
    Binary,
    Csv,
}

fn default_output() -> PathBuf {
    PathBuf::from("swe2d-out")
}

fn default_checkpoint_every() -> u64 {
    500
}

fn default_budget() -> QuadratureBudget {
    QuadratureBudget::default().with_rel_tol(1e-8)
}

/// One experiment. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// If given, must agree with the subcommand.
    #[serde(default)]
    pub kind: Option<ExperimentKind>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub replica_start: u64,
    #[serde(default)]
    pub replica_count: u64,
    #[serde(default)]
    pub radii: Vec<f64>,
    #[serde(default)]
    pub checkpoints: Vec<f64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub placement: KickPlacement,
    #[serde(default)]
    pub field_format: FieldFormat,
    pub model: ModelParams,
    pub grid: GridConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default = "default_budget")]
    pub budget: QuadratureBudget,
    #[serde(default)]
    pub malliavin: Option<MalliavinConfig>,
    #[serde(default)]
    pub noise_check: NoiseCheckConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Grid with the half-width default applied.
    pub fn grid_spec(&self) -> Result<GridSpec> {
        let a = match self.grid.half_width {
            Some(a) => a,
            None => {
                let r = self.radii.iter().copied().fold(0.0, f64::max);
                2.0 * (r + self.model.horizon)
            }
        };
        GridSpec::new(a, self.grid.n, self.grid.dt)
    }

    /// Whole-config validation, before any computation.
    pub fn validate(&self, kind: ExperimentKind) -> Result<GridSpec> {
        if let Some(k) = self.kind {
            if k != kind {
                return Err(Error::validation(
                    "kind",
                    format!("config is for `{}` but `{}` was requested", k.name(), kind.name()),
                ));
            }
        }
        self.model.validate()?;
        let grid = self.grid_spec()?;
        if kind.needs_replicas() && self.replica_count == 0 {
            return Err(Error::validation("replica_count", "must be positive for this experiment"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::validation("checkpoint_every", "must be positive"));
        }
        let horizon = self.model.horizon;
        for &t in &self.checkpoints {
            if !(t >= 0.0 && t <= horizon * (1.0 + 1e-12)) {
                return Err(Error::validation("checkpoints", format!("{t} lies outside [0, {horizon}]")));
            }
            if grid.steps_to(t).is_none() {
                return Err(Error::validation("checkpoints", format!("{t} is not a multiple of dt = {}", grid.dt())));
            }
        }
        if self.checkpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::validation("checkpoints", "must be strictly increasing"));
        }
        if grid.steps_to(horizon).is_none() {
            return Err(Error::validation("model.horizon", "must be a multiple of dt"));
        }
        let t_max = self.checkpoints.last().copied().unwrap_or(horizon);
        for &r in &self.radii {
            if !(r > 0.0) {
                return Err(Error::validation("radii", format!("radius {r} must be positive")));
            }
            if r + t_max > grid.half_width() * (1.0 + 1e-12) {
                return Err(Error::validation(
                    "radii",
                    format!("R + t = {} exceeds the half-width {}", r + t_max, grid.half_width()),
                ));
            }
        }
        match kind {
            ExperimentKind::Clt | ExperimentKind::RateStudy => {
                if self.radii.is_empty() || self.checkpoints.is_empty() {
                    return Err(Error::validation("radii", "need at least one radius and one checkpoint"));
                }
            }
            _ => {}
        }
        if kind == ExperimentKind::RateStudy {
            let (lo, hi) = self.radii.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
            if self.radii.len() < 4 || hi < 4.0 * lo {
                return Err(Error::validation("radii", "a rate study needs at least four radii spanning a factor of 4"));
            }
        }
        if kind == ExperimentKind::Simulate && self.checkpoints.is_empty() {
            return Err(Error::validation("checkpoints", "simulate needs at least one checkpoint"));
        }
        if kind == ExperimentKind::MalliavinCheck {
            let m = self
                .malliavin
                .as_ref()
                .ok_or_else(|| Error::validation("malliavin", "section is required for malliavin-check"))?;
            if !(m.source_time >= 0.0 && m.source_time < horizon) || grid.steps_to(m.source_time).is_none() {
                return Err(Error::validation("malliavin.source_time", "must be a multiple of dt in [0, horizon)"));
            }
            if !(m.cone_fraction > 0.0 && m.cone_fraction < 1.0) || m.cells == 0 {
                return Err(Error::validation("malliavin", "cone_fraction must lie in (0, 1) and cells be positive"));
            }
            if !matches!(
                self.model.sigma,
                SigmaSpec::Constant { .. } | SigmaSpec::Linear | SigmaSpec::Affine { .. }
            ) {
                return Err(Error::Unsupported("malliavin-check needs constant, linear or affine sigma".into()));
            }
        }
        if kind == ExperimentKind::NoiseCheck && self.noise_check.draws < 2 {
            return Err(Error::validation("noise_check.draws", "need at least two draws"));
        }
        Ok(grid)
    }

    fn plan(&self, grid: GridSpec) -> Result<NoisePlan> {
        NoisePlan::with_zero_mode(grid, self.model.beta, self.noise.method, self.noise.zero_mode, self.seed)
    }

    /// The config with everything that does not affect numerical results
    /// cleared; two batches can be merged only if these agree.
    fn fingerprint(&self) -> ExperimentConfig {
        ExperimentConfig {
            replica_start: 0,
            replica_count: 0,
            output: PathBuf::new(),
            checkpoint_every: default_checkpoint_every(),
            kind: None,
            ..self.clone()
        }
    }
}

/// Saved replica batch with the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFile {
    pub config: ExperimentConfig,
    pub batch: ReplicaBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Success,
    /// A statistical check failed or could not be decided.
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub artifacts: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub workers: usize,
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { workers: 1, resume: false }
    }
}

/// Process exit code for an error: 2 for invalid input, 3 for numerical
/// failure, 4 for statistics that cannot be evaluated.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation { .. } | Error::Config(_) | Error::Domain(_) | Error::Unsupported(_) | Error::Merge(_) => 2,
        Error::Io(_) | Error::Json(_) => 2,
        Error::TooFewSamples { .. } => 4,
        Error::Convergence { .. }
        | Error::NotPositiveSemidefinite { .. }
        | Error::BlowUp { .. }
        | Error::MemoryBudget { .. }
        | Error::Degenerate(_) => 3,
    }
}

/// Writes through a temporary file so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(&path, text.as_bytes())?;
    artifacts.push(path);
    Ok(())
}

fn write_text(dir: &Path, name: &str, text: &str, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    write_atomic(&path, text.as_bytes())?;
    artifacts.push(path);
    Ok(())
}

/// Runs `kind` on `config` with `options.workers` threads.
pub fn run(kind: ExperimentKind, config: &ExperimentConfig, options: RunOptions) -> Result<RunOutcome> {
    let grid = config.validate(kind)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()
        .map_err(|e| Error::validation("workers", e.to_string()))?;
    std::fs::create_dir_all(&config.output)?;
    pool.install(|| match kind {
        ExperimentKind::Constants => run_constants(config),
        ExperimentKind::Kernels => run_kernels(config),
        ExperimentKind::NoiseCheck => run_noise_check(config, grid),
        ExperimentKind::Simulate => run_simulate(config, grid),
        ExperimentKind::Clt | ExperimentKind::RateStudy => run_clt(kind, config, grid, options.resume),
        ExperimentKind::MalliavinCheck => run_malliavin(config, grid),
    })
}

fn run_constants(config: &ExperimentConfig) -> Result<RunOutcome> {
    let beta = config.model.beta;
    let budget = &config.budget;
    let c = c_beta(beta);
    let kappa = kappa_beta(beta, budget)?;
    let lhs = kappa.scale(4.0 * PI * PI * c);
    let rhs = ball_ball_riesz(beta, budget)?;
    let residual = (lhs.value - rhs.value).abs() / rhs.value;
    let summary = json!({
        "beta": beta.value(),
        "c_beta": c,
        "kappa_beta": kappa,
        "fourier_side": lhs,
        "ball_ball_riesz": rhs,
        "identity_relative_residual": residual,
        "identity_tolerance": 1e-3,
        "verdict": if residual <= 1e-3 { Verdict::Consistent } else { Verdict::Inconsistent },
    });
    let mut artifacts = Vec::new();
    write_json(&config.output, "constants.json", &summary, &mut artifacts)?;
    let status = if residual <= 1e-3 { RunStatus::Success } else { RunStatus::Inconclusive };
    Ok(RunOutcome { status, artifacts, summary })
}

/// `int phi(t, R, s; y) dy` by radial quadrature, split at the kinks of phi.
pub fn varphi_mass(t: f64, radius: f64, s: f64, budget: &QuadratureBudget) -> Result<Estimate> {
    let tau = t - s;
    let mut cuts = [0.0, (radius - tau).abs(), radius, radius + tau];
    cuts.sort_by(f64::total_cmp);
    let mut total = Estimate::exact(0.0);
    for w in cuts.windows(2).filter(|w| w[1] > w[0]) {
        total = total
            + kronrod_adaptive(w[0], w[1], 4, budget, |d| {
                2.0 * PI * d * varphi(t, radius, s, [d, 0.0]).unwrap_or(f64::NAN)
            })?;
    }
    Ok(total)
}

fn run_kernels(config: &ExperimentConfig) -> Result<RunOutcome> {
    let budget = &config.budget;
    let beta = config.model.beta;
    let q = beta.q();
    let mut masses = Vec::new();
    let mut worst_mass = 0.0f64;
    for p in [0.25, 0.5, 0.75] {
        for t in [0.5, 1.0, 2.0] {
            let closed = green_power_mass(p, t)?;
            let quad = green_power_mass_quadrature(p, t, budget)?;
            let rel = (quad.value - closed).abs() / closed;
            worst_mass = worst_mass.max(rel);
            masses.push(json!({"p": p, "t": t, "closed_form": closed, "quadrature": quad, "relative_error": rel}));
        }
    }
    let radius = config.radii.first().copied().unwrap_or(1.0);
    let t = config.model.horizon;
    let mass = varphi_mass(t, radius, 0.0, &budget.with_rel_tol(1e-9))?;
    let cone = t * PI * radius * radius;
    let mut conv_ratios = Vec::new();
    for &tt in &[0.5f64, 1.0, 2.0] {
        for &sf in &[0.2f64, 0.5, 0.9] {
            for &wf in &[0.0f64, 0.3, 0.8] {
                let s = sf * tt;
                let w = wf * (tt + s);
                if (tt - s - w).abs() <= 1e-6 * tt {
                    continue;
                }
                let c = conv_g2q(tt, s, w, q, budget)?;
                let b = lemma1_bound(tt, s, w, q)?;
                conv_ratios.push(json!({"t": tt, "s": s, "w": w, "conv": c, "bound": b.value, "ratio": c.value / b.value}));
            }
        }
    }
    let mut envelope = Vec::new();
    for delta in [1.0, 1.0 / q] {
        for wf in [0.0, 0.4, 0.8] {
            let e = lemma2_check(0.0, 1.0, [wf, 0.0], q, delta, &budget.with_rel_tol(1e-5))?;
            envelope.push(json!({"delta": delta, "w": wf, "lhs": e.lhs, "rhs": e.rhs, "ratio": e.ratio()}));
        }
    }
    let mut psi = Vec::new();
    for &r in if config.radii.is_empty() { &[1.0][..] } else { &config.radii[..] } {
        psi.push(json!({"radius": r, "t": t, "s": 0.0, "psi": psi_r(t, t, 0.0, r, beta, budget)?}));
    }
    let summary = json!({
        "beta": beta.value(),
        "q": q,
        "green_power_mass": masses,
        "green_power_mass_worst_relative_error": worst_mass,
        "varphi_mass": {"t": t, "radius": radius, "quadrature": mass, "cone_volume": cone,
                         "relative_error": (mass.value - cone).abs() / cone},
        "conv_over_bound": conv_ratios,
        "envelope": envelope,
        "psi": psi,
        "psi_limit": 4.0 * PI * PI * c_beta(beta) * kappa_beta(beta, budget)?.value * t * t,
    });
    let mut artifacts = Vec::new();
    write_json(&config.output, "kernels.json", &summary, &mut artifacts)?;
    Ok(RunOutcome {
        status: RunStatus::Success,
        artifacts,
        summary,
    })
}

/// Empirical covariance of unit-time increments at each offset, averaged
/// over all cells of each draw; the SE is taken across draws.
pub fn noise_covariance_check(plan: &NoisePlan, offsets: &[[i64; 2]], draws: usize, first_replica: u64) -> Vec<McEstimate> {
    let grid = *plan.grid();
    let n = grid.n() as i64;
    let per_draw: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        (0..draws.div_ceil(2) as u64)
            .into_par_iter()
            .flat_map_iter(|pair| {
                let mut stream = plan.stream(first_replica + pair);
                let fields = [stream.increment_at(0, 1.0), stream.increment_at(1, 1.0)];
                fields.into_iter().map(|f| {
                    offsets
                        .iter()
                        .map(|o| {
                            let mut s = 0.0;
                            for i in 0..n {
                                let ii = (i + o[0]).rem_euclid(n);
                                for j in 0..n {
                                    let jj = (j + o[1]).rem_euclid(n);
                                    s += f.values[(i * n + j) as usize] * f.values[(ii * n + jj) as usize];
                                }
                            }
                            s / (n * n) as f64
                        })
                        .collect::<Vec<f64>>()
                })
            })
            .collect()
    };
    let k = per_draw.len().min(draws);
    (0..offsets.len())
        .map(|o| {
            let col: Vec<f64> = per_draw[..k].iter().map(|d| d[o]).collect();
            crate::clt::mean_estimate(&col).unwrap_or(McEstimate {
                value: col.first().copied().unwrap_or(0.0),
                se: f64::INFINITY,
            })
        })
        .collect()
}

fn run_noise_check(config: &ExperimentConfig, grid: GridSpec) -> Result<RunOutcome> {
    let plan = config.plan(grid)?;
    let nc = &config.noise_check;
    let est = noise_covariance_check(&plan, &nc.offsets, nc.draws, config.replica_start);
    let mut rows = Vec::new();
    let mut all_ok = true;
    for (o, e) in nc.offsets.iter().zip(&est) {
        let target = cell_cov(config.model.beta, &grid, *o);
        let z = e.z_score(target);
        all_ok &= z <= 3.0;
        rows.push(json!({"offset": o, "empirical": e, "cell_cov": target, "field_covariance": plan.field_covariance(*o), "z": z}));
    }
    let mut artifacts = Vec::new();
    let mut stream = plan.stream(config.replica_start);
    let sample = stream.increment_at(0, 1.0);
    let name = match config.field_format {
        FieldFormat::Binary => "noise_sample.bin",
        FieldFormat::Csv => "noise_sample.csv",
    };
    let path = config.output.join(name);
    write_field(&path, grid.n(), grid.h(), "noise increment, dt = 1", &sample.values)?;
    artifacts.push(path);
    let summary = json!({
        "beta": config.model.beta.value(),
        "method": plan.method(),
        "min_eigenvalue": plan.min_eigenvalue(),
        "draws": nc.draws,
        "offsets": rows,
        "verdict": if all_ok { Verdict::Consistent } else { Verdict::Inconsistent },
    });
    write_json(&config.output, "noise_check.json", &summary, &mut artifacts)?;
    Ok(RunOutcome {
        status: if all_ok { RunStatus::Success } else { RunStatus::Inconclusive },
        artifacts,
        summary,
    })
}

fn run_simulate(config: &ExperimentConfig, grid: GridSpec) -> Result<RunOutcome> {
    use rayon::prelude::*;
    let plan = config.plan(grid)?;
    let replicas: Vec<u64> = (config.replica_start..config.replica_start + config.replica_count).collect();
    let paths: Vec<Vec<(f64, Vec<f64>)>> = replicas
        .par_iter()
        .map(|&r| solve_path(&config.model, &grid, &plan, config.placement, &config.checkpoints, r))
        .collect::<Result<_>>()?;
    let mut artifacts = Vec::new();
    let fields = config.output.join("fields");
    std::fs::create_dir_all(&fields)?;
    let ext = match config.field_format {
        FieldFormat::Binary => "bin",
        FieldFormat::Csv => "csv",
    };
    let mut rows = Vec::new();
    for (ti, &t) in config.checkpoints.iter().enumerate() {
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for (&r, path) in replicas.iter().zip(&paths) {
            let u = &path[ti].1;
            let p = fields.join(format!("u_r{r}_t{t}.{ext}"));
            write_field(&p, grid.n(), grid.h(), &format!("u replica {r} t {t}"), u)?;
            artifacts.push(p);
            sum += u.iter().sum::<f64>();
            sum2 += u.iter().map(|x| x * x).sum::<f64>();
        }
        let count = (replicas.len() * grid.cells()) as f64;
        let averages: Vec<serde_json::Value> = config
            .radii
            .iter()
            .map(|&radius| {
                let values: Vec<f64> = paths
                    .iter()
                    .map(|p| spatial_average(&p[ti].1, radius, &grid, t))
                    .collect::<Result<_>>()?;
                Ok(json!({"radius": radius, "values": values}))
            })
            .collect::<Result<_>>()?;
        rows.push(json!({
            "time": t,
            "mean_u": sum / count,
            "mean_u_squared": sum2 / count,
            "spatial_averages": averages,
        }));
    }
    let summary = json!({"replicas": [config.replica_start, config.replica_start + config.replica_count], "checkpoints": rows});
    write_json(&config.output, "simulate.json", &summary, &mut artifacts)?;
    Ok(RunOutcome {
        status: RunStatus::Success,
        artifacts,
        summary,
    })
}

const PARTIAL: &str = "partial_batch.json";

/// Simulates the configured replicas in chunks, saving progress after each.
pub fn collect_batch(config: &ExperimentConfig, grid: GridSpec, resume: bool) -> Result<ReplicaBatch> {
    let plan = config.plan(grid)?;
    let partial = config.output.join(PARTIAL);
    let mut acc: Option<ReplicaBatch> = None;
    if resume && partial.exists() {
        let saved: BatchFile = serde_json::from_str(&std::fs::read_to_string(&partial)?)?;
        if saved.config.fingerprint() != config.fingerprint() || saved.batch.replica_start != config.replica_start {
            return Err(Error::Merge("the saved partial batch was produced by a different config".into()));
        }
        acc = Some(saved.batch);
    }
    let mut done = acc.as_ref().map_or(0, |b| b.replica_count);
    while done < config.replica_count {
        let chunk = config.checkpoint_every.min(config.replica_count - done);
        let part = simulate_batch(
            &config.model,
            &grid,
            &plan,
            config.placement,
            &config.checkpoints,
            &config.radii,
            config.replica_start + done,
            chunk,
        )?;
        acc = Some(match acc {
            None => part,
            Some(prev) => ReplicaBatch::merge(&[prev, part])?,
        });
        done += chunk;
        let file = BatchFile {
            config: config.clone(),
            batch: acc.clone().unwrap(),
        };
        write_atomic(&partial, serde_json::to_string(&file)?.as_bytes())?;
    }
    let batch = acc.ok_or_else(|| Error::validation("replica_count", "must be positive"))?;
    if batch.replica_count > config.replica_count {
        return Err(Error::Merge("the saved partial batch holds more replicas than requested".into()));
    }
    Ok(batch)
}

fn finish_report(
    kind: ExperimentKind,
    config: &ExperimentConfig,
    batch: &ReplicaBatch,
    mut artifacts: Vec<PathBuf>,
) -> Result<RunOutcome> {
    let report = CltReport::build(batch, &config.model, &config.budget)?;
    write_json(&config.output, "report.json", &report, &mut artifacts)?;
    write_text(&config.output, "variances.csv", &report.variance_csv(), &mut artifacts)?;
    write_text(&config.output, "increments.csv", &report.increment_csv(), &mut artifacts)?;
    let failed = report.variances.iter().any(|v| v.verdict == Verdict::Inconsistent);
    let status = if report.inconclusive()
        || (kind == ExperimentKind::RateStudy && report.rate.is_none())
        || (failed && kind == ExperimentKind::Clt)
    {
        RunStatus::Inconclusive
    } else {
        RunStatus::Success
    };
    let summary = json!({
        "replica_count": report.replica_count,
        "variances": report.variances.iter().map(|v| json!({
            "time": v.time, "radius": v.radius, "estimate": v.estimate, "se": v.se,
            "prediction": v.prediction, "verdict": v.verdict,
        })).collect::<Vec<_>>(),
        "rate": report.rate,
    });
    Ok(RunOutcome {
        status,
        artifacts,
        summary,
    })
}

fn run_clt(kind: ExperimentKind, config: &ExperimentConfig, grid: GridSpec, resume: bool) -> Result<RunOutcome> {
    let batch = collect_batch(config, grid, resume)?;
    let mut artifacts = Vec::new();
    let file = BatchFile {
        config: config.clone(),
        batch,
    };
    write_json(&config.output, "batch.json", &file, &mut artifacts)?;
    let partial = config.output.join(PARTIAL);
    if partial.exists() {
        std::fs::remove_file(partial)?;
    }
    finish_report(kind, config, &file.batch, artifacts)
}

/// Merges saved batches from runs of one config over disjoint replica
/// ranges and writes the combined batch and report.
pub fn merge_files(parts: &[PathBuf], output: &Path) -> Result<RunOutcome> {
    let files: Vec<BatchFile> = parts
        .iter()
        .map(|p| Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?))
        .collect::<Result<_>>()?;
    let first = files.first().ok_or_else(|| Error::Merge("no batch files given".into()))?;
    let print = first.config.fingerprint();
    if files.iter().any(|f| f.config.fingerprint() != print) {
        return Err(Error::Merge("batches come from different configs".into()));
    }
    let batch = ReplicaBatch::merge(&files.iter().map(|f| f.batch.clone()).collect::<Vec<_>>())?;
    let mut config = first.config.clone();
    config.replica_start = batch.replica_start;
    config.replica_count = batch.replica_count;
    config.output = output.to_path_buf();
    std::fs::create_dir_all(output)?;
    let mut artifacts = Vec::new();
    let file = BatchFile { config, batch };
    write_json(output, "batch.json", &file, &mut artifacts)?;
    let kind = if file.config.kind == Some(ExperimentKind::RateStudy) {
        ExperimentKind::RateStudy
    } else {
        ExperimentKind::Clt
    };
    finish_report(kind, &file.config, &file.batch, artifacts)
}

/// Cells `x` with `|x - y|` between 0.15 and `fraction` of the cone radius,
/// spread over angles.
pub fn cone_test_cells(grid: &GridSpec, source: [usize; 2], tau: f64, fraction: f64, count: usize) -> Vec<[usize; 2]> {
    let n = grid.n();
    let y = [grid.center(source[0]), grid.center(source[1])];
    let golden = PI * (3.0 - 5f64.sqrt());
    let mut cells: Vec<[usize; 2]> = Vec::new();
    let mut k = 0usize;
    while cells.len() < count && k < 100 * count {
        let frac = 0.15 + (fraction - 0.15) * ((k as f64 + 0.5) / count as f64).min(1.0).sqrt();
        let ang = golden * k as f64;
        let x = [y[0] + frac * tau * ang.cos(), y[1] + frac * tau * ang.sin()];
        let c = [grid.cell_of(x[0]).min(n - 1), grid.cell_of(x[1]).min(n - 1)];
        let d = ((grid.center(c[0]) - y[0]).powi(2) + (grid.center(c[1]) - y[1]).powi(2)).sqrt();
        if d <= fraction * tau && d > 0.0 && !cells.contains(&c) {
            cells.push(c);
        }
        k += 1;
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichRow {
    pub cell: [usize; 2],
    pub distance: f64,
    pub green: f64,
    pub derivative_norm: McEstimate,
    /// `||D u(T, x)||_2 / G_{T-s}(x - y)` with the integrator's discrete `G`.
    pub ratio: McEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalliavinReport {
    pub kind: String,
    pub source_time: f64,
    pub source_cell: [usize; 2],
    /// Additive case: max relative deviation of D from `c G_{T-s}` inside
    /// the cone, on 2 x 2 cell blocks.
    pub max_relative_deviation: Option<f64>,
    /// The same cell by cell, including the grid-frequency ringing.
    pub max_relative_deviation_pointwise: Option<f64>,
    pub max_relative_deviation_discrete: Option<f64>,
    /// Linear case: `||u(s, y)||_2` over replicas, the lower constant.
    pub lower_constant: Option<McEstimate>,
    pub upper_constant: Option<f64>,
    pub rows: Vec<SandwichRow>,
    pub verdict: Verdict,
}

/// Compares co-simulated Malliavin derivatives with `G_{T-s}`.
pub fn malliavin_check(config: &ExperimentConfig, grid: GridSpec) -> Result<MalliavinReport> {
    use rayon::prelude::*;
    let m = config
        .malliavin
        .as_ref()
        .ok_or_else(|| Error::validation("malliavin", "section is required"))?;
    let plan = config.plan(grid)?;
    let n = grid.n();
    let source = [n / 2, n / 2];
    let y = [grid.center(source[0]), grid.center(source[1])];
    let tau = config.model.horizon - m.source_time;
    let at = |c: [usize; 2]| c[0] * n + c[1];
    let discrete = discrete_green(&grid, tau, source);
    let sigma = &config.model.sigma;
    if let SigmaSpec::Constant { c } = sigma {
        let d = malliavin_path(&config.model, &grid, &plan, config.placement, m.source_time, source, config.replica_start)?;
        let h = grid.h();
        // cell average of G from a 4 x 4 midpoint rule; G is smooth inside the cone
        let cell_green = |i: usize, j: usize| -> Result<f64> {
            let mut s = 0.0;
            for p in 0..4 {
                for q in 0..4 {
                    let x = [
                        grid.center(i) - y[0] + (p as f64 - 1.5) * h / 4.0,
                        grid.center(j) - y[1] + (q as f64 - 1.5) * h / 4.0,
                    ];
                    s += green(tau, x)? / 16.0;
                }
            }
            Ok(s)
        };
        let mut pointwise: f64 = 0.0;
        let mut worst_discrete: f64 = 0.0;
        let mut rows = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let x = [grid.center(i) - y[0], grid.center(j) - y[1]];
                let dist = (x[0] * x[0] + x[1] * x[1]).sqrt();
                if dist > m.cone_fraction * tau {
                    continue;
                }
                let g = green(tau, x)?;
                let v = d.d[i * n + j];
                pointwise = pointwise.max((v - c * g).abs() / (c * g).abs());
                worst_discrete = worst_discrete.max((v - c * discrete[i * n + j]).abs() / (c * g).abs());
                if rows.len() < m.cells && (i + j) % 7 == 0 {
                    rows.push(SandwichRow {
                        cell: [i, j],
                        distance: dist,
                        green: g,
                        derivative_norm: McEstimate { value: v.abs(), se: 0.0 },
                        ratio: McEstimate { value: v / g, se: 0.0 },
                    });
                }
            }
        }
        // The band-limited impulse rings at the grid frequency, so D and G
        // are compared on 2 x 2 blocks of cells.
        let mut block: f64 = 0.0;
        for bi in (0..n - 1).step_by(2) {
            for bj in (0..n - 1).step_by(2) {
                let centre = [grid.center(bi) + 0.5 * h - y[0], grid.center(bj) + 0.5 * h - y[1]];
                if (centre[0].hypot(centre[1])) + h > m.cone_fraction * tau {
                    continue;
                }
                let mut dv = 0.0;
                let mut gv = 0.0;
                for (i, j) in [(bi, bj), (bi + 1, bj), (bi, bj + 1), (bi + 1, bj + 1)] {
                    dv += d.d[i * n + j];
                    gv += c * cell_green(i, j)?;
                }
                block = block.max((dv - gv).abs() / gv.abs());
            }
        }
        return Ok(MalliavinReport {
            kind: "additive".into(),
            source_time: m.source_time,
            source_cell: source,
            max_relative_deviation: Some(block),
            max_relative_deviation_pointwise: Some(pointwise),
            max_relative_deviation_discrete: Some(worst_discrete),
            lower_constant: None,
            upper_constant: None,
            rows,
            verdict: if block <= 0.05 { Verdict::Consistent } else { Verdict::Inconsistent },
        });
    }
    let cells = cone_test_cells(&grid, source, tau, m.cone_fraction, m.cells);
    let replicas: Vec<u64> = (config.replica_start..config.replica_start + config.replica_count).collect();
    let samples: Vec<(f64, Vec<f64>)> = replicas
        .par_iter()
        .map(|&r| {
            let f = malliavin_path(&config.model, &grid, &plan, config.placement, m.source_time, source, r)?;
            Ok((f.u_at_source, cells.iter().map(|&c| f.d[at(c)]).collect()))
        })
        .collect::<Result<_>>()?;
    let norm = |values: &[f64]| -> Result<McEstimate> {
        let squares: Vec<f64> = values.iter().map(|v| v * v).collect();
        let e = crate::clt::mean_estimate(&squares)?;
        let value = e.value.sqrt();
        Ok(McEstimate {
            value,
            se: if value > 0.0 { 0.5 * e.se / value } else { 0.0 },
        })
    };
    let u_vals: Vec<f64> = samples.iter().map(|s| sigma.eval(s.0)).collect();
    let lower = norm(&u_vals)?;
    let mut rows = Vec::new();
    let mut ok = true;
    let mut upper: f64 = 0.0;
    for (k, &c) in cells.iter().enumerate() {
        let dv: Vec<f64> = samples.iter().map(|s| s.1[k]).collect();
        let dn = norm(&dv)?;
        let g = discrete[at(c)];
        let ratio = McEstimate {
            value: dn.value / g,
            se: dn.se / g.abs(),
        };
        let se = (ratio.se * ratio.se + lower.se * lower.se).sqrt();
        ok &= ratio.value >= lower.value - 3.0 * se && ratio.value.is_finite();
        upper = upper.max(ratio.value);
        let x = [grid.center(c[0]) - y[0], grid.center(c[1]) - y[1]];
        rows.push(SandwichRow {
            cell: c,
            distance: (x[0] * x[0] + x[1] * x[1]).sqrt(),
            green: g,
            derivative_norm: dn,
            ratio,
        });
    }
    Ok(MalliavinReport {
        kind: "linear".into(),
        source_time: m.source_time,
        source_cell: source,
        max_relative_deviation: None,
        max_relative_deviation_pointwise: None,
        max_relative_deviation_discrete: None,
        lower_constant: Some(lower),
        upper_constant: Some(upper),
        rows,
        verdict: if ok && upper.is_finite() { Verdict::Consistent } else { Verdict::Inconsistent },
    })
}

fn run_malliavin(config: &ExperimentConfig, grid: GridSpec) -> Result<RunOutcome> {
    let report = malliavin_check(config, grid)?;
    let mut artifacts = Vec::new();
    write_json(&config.output, "malliavin.json", &report, &mut artifacts)?;
    let summary = serde_json::to_value(&report)?;
    Ok(RunOutcome {
        status: if report.verdict == Verdict::Consistent {
            RunStatus::Success
        } else {
            RunStatus::Inconclusive
        },
        artifacts,
        summary,
    })
}
