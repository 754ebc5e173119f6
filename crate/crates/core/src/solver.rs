//! Stochastic trigonometric integrator for `u_tt = Lap u + sigma(u) W'` on the
//! periodic grid, Picard iteration on a frozen noise path, and co-simulation
//! of the Malliavin derivative.
//!
//! The state is kept in Fourier space. Between noise kicks the free wave is
//! propagated exactly with `cos(k t)` and `sin(k t) / k`; the kick adds
//! `sigma(u(t_n)) dW_n` to the velocity, with `u` taken at the left end of the
//! step so the stochastic integral stays adapted.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::noise::{GridSpec, NoiseIncrement, NoisePlan, NoiseStream};
use crate::specfun::Beta;

/// Nonlinearity `sigma` of the noise term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SigmaSpec {
    Constant { c: f64 },
    /// `sigma(u) = u`.
    Linear,
    Affine { a: f64, b: f64 },
    /// `sigma(u) = sin(u) + c0`.
    SineShifted { c0: f64 },
    /// Piecewise linear through `(u, sigma)` knots, constant beyond the ends.
    Table { knots: Vec<[f64; 2]> },
}

impl SigmaSpec {
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            SigmaSpec::Constant { c } => *c,
            SigmaSpec::Linear => u,
            SigmaSpec::Affine { a, b } => a + b * u,
            SigmaSpec::SineShifted { c0 } => u.sin() + c0,
            SigmaSpec::Table { knots } => {
                let first = knots[0];
                let last = knots[knots.len() - 1];
                if u <= first[0] {
                    return first[1];
                }
                if u >= last[0] {
                    return last[1];
                }
                let i = knots.partition_point(|k| k[0] <= u);
                let (a, b) = (knots[i - 1], knots[i]);
                a[1] + (b[1] - a[1]) * (u - a[0]) / (b[0] - a[0])
            }
        }
    }

    /// Smallest Lipschitz constant of `sigma`.
    pub fn lipschitz(&self) -> f64 {
        match self {
            SigmaSpec::Constant { .. } => 0.0,
            SigmaSpec::Linear => 1.0,
            SigmaSpec::Affine { b, .. } => b.abs(),
            SigmaSpec::SineShifted { .. } => 1.0,
            SigmaSpec::Table { knots } => knots
                .windows(2)
                .map(|w| ((w[1][1] - w[0][1]) / (w[1][0] - w[0][0])).abs())
                .fold(0.0, f64::max),
        }
    }

    /// `sigma'` where the co-simulated derivative needs it.
    fn derivative(&self) -> Option<f64> {
        match self {
            SigmaSpec::Constant { .. } => Some(0.0),
            SigmaSpec::Linear => Some(1.0),
            SigmaSpec::Affine { b, .. } => Some(*b),
            _ => None,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, SigmaSpec::Constant { .. })
    }

    fn validate(&self) -> Result<()> {
        let finite = |x: f64| x.is_finite();
        let ok = match self {
            SigmaSpec::Constant { c } => finite(*c),
            SigmaSpec::Linear => true,
            SigmaSpec::Affine { a, b } => finite(*a) && finite(*b),
            SigmaSpec::SineShifted { c0 } => finite(*c0),
            SigmaSpec::Table { knots } => {
                if knots.len() < 2 || knots.windows(2).any(|w| !(w[1][0] > w[0][0])) {
                    return Err(Error::validation("model.sigma.knots", "need at least two knots with increasing u"));
                }
                knots.iter().all(|k| finite(k[0]) && finite(k[1]))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::validation("model.sigma", "parameters must be finite"))
        }
    }
}

/// The SPDE problem: flat initial data `u(0) = 1`, `u_t(0) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub beta: Beta,
    pub sigma: SigmaSpec,
    pub lipschitz: f64,
    pub horizon: f64,
}

impl ModelParams {
    pub fn new(beta: Beta, sigma: SigmaSpec, lipschitz: f64, horizon: f64) -> Result<Self> {
        let m = Self {
            beta,
            sigma,
            lipschitz,
            horizon,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.sigma.validate()?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::validation("model.horizon", format!("must be positive, got {}", self.horizon)));
        }
        if !(self.lipschitz > 0.0) {
            return Err(Error::validation("model.lipschitz", format!("must be positive, got {}", self.lipschitz)));
        }
        let lip = self.sigma.lipschitz();
        if lip > self.lipschitz * (1.0 + 1e-12) {
            return Err(Error::validation(
                "model.lipschitz",
                format!("sigma has Lipschitz constant {lip}, above the declared {}", self.lipschitz),
            ));
        }
        if self.sigma.eval(1.0) == 0.0 {
            return Err(Error::validation(
                "model.sigma",
                "sigma(1) = 0 makes u identically 1; choose sigma with sigma(1) != 0",
            ));
        }
        Ok(())
    }
}

/// Where the noise kick sits inside a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KickPlacement {
    /// Half a free step, the kick, half a free step. Second-order accurate
    /// for the time integral of the propagator.
    #[default]
    Midpoint,
    /// The kick at the start of the step followed by a full free step.
    Left,
}

/// Physical fields of one replica.
#[derive(Debug, Clone, PartialEq)]
pub struct PathState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub time: f64,
    pub step_index: usize,
}

impl PathState {
    pub fn flat(grid: &GridSpec) -> Self {
        Self {
            u: vec![1.0; grid.cells()],
            v: vec![0.0; grid.cells()],
            time: 0.0,
            step_index: 0,
        }
    }
}

/// Free-wave multipliers over one duration.
#[derive(Debug, Clone)]
struct Rotation {
    cos: Vec<f64>,
    /// `sin(k t) / k`, equal to `t` at `k = 0`.
    sinc: Vec<f64>,
    /// `k sin(k t)`.
    ksin: Vec<f64>,
}

impl Rotation {
    fn new(grid: &GridSpec, t: f64) -> Self {
        let n = grid.n();
        let mut r = Rotation {
            cos: vec![0.0; n * n],
            sinc: vec![0.0; n * n],
            ksin: vec![0.0; n * n],
        };
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (grid.frequency(i), grid.frequency(j));
                let k = (a * a + b * b).sqrt();
                let idx = i * n + j;
                r.cos[idx] = (k * t).cos();
                r.sinc[idx] = if k > 0.0 { (k * t).sin() / k } else { t };
                r.ksin[idx] = k * (k * t).sin();
            }
        }
        r
    }

    fn apply(&self, uh: &mut [Complex64], vh: &mut [Complex64]) {
        for idx in 0..uh.len() {
            let (u, v) = (uh[idx], vh[idx]);
            uh[idx] = u * self.cos[idx] + v * self.sinc[idx];
            vh[idx] = v * self.cos[idx] - u * self.ksin[idx];
        }
    }
}

/// Free-wave multipliers and FFT plans for one grid, shared by every
/// integrator on that grid.
#[derive(Debug)]
pub struct Propagator {
    grid: GridSpec,
    full: Rotation,
    half: Rotation,
    fft: Fft2,
}

impl Propagator {
    pub fn new(grid: &GridSpec) -> Arc<Self> {
        Arc::new(Self {
            grid: *grid,
            full: Rotation::new(grid, grid.dt()),
            half: Rotation::new(grid, 0.5 * grid.dt()),
            fft: Fft2::new(grid.n()),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
}

/// Spectral integrator owning one replica's state.
#[derive(Debug, Clone)]
pub struct Integrator {
    grid: GridSpec,
    sigma: SigmaSpec,
    placement: KickPlacement,
    prop: Arc<Propagator>,
    fft: Fft2,
    uh: Vec<Complex64>,
    vh: Vec<Complex64>,
    work: Vec<Complex64>,
    step_index: usize,
    /// With midpoint kicks the closing half rotation of a step is deferred
    /// and merged with the opening half of the next.
    pending_half: bool,
}

impl Integrator {
    pub fn new(params: &ModelParams, grid: &GridSpec, placement: KickPlacement) -> Self {
        Self::from_state(params, grid, placement, &PathState::flat(grid))
    }

    pub fn from_state(params: &ModelParams, grid: &GridSpec, placement: KickPlacement, state: &PathState) -> Self {
        Self::with_propagator(params, &Propagator::new(grid), placement, state)
    }

    pub fn with_propagator(
        params: &ModelParams,
        prop: &Arc<Propagator>,
        placement: KickPlacement,
        state: &PathState,
    ) -> Self {
        let grid = prop.grid;
        let n = grid.n();
        let mut fft = prop.fft.clone();
        let mut uh: Vec<Complex64> = state.u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let mut vh: Vec<Complex64> = state.v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        fft.forward(&mut uh);
        fft.forward(&mut vh);
        Self {
            grid,
            sigma: params.sigma.clone(),
            placement,
            prop: Arc::clone(prop),
            fft,
            uh,
            vh,
            work: vec![Complex64::default(); n * n],
            step_index: state.step_index,
            pending_half: false,
        }
    }

    fn settle(&mut self) {
        if self.pending_half {
            self.prop.half.apply(&mut self.uh, &mut self.vh);
            self.pending_half = false;
        }
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.grid.dt()
    }

    /// Current displacement field.
    pub fn u(&mut self) -> Vec<f64> {
        self.physical(false)
    }

    fn physical(&mut self, velocity: bool) -> Vec<f64> {
        self.settle();
        let src = if velocity { &self.vh } else { &self.uh };
        self.work.copy_from_slice(src);
        self.fft.inverse(&mut self.work);
        let norm = 1.0 / self.grid.cells() as f64;
        self.work.iter().map(|z| z.re * norm).collect()
    }

    pub fn state(&mut self) -> PathState {
        PathState {
            u: self.physical(false),
            v: self.physical(true),
            time: self.time(),
            step_index: self.step_index,
        }
    }

    /// `sum_j w_j u_j` from the Fourier coefficients, given `FFT(w)`.
    pub fn project(&mut self, weights_hat: &[Complex64]) -> f64 {
        self.settle();
        let s: f64 = self
            .uh
            .iter()
            .zip(weights_hat)
            .map(|(u, w)| (w.conj() * u).re)
            .sum();
        s / self.grid.cells() as f64
    }

    /// One step driven by a physical increment: the kick is `sigma(u) dW`.
    pub fn step(&mut self, increment: &NoiseIncrement) -> Result<()> {
        let per_cell: Vec<f64> = if self.sigma.is_constant() {
            let c = self.sigma.eval(1.0);
            increment.values.iter().map(|w| c * w).collect()
        } else {
            let u = self.u();
            u.iter()
                .zip(&increment.values)
                .map(|(&x, &w)| self.sigma.eval(x) * w)
                .collect()
        };
        self.step_with_forcing(&per_cell)
    }

    /// One step whose velocity kick is the given per-cell field.
    pub fn step_with_forcing(&mut self, kick: &[f64]) -> Result<()> {
        for (z, &k) in self.work.iter_mut().zip(kick) {
            *z = Complex64::new(k, 0.0);
        }
        self.fft.forward(&mut self.work);
        let kick_hat = std::mem::take(&mut self.work);
        let out = self.step_spectral(&kick_hat);
        self.work = kick_hat;
        out
    }

    /// One step with a kick given by its Fourier coefficients.
    pub fn step_spectral(&mut self, kick_hat: &[Complex64]) -> Result<()> {
        match self.placement {
            KickPlacement::Midpoint => {
                let rot = if self.pending_half { &self.prop.full } else { &self.prop.half };
                rot.apply(&mut self.uh, &mut self.vh);
                for (v, k) in self.vh.iter_mut().zip(kick_hat) {
                    *v += k;
                }
                self.pending_half = true;
            }
            KickPlacement::Left => {
                for (v, k) in self.vh.iter_mut().zip(kick_hat) {
                    *v += k;
                }
                self.prop.full.apply(&mut self.uh, &mut self.vh);
            }
        }
        self.step_index += 1;
        if self.uh.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::BlowUp { step: self.step_index });
        }
        Ok(())
    }

    /// Step driven by `stream`, using spectral increments when `sigma` is
    /// constant.
    pub fn advance(&mut self, stream: &mut NoiseStream) -> Result<()> {
        let step = self.step_index as u64;
        let dt = self.grid.dt();
        if self.sigma.is_constant() {
            let c = self.sigma.eval(1.0);
            let mut hat = stream.spectral_increment_at(step, dt);
            for z in hat.iter_mut() {
                *z *= c;
            }
            self.step_spectral(&hat)
        } else {
            let inc = stream.increment_at(step, dt);
            self.step(&inc)
        }
    }
}

/// One integrator step from physical state: FFT in, step, FFT out.
pub fn step_trig(
    state: &PathState,
    params: &ModelParams,
    grid: &GridSpec,
    placement: KickPlacement,
    increment: &NoiseIncrement,
) -> Result<PathState> {
    let mut it = Integrator::from_state(params, grid, placement, state);
    it.step(increment)?;
    Ok(it.state())
}

fn checkpoint_steps(grid: &GridSpec, horizon: f64, checkpoints: &[f64]) -> Result<Vec<usize>> {
    checkpoints
        .iter()
        .map(|&t| {
            if !(t >= 0.0 && t <= horizon * (1.0 + 1e-12)) {
                return Err(Error::validation("checkpoints", format!("time {t} outside [0, {horizon}]")));
            }
            grid.steps_to(t)
                .ok_or_else(|| Error::validation("checkpoints", format!("time {t} is not a multiple of dt = {}", grid.dt())))
        })
        .collect()
}

/// Runs one replica to the last checkpoint and returns `(t, u(t))` at each.
pub fn solve_path(
    params: &ModelParams,
    grid: &GridSpec,
    plan: &NoisePlan,
    placement: KickPlacement,
    checkpoints: &[f64],
    replica: u64,
) -> Result<Vec<(f64, Vec<f64>)>> {
    let steps = checkpoint_steps(grid, params.horizon, checkpoints)?;
    let mut stream = plan.stream(replica);
    let mut it = Integrator::new(params, grid, placement);
    let mut order: Vec<usize> = (0..steps.len()).collect();
    order.sort_by_key(|&i| steps[i]);
    let mut out = vec![(0.0, Vec::new()); steps.len()];
    for i in order {
        while it.step_index() < steps[i] {
            it.advance(&mut stream)?;
        }
        out[i] = (checkpoints[i], it.u());
    }
    Ok(out)
}

/// Picard iterates at the horizon on one frozen noise path.
#[derive(Debug, Clone)]
pub struct PicardRun {
    /// `iterates[k]` is `u_k(T)`; `iterates[0]` is the field of ones.
    pub iterates: Vec<Vec<f64>>,
}

impl PicardRun {
    /// Root-mean-square cell differences `|u_{k+1}(T) - u_k(T)|`.
    pub fn differences(&self) -> Vec<f64> {
        self.iterates
            .windows(2)
            .map(|w| {
                let s: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| (a - b) * (a - b)).sum();
                (s / w[0].len() as f64).sqrt()
            })
            .collect()
    }
}

/// `u_{k+1} = 1 + int G sigma(u_k) dW` on stored increments. Each iteration
/// reruns the integrator with kicks `sigma(u_k(t_m)) dW_m`; the stored
/// increments and one path of `u_k` must fit in `memory_budget` bytes.
pub fn picard_solve(
    params: &ModelParams,
    grid: &GridSpec,
    plan: &NoisePlan,
    placement: KickPlacement,
    n_iter: usize,
    replica: u64,
    memory_budget: usize,
) -> Result<PicardRun> {
    let steps = grid
        .steps_to(params.horizon)
        .ok_or_else(|| Error::validation("model.horizon", "must be a multiple of dt"))?;
    let required = 2 * steps * grid.cells() * std::mem::size_of::<f64>();
    if required > memory_budget {
        return Err(Error::MemoryBudget {
            required,
            budget: memory_budget,
        });
    }
    let mut iterates = vec![vec![1.0; grid.cells()]];
    if n_iter == 0 {
        return Ok(PicardRun { iterates });
    }
    let mut stream = plan.stream(replica);
    let increments: Vec<NoiseIncrement> = (0..steps as u64).map(|m| stream.increment_at(m, grid.dt())).collect();
    let mut previous: Vec<Vec<f64>> = vec![vec![1.0; grid.cells()]; steps];
    let prop = Propagator::new(grid);
    for _ in 0..n_iter {
        let mut it = Integrator::with_propagator(params, &prop, placement, &PathState::flat(grid));
        let mut path = Vec::with_capacity(steps);
        for (m, inc) in increments.iter().enumerate() {
            path.push(it.u());
            let kick: Vec<f64> = previous[m]
                .iter()
                .zip(&inc.values)
                .map(|(&x, &w)| params.sigma.eval(x) * w)
                .collect();
            it.step_with_forcing(&kick)?;
        }
        iterates.push(it.u());
        previous = path;
    }
    Ok(PicardRun { iterates })
}

/// Malliavin derivative `D_{s,y} u(T, .)` along one replica.
#[derive(Debug, Clone)]
pub struct MalliavinField {
    pub d: Vec<f64>,
    /// `u(s, y)` on the same path.
    pub u_at_source: f64,
}

/// Co-simulates `u` and `D_{s,y} u`: the derivative starts at time `s` as a
/// free wave with velocity `sigma(u(s, y)) / h^2` in cell `y` and then
/// receives kicks `sigma'(u) D dW` from the same increments as `u`.
pub fn malliavin_path(
    params: &ModelParams,
    grid: &GridSpec,
    plan: &NoisePlan,
    placement: KickPlacement,
    source_time: f64,
    source_cell: [usize; 2],
    replica: u64,
) -> Result<MalliavinField> {
    let slope = params
        .sigma
        .derivative()
        .ok_or_else(|| Error::Unsupported("Malliavin co-simulation needs constant, linear or affine sigma".into()))?;
    let n = grid.n();
    if source_cell[0] >= n || source_cell[1] >= n {
        return Err(Error::validation("source_cell", "outside the grid"));
    }
    let total = grid
        .steps_to(params.horizon)
        .ok_or_else(|| Error::validation("model.horizon", "must be a multiple of dt"))?;
    let start = grid
        .steps_to(source_time)
        .ok_or_else(|| Error::validation("source_time", "must be a multiple of dt"))?;
    let mut stream = plan.stream(replica);
    let prop = Propagator::new(grid);
    let mut u_it = Integrator::with_propagator(params, &prop, placement, &PathState::flat(grid));
    while u_it.step_index() < start.min(total) {
        u_it.advance(&mut stream)?;
    }
    let u_now = u_it.u();
    let src = source_cell[0] * n + source_cell[1];
    let u_at_source = u_now[src];
    if start >= total {
        return Ok(MalliavinField {
            d: vec![0.0; grid.cells()],
            u_at_source,
        });
    }
    let h = grid.h();
    let mut init = PathState {
        u: vec![0.0; grid.cells()],
        v: vec![0.0; grid.cells()],
        time: source_time,
        step_index: start,
    };
    init.v[src] = params.sigma.eval(u_at_source) / (h * h);
    let linear = ModelParams {
        sigma: SigmaSpec::Linear,
        ..params.clone()
    };
    // sigma' is constant for the supported cases, so u itself is not needed
    // past the source time
    let mut d_it = Integrator::with_propagator(&linear, &prop, placement, &init);
    for m in start..total {
        let inc = stream.increment_at(m as u64, grid.dt());
        let kick: Vec<f64> = d_it.u().iter().zip(&inc.values).map(|(&d, &w)| slope * d * w).collect();
        d_it.step_with_forcing(&kick)?;
    }
    Ok(MalliavinField {
        d: d_it.u(),
        u_at_source,
    })
}

/// Upper constants of the Picard moment and derivative bounds:
/// `kappa_{p,t} = |sigma(0)| + L (sqrt 2 + sqrt p C t^{(3-beta)/2} |sigma(0)|) exp(p C t^{2-beta} L^2)`
/// and `C_{beta,p,t,L} = 1 + sqrt(p) L C t^{1/q-1/2} + p C L^2 t^{2/q-1}
/// + sum_{k>=3} (p C L^2)^{k/2} t^{k(1/q-1/2)} / sqrt((k-2)!)`, with `C` the
/// caller's choice of the generic constant `c_star`.
pub fn picard_moment_constants(beta: Beta, p: f64, t: f64, lipschitz: f64, c_star: f64, sigma0: f64) -> Result<(f64, f64)> {
    if !(p >= 2.0) {
        return Err(Error::domain(format!("p must be at least 2, got {p}")));
    }
    if !(t >= 0.0 && lipschitz >= 0.0 && c_star > 0.0) {
        return Err(Error::domain("need t >= 0, L >= 0 and c_star > 0"));
    }
    let b = beta.value();
    let q = beta.q();
    let s0 = sigma0.abs();
    let kappa = s0
        + lipschitz
            * (2f64.sqrt() + p.sqrt() * c_star * t.powf((3.0 - b) / 2.0) * s0)
            * (p * c_star * t.powf(2.0 - b) * lipschitz * lipschitz).exp();
    let x = p * c_star * lipschitz * lipschitz;
    let e = 1.0 / q - 0.5;
    let mut c = 1.0 + p.sqrt() * lipschitz * c_star * t.powf(e) + x * t.powf(2.0 / q - 1.0);
    // term_k = (x^{1/2} t^e)^k / sqrt((k-2)!), built up in logs
    let ln_base = 0.5 * x.ln() + e * t.ln();
    let mut ln_fact = 0.0;
    for k in 3usize.. {
        ln_fact += ((k - 2) as f64).ln();
        let term = (k as f64 * ln_base - 0.5 * ln_fact).exp();
        if !term.is_finite() || x == 0.0 || t == 0.0 {
            break;
        }
        c += term;
        if term < 1e-15 * c && k as f64 > 2.0 * (x.sqrt() * t.powf(e)).powi(2) + 3.0 {
            break;
        }
    }
    Ok((kappa, c))
}

/// Discrete free-wave response to a unit velocity impulse in one cell,
/// `G_t` as seen by the integrator; used to compare derivative fields.
pub fn discrete_green(grid: &GridSpec, t: f64, source_cell: [usize; 2]) -> Vec<f64> {
    let n = grid.n();
    let rot = Rotation::new(grid, t);
    let h = grid.h();
    let mut fft = Fft2::new(n);
    let mut data = vec![Complex64::default(); n * n];
    let (i0, j0) = (source_cell[0] as f64, source_cell[1] as f64);
    for i in 0..n {
        for j in 0..n {
            let phase = -2.0 * PI * (i as f64 * i0 + j as f64 * j0) / n as f64;
            data[i * n + j] = Complex64::from_polar(rot.sinc[i * n + j] / (h * h), phase);
        }
    }
    fft.inverse(&mut data);
    data.iter().map(|z| z.re / (n * n) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseMethod;
    use approx::assert_relative_eq;

    fn beta1() -> Beta {
        Beta::new(1.0).unwrap()
    }

    fn additive(c: f64, horizon: f64) -> ModelParams {
        ModelParams::new(beta1(), SigmaSpec::Constant { c }, 1.0, horizon).unwrap()
    }

    #[test]
    fn model_validation() {
        assert!(ModelParams::new(beta1(), SigmaSpec::Constant { c: 0.0 }, 1.0, 1.0).is_err());
        assert!(ModelParams::new(beta1(), SigmaSpec::Affine { a: 1.0, b: -1.0 }, 1.0, 1.0).is_err());
        assert!(ModelParams::new(beta1(), SigmaSpec::Affine { a: 0.0, b: 2.0 }, 1.0, 1.0).is_err());
        assert!(ModelParams::new(beta1(), SigmaSpec::SineShifted { c0: 2.0 }, 1.0, 1.0).is_ok());
        let t = SigmaSpec::Table {
            knots: vec![[0.0, 1.0], [1.0, 2.0], [3.0, 2.5]],
        };
        assert_eq!(t.eval(-1.0), 1.0);
        assert_eq!(t.eval(2.0), 2.25);
        assert_eq!(t.lipschitz(), 1.0);
        let toml_text = "kind = \"sine-shifted\"\nc0 = 2.0\n";
        let s: SigmaSpec = toml::from_str(toml_text).unwrap();
        assert_eq!(s, SigmaSpec::SineShifted { c0: 2.0 });
    }

    #[test]
    fn zero_forcing_keeps_flat_state() {
        let g = GridSpec::new(2.0, 16, 0.05).unwrap();
        let params = additive(1.0, 1.0);
        let mut it = Integrator::new(&params, &g, KickPlacement::Midpoint);
        for _ in 0..20 {
            it.step_with_forcing(&vec![0.0; g.cells()]).unwrap();
        }
        for x in it.u() {
            assert!((x - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn spectral_and_physical_paths_agree() {
        let g = GridSpec::new(2.0, 16, 0.05).unwrap();
        let params = additive(1.5, 0.5);
        let plan = NoisePlan::new(g, beta1(), NoiseMethod::CirculantEmbedding, 3).unwrap();
        let fast = solve_path(&params, &g, &plan, KickPlacement::Midpoint, &[0.5], 2).unwrap();
        let mut stream = plan.stream(2);
        let mut state = PathState::flat(&g);
        for m in 0..10 {
            let inc = stream.increment_at(m, g.dt());
            state = step_trig(&state, &params, &g, KickPlacement::Midpoint, &inc).unwrap();
        }
        for (a, b) in fast[0].1.iter().zip(&state.u) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn checkpoint_zero_is_flat_and_runs_repeat() {
        let g = GridSpec::new(2.0, 16, 0.05).unwrap();
        let params = ModelParams::new(beta1(), SigmaSpec::SineShifted { c0: 2.0 }, 1.0, 0.5).unwrap();
        let plan = NoisePlan::new(g, beta1(), NoiseMethod::CirculantEmbedding, 3).unwrap();
        let a = solve_path(&params, &g, &plan, KickPlacement::Midpoint, &[0.0, 0.25, 0.5], 7).unwrap();
        assert!(a[0].1.iter().all(|&x| (x - 1.0).abs() < 1e-14));
        let b = solve_path(&params, &g, &plan, KickPlacement::Midpoint, &[0.5, 0.0], 7).unwrap();
        assert_eq!(a[2].1, b[0].1);
        assert!(solve_path(&params, &g, &plan, KickPlacement::Midpoint, &[0.33], 7).is_err());
        assert!(solve_path(&params, &g, &plan, KickPlacement::Midpoint, &[0.6], 7).is_err());
    }

    fn forced_error(n_steps: usize) -> f64 {
        // u_tt = Lap u + f, u(0) = 1, u_t(0) = 0, f = cos(pi x / 2)
        let (a, horizon) = (2.0, 1.0);
        let n = 32;
        let dt = horizon / n_steps as f64;
        let g = GridSpec::new(a, n, dt).unwrap();
        let params = additive(1.0, horizon);
        let f: Vec<f64> = (0..n * n).map(|idx| (PI * g.center(idx / n) / 2.0).cos()).collect();
        let mut it = Integrator::new(&params, &g, KickPlacement::Left);
        let kick: Vec<f64> = f.iter().map(|v| v * dt).collect();
        for _ in 0..n_steps {
            it.step_with_forcing(&kick).unwrap();
        }
        let k = PI / 2.0;
        let amp = (1.0 - (k * horizon).cos()) / (k * k);
        it.u()
            .iter()
            .zip(&f)
            .map(|(u, fx)| (u - 1.0 - amp * fx).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn deterministic_forcing_converges() {
        let e1 = forced_error(20);
        let e2 = forced_error(40);
        let e3 = forced_error(80);
        assert!(e1 > e2 && e2 > e3);
        assert!(e1 / e2 > 1.8 && e2 / e3 > 1.8, "{e1} {e2} {e3}");
    }

    #[test]
    fn picard_fixed_points() {
        let g = GridSpec::new(2.0, 16, 0.05).unwrap();
        let plan = NoisePlan::new(g, beta1(), NoiseMethod::CirculantEmbedding, 11).unwrap();
        let add = additive(2.0, 0.5);
        let run = picard_solve(&add, &g, &plan, KickPlacement::Midpoint, 3, 0, 1 << 30).unwrap();
        assert!(run.iterates[0].iter().all(|&x| x == 1.0));
        assert_eq!(run.iterates[1], run.iterates[2]);
        let lin = ModelParams::new(beta1(), SigmaSpec::Linear, 1.0, 0.5).unwrap();
        let run = picard_solve(&lin, &g, &plan, KickPlacement::Midpoint, 12, 0, 1 << 30).unwrap();
        let last = run.iterates.last().unwrap();
        let direct = solve_path(&lin, &g, &plan, KickPlacement::Midpoint, &[0.5], 0).unwrap();
        for (a, b) in last.iter().zip(&direct[0].1) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!(matches!(
            picard_solve(&lin, &g, &plan, KickPlacement::Midpoint, 2, 0, 1000),
            Err(Error::MemoryBudget { .. })
        ));
    }

    #[test]
    fn malliavin_additive_is_discrete_green() {
        let g = GridSpec::new(2.0, 32, 0.05).unwrap();
        let plan = NoisePlan::new(g, beta1(), NoiseMethod::CirculantEmbedding, 4).unwrap();
        let params = additive(1.5, 1.0);
        let m = malliavin_path(&params, &g, &plan, KickPlacement::Midpoint, 0.25, [16, 16], 0).unwrap();
        let green = discrete_green(&g, 0.75, [16, 16]);
        for (a, b) in m.d.iter().zip(&green) {
            assert!((a - 1.5 * b).abs() < 1e-10);
        }
        let late = malliavin_path(&params, &g, &plan, KickPlacement::Midpoint, 1.0, [16, 16], 0).unwrap();
        assert!(late.d.iter().all(|&x| x == 0.0));
        let sine = ModelParams::new(beta1(), SigmaSpec::SineShifted { c0: 2.0 }, 1.0, 1.0).unwrap();
        assert!(matches!(
            malliavin_path(&sine, &g, &plan, KickPlacement::Midpoint, 0.25, [16, 16], 0),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn moment_constants_structure() {
        let beta = beta1();
        let (k, c) = picard_moment_constants(beta, 2.0, 1.0, 1e-12, 1.0, 3.0).unwrap();
        assert_relative_eq!(k, 3.0, max_relative = 1e-9);
        assert_relative_eq!(c, 1.0, max_relative = 1e-9);
        let mut prev = (0.0, 0.0);
        for i in 0..=20 {
            let t = 0.1 * i as f64;
            let (k, c) = picard_moment_constants(beta, 4.0, t, 2.0, 0.5, 1.0).unwrap();
            assert!(k >= prev.0 && c >= prev.1);
            prev = (k, c);
        }
        let (k, c) = picard_moment_constants(beta, 8.0, 2.0, 5.0, 1.0, 1.0).unwrap();
        assert!(k.is_finite() && c.is_finite() && c > 1.0);
    }
}
