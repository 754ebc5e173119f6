//! Spatial averages `F_R(t)`, replica batches, their limit predictions and
//! the statistics used to compare the two.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::kernels::psi_r;
use crate::noise::{GridSpec, NoisePlan};
use crate::quadrature::{gauss_legendre, kronrod_adaptive, Estimate};
use crate::solver::{Integrator, KickPlacement, ModelParams, PathState, Propagator};
use crate::specfun::{c_beta, kappa_beta, Beta, QuadratureBudget};

/// Area of `{0 <= X <= x, 0 <= Y <= y} ∩ disc(0, r)` for `x, y >= 0`.
fn quadrant_area(x: f64, y: f64, r: f64) -> f64 {
    if x * x + y * y <= r * r {
        return x * y;
    }
    let prim = |u: f64| 0.5 * (u * (r * r - u * u).max(0.0).sqrt() + r * r * (u / r).asin());
    let xc = x.min(r);
    let knee = (r * r - y * y).max(0.0).sqrt().min(xc);
    y * knee + prim(xc) - prim(knee)
}

fn signed_quadrant(x: f64, y: f64, r: f64) -> f64 {
    x.signum() * y.signum() * quadrant_area(x.abs(), y.abs(), r)
}

/// Exact area of the rectangle `[x0, x1] x [y0, y1]` inside the disc of
/// radius `r` centred at the origin.
pub fn rect_disc_overlap(x0: f64, x1: f64, y0: f64, y1: f64, r: f64) -> f64 {
    let a = signed_quadrant(x1, y1, r) - signed_quadrant(x0, y1, r) - signed_quadrant(x1, y0, r)
        + signed_quadrant(x0, y0, r);
    a.max(0.0)
}

/// Cell weights of the disc `B_R` centred at the origin together with their
/// Fourier transform, so that `F_R` can be read off spectral state.
#[derive(Debug, Clone)]
pub struct BallWeights {
    pub radius: f64,
    pub weights: Vec<f64>,
    pub total: f64,
    hat: Vec<Complex64>,
}

impl BallWeights {
    pub fn new(grid: &GridSpec, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius <= grid.half_width()) {
            return Err(Error::validation(
                "radii",
                format!("radius {radius} must lie in (0, {}]", grid.half_width()),
            ));
        }
        let n = grid.n();
        let h = grid.h();
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            let x0 = grid.center(i) - 0.5 * h;
            if x0 > radius || x0 + h < -radius {
                continue;
            }
            for j in 0..n {
                let y0 = grid.center(j) - 0.5 * h;
                weights[i * n + j] = rect_disc_overlap(x0, x0 + h, y0, y0 + h, radius);
            }
        }
        let total = neumaier(weights.iter().copied());
        let mut hat: Vec<Complex64> = weights.iter().map(|&w| Complex64::new(w, 0.0)).collect();
        Fft2::new(n).forward(&mut hat);
        Ok(Self {
            radius,
            weights,
            total,
            hat,
        })
    }

    /// `sum_j w_j (u_j - 1)` from a physical field.
    pub fn average(&self, field: &[f64]) -> f64 {
        neumaier(self.weights.iter().zip(field).filter(|(w, _)| **w > 0.0).map(|(w, u)| w * (u - 1.0)))
    }

    /// The same, from the integrator's Fourier state.
    pub fn average_spectral(&self, integrator: &mut Integrator) -> f64 {
        integrator.project(&self.hat) - self.total
    }
}

/// `F_R(t) = int_{B_R} (u(t, x) - 1) dx` with exact cell-disc overlap weights.
pub fn spatial_average(field: &[f64], radius: f64, grid: &GridSpec, time: f64) -> Result<f64> {
    check_containment(grid, radius, time)?;
    if field.len() != grid.cells() {
        return Err(Error::validation("field", "length does not match the grid"));
    }
    Ok(BallWeights::new(grid, radius)?.average(field))
}

fn check_containment(grid: &GridSpec, radius: f64, time: f64) -> Result<()> {
    if radius + time > grid.half_width() * (1.0 + 1e-12) {
        return Err(Error::validation(
            "radii",
            format!(
                "R + t = {} exceeds the half-width {}; the light cone would wrap around",
                radius + time,
                grid.half_width()
            ),
        ));
    }
    Ok(())
}

/// Compensated sum.
pub fn neumaier<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Samples of `F_R(t)` and of the spatial mean of `sigma(u(t, .))` over a
/// contiguous range of replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaBatch {
    pub radii: Vec<f64>,
    pub times: Vec<f64>,
    pub replica_start: u64,
    pub replica_count: u64,
    /// Row-major `replica x time x radius`.
    pub samples: Vec<f64>,
    /// Row-major `replica x time`: mean of `sigma(u)` over interior cells.
    pub sigma_means: Vec<f64>,
}

impl ReplicaBatch {
    pub fn sample(&self, replica: usize, time: usize, radius: usize) -> f64 {
        self.samples[(replica * self.times.len() + time) * self.radii.len() + radius]
    }

    /// All replicas' `F_R(t)` for one `(t, R)` pair.
    pub fn column(&self, time: usize, radius: usize) -> Vec<f64> {
        (0..self.replica_count as usize).map(|r| self.sample(r, time, radius)).collect()
    }

    pub fn time_index(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&x| (x - t).abs() <= 1e-12 * t.abs().max(1.0))
            .ok_or_else(|| Error::validation("time", format!("{t} is not a checkpoint of the batch")))
    }

    pub fn radius_index(&self, r: f64) -> Result<usize> {
        self.radii
            .iter()
            .position(|&x| (x - r).abs() <= 1e-12 * r.abs().max(1.0))
            .ok_or_else(|| Error::validation("radius", format!("{r} is not a radius of the batch")))
    }

    /// Joins batches over disjoint, adjacent replica ranges. The order of the
    /// inputs does not matter.
    pub fn merge(parts: &[ReplicaBatch]) -> Result<ReplicaBatch> {
        let first = parts.first().ok_or_else(|| Error::Merge("nothing to merge".into()))?;
        let mut order: Vec<&ReplicaBatch> = parts.iter().collect();
        order.sort_by_key(|b| b.replica_start);
        for b in &order {
            if b.radii != first.radii || b.times != first.times {
                return Err(Error::Merge("batches differ in radii or checkpoint times".into()));
            }
        }
        for w in order.windows(2) {
            let end = w[0].replica_start + w[0].replica_count;
            if end > w[1].replica_start {
                return Err(Error::Merge(format!(
                    "replica ranges overlap: [{}, {}) and [{}, ..)",
                    w[0].replica_start, end, w[1].replica_start
                )));
            }
            if end < w[1].replica_start {
                return Err(Error::Merge(format!("replicas {end}..{} are missing", w[1].replica_start)));
            }
        }
        let mut out = ReplicaBatch {
            radii: first.radii.clone(),
            times: first.times.clone(),
            replica_start: order[0].replica_start,
            replica_count: 0,
            samples: Vec::new(),
            sigma_means: Vec::new(),
        };
        for b in order {
            out.replica_count += b.replica_count;
            out.samples.extend_from_slice(&b.samples);
            out.sigma_means.extend_from_slice(&b.sigma_means);
        }
        Ok(out)
    }

    /// Counts, sums and cross-product sums of all `(t, R)` observables,
    /// accumulated in replica order.
    pub fn sufficient_statistics(&self) -> SufficientStatistics {
        let k = self.times.len() * self.radii.len();
        let n = self.replica_count as usize;
        let row = |r: usize| &self.samples[r * k..(r + 1) * k];
        let sums = (0..k).map(|a| neumaier((0..n).map(|r| row(r)[a]))).collect();
        let mut cross = vec![0.0; k * k];
        for a in 0..k {
            for b in a..k {
                let s = neumaier((0..n).map(|r| row(r)[a] * row(r)[b]));
                cross[a * k + b] = s;
                cross[b * k + a] = s;
            }
        }
        SufficientStatistics {
            count: self.replica_count,
            sums,
            cross_products: cross,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStatistics {
    pub count: u64,
    /// Indexed by `time * radii + radius`.
    pub sums: Vec<f64>,
    pub cross_products: Vec<f64>,
}

/// Cells that `xi_estimate` averages over: the central square of half the
/// domain width.
fn interior_cells(grid: &GridSpec) -> Vec<usize> {
    let n = grid.n();
    let half = 0.5 * grid.half_width();
    let inside: Vec<usize> = (0..n).filter(|&i| grid.center(i).abs() <= half).collect();
    inside
        .iter()
        .flat_map(|&i| inside.iter().map(move |&j| i * n + j))
        .collect()
}

/// Runs replicas `start..start + count` and records `F_R(t)` for every
/// checkpoint and radius. Replicas are independent, so the result does not
/// depend on how rayon schedules them.
#[allow(clippy::too_many_arguments)]
pub fn simulate_batch(
    params: &ModelParams,
    grid: &GridSpec,
    plan: &NoisePlan,
    placement: KickPlacement,
    times: &[f64],
    radii: &[f64],
    start: u64,
    count: u64,
) -> Result<ReplicaBatch> {
    let t_max = times.iter().copied().fold(0.0, f64::max);
    if t_max > params.horizon * (1.0 + 1e-12) {
        return Err(Error::validation("checkpoints", "checkpoints beyond the model horizon"));
    }
    let mut steps = Vec::with_capacity(times.len());
    for &t in times {
        steps.push(
            grid.steps_to(t)
                .ok_or_else(|| Error::validation("checkpoints", format!("{t} is not a multiple of dt")))?,
        );
    }
    if steps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation("checkpoints", "must be strictly increasing"));
    }
    for &r in radii {
        check_containment(grid, r, t_max)?;
    }
    let balls: Vec<BallWeights> = radii.iter().map(|&r| BallWeights::new(grid, r)).collect::<Result<_>>()?;
    let interior = interior_cells(grid);
    let constant = params.sigma.is_constant();
    let prop = Propagator::new(grid);
    let per_replica: Vec<(Vec<f64>, Vec<f64>)> = (start..start + count)
        .into_par_iter()
        .map(|replica| {
            let mut stream = plan.stream(replica);
            let mut it = Integrator::with_propagator(params, &prop, placement, &PathState::flat(grid));
            let mut f = Vec::with_capacity(times.len() * radii.len());
            let mut xi = Vec::with_capacity(times.len());
            for &target in &steps {
                while it.step_index() < target {
                    it.advance(&mut stream)?;
                }
                f.extend(balls.iter().map(|b| b.average_spectral(&mut it)));
                if constant {
                    xi.push(params.sigma.eval(1.0));
                } else {
                    let u = it.u();
                    let s = neumaier(interior.iter().map(|&c| params.sigma.eval(u[c])));
                    xi.push(s / interior.len() as f64);
                }
            }
            Ok((f, xi))
        })
        .collect::<Result<_>>()?;
    let mut batch = ReplicaBatch {
        radii: radii.to_vec(),
        times: times.to_vec(),
        replica_start: start,
        replica_count: count,
        samples: Vec::with_capacity(per_replica.len() * times.len() * radii.len()),
        sigma_means: Vec::with_capacity(per_replica.len() * times.len()),
    };
    for (f, xi) in per_replica {
        batch.samples.extend(f);
        batch.sigma_means.extend(xi);
    }
    Ok(batch)
}

/// A value with a Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub se: f64,
}

impl McEstimate {
    /// Number of standard errors separating the estimate from `target`;
    /// infinite when the SE vanishes and the values differ.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = (self.value - target).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.se
        }
    }
}

fn mean(x: &[f64]) -> f64 {
    neumaier(x.iter().copied()) / x.len() as f64
}

/// Sample mean with its standard error.
pub fn mean_estimate(x: &[f64]) -> Result<McEstimate> {
    if x.len() < 2 {
        return Err(Error::TooFewSamples { got: x.len(), need: 2 });
    }
    let m = mean(x);
    let var = neumaier(x.iter().map(|v| (v - m) * (v - m))) / (x.len() - 1) as f64;
    Ok(McEstimate {
        value: m,
        se: (var / x.len() as f64).sqrt(),
    })
}

/// Unbiased sample variance with the large-sample standard error
/// `sqrt((m4 - s^4 (n - 3) / (n - 1)) / n)`.
pub fn variance_estimate(x: &[f64]) -> Result<McEstimate> {
    let n = x.len();
    if n < 4 {
        return Err(Error::TooFewSamples { got: n, need: 4 });
    }
    let m = mean(x);
    let s2 = neumaier(x.iter().map(|v| (v - m).powi(2))) / (n - 1) as f64;
    let m4 = neumaier(x.iter().map(|v| (v - m).powi(4))) / n as f64;
    let nf = n as f64;
    let var_s2 = ((m4 - s2 * s2 * (nf - 3.0) / (nf - 1.0)) / nf).max(0.0);
    Ok(McEstimate {
        value: s2,
        se: var_s2.sqrt(),
    })
}

/// Sample covariance of paired samples with a delta-method standard error.
pub fn covariance_estimate(x: &[f64], y: &[f64]) -> Result<McEstimate> {
    let n = x.len();
    if n < 4 || y.len() != n {
        return Err(Error::TooFewSamples { got: n.min(y.len()), need: 4 });
    }
    let (mx, my) = (mean(x), mean(y));
    let prods: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let c = neumaier(prods.iter().copied()) / (n - 1) as f64;
    let spread = neumaier(prods.iter().map(|p| (p - c) * (p - c))) / (n - 1) as f64;
    Ok(McEstimate {
        value: c,
        se: (spread / n as f64).sqrt(),
    })
}

/// Pearson correlation with the standard error `(1 - r^2) / sqrt(n - 3)`
/// from the Fisher transform.
pub fn correlation_estimate(x: &[f64], y: &[f64]) -> Result<McEstimate> {
    let n = x.len();
    if n < 5 || y.len() != n {
        return Err(Error::TooFewSamples { got: n.min(y.len()), need: 5 });
    }
    let (mx, my) = (mean(x), mean(y));
    let sxy = neumaier(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = neumaier(x.iter().map(|a| (a - mx).powi(2)));
    let syy = neumaier(y.iter().map(|b| (b - my).powi(2)));
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation of a constant sample".into()));
    }
    let r = sxy / (sxx * syy).sqrt();
    Ok(McEstimate {
        value: r,
        se: (1.0 - r * r) / (n as f64 - 3.0).sqrt(),
    })
}

/// Percentile interval of `statistic` over replica-level resamples.
pub fn bootstrap_interval<F>(n: usize, resamples: usize, level: f64, seed: u64, mut statistic: F) -> (f64, f64)
where
    F: FnMut(&[usize]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for i in idx.iter_mut() {
                *i = rng.random_range(0..n);
            }
            statistic(&idx)
        })
        .filter(|s| s.is_finite())
        .collect();
    stats.sort_by(f64::total_cmp);
    if stats.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let pick = |p: f64| stats[((p * (stats.len() - 1) as f64).round() as usize).min(stats.len() - 1)];
    let alpha = 0.5 * (1.0 - level);
    (pick(alpha), pick(1.0 - alpha))
}

/// Resamples and seed used for every bootstrap interval in reports.
pub const BOOTSTRAP_RESAMPLES: usize = 400;
const BOOTSTRAP_SEED: u64 = 0x5eed;

/// `xi(s) = E[sigma(u(s, 0))]`, averaged over interior cells and replicas.
/// The SE is taken across replicas, which are independent.
pub fn xi_estimate(batch: &ReplicaBatch, s: f64) -> Result<McEstimate> {
    let ti = batch.time_index(s)?;
    let k = batch.times.len();
    let values: Vec<f64> = (0..batch.replica_count as usize).map(|r| batch.sigma_means[r * k + ti]).collect();
    mean_estimate(&values)
}

/// `xi(s)` as a constant or as a table interpolated linearly in `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum XiProfile {
    Constant { value: f64 },
    Table { times: Vec<f64>, values: Vec<f64> },
}

impl XiProfile {
    fn validate(&self, t: f64) -> Result<()> {
        match self {
            XiProfile::Constant { value } => {
                if *value == 0.0 || !value.is_finite() {
                    return Err(Error::validation("xi", "xi(0) = sigma(1) must be finite and non-zero"));
                }
            }
            XiProfile::Table { times, values } => {
                if times.len() != values.len() || times.is_empty() {
                    return Err(Error::validation("xi", "times and values must have the same positive length"));
                }
                if times[0] != 0.0 || values[0] == 0.0 {
                    return Err(Error::validation("xi", "the table must start at s = 0 with xi(0) = sigma(1) != 0"));
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::validation("xi", "times must increase"));
                }
                if *times.last().unwrap() < t * (1.0 - 1e-12) {
                    return Err(Error::validation("xi", format!("table ends before t = {t}")));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self {
            XiProfile::Constant { value } => *value,
            XiProfile::Table { times, values } => {
                if s <= times[0] {
                    return values[0];
                }
                let i = times.partition_point(|&x| x <= s);
                if i >= times.len() {
                    return *values.last().unwrap();
                }
                let w = (s - times[i - 1]) / (times[i] - times[i - 1]);
                values[i - 1] + w * (values[i] - values[i - 1])
            }
        }
    }

    /// Table of `xi` estimates at the batch checkpoints, with `xi(0) = sigma(1)`.
    pub fn from_batch(batch: &ReplicaBatch, sigma_at_one: f64) -> Result<Self> {
        let mut times = vec![0.0];
        let mut values = vec![sigma_at_one];
        for &t in &batch.times {
            if t > 0.0 {
                times.push(t);
                values.push(xi_estimate(batch, t)?.value);
            }
        }
        Ok(XiProfile::Table { times, values })
    }
}

/// `4 pi^2 c_beta kappa_beta`, the prefactor of all limit covariances.
pub fn limit_prefactor(beta: Beta, budget: &QuadratureBudget) -> Result<Estimate> {
    Ok(kappa_beta(beta, budget)?.scale(4.0 * PI * PI * c_beta(beta)))
}

/// `4 pi^2 c_beta kappa_beta int_0^{t1 ∧ t2} (t1 - s)(t2 - s) xi(s)^2 ds`.
/// The time integral is exact for piecewise linear `xi`.
pub fn covariance_limit(beta: Beta, t1: f64, t2: f64, xi: &XiProfile, budget: &QuadratureBudget) -> Result<Estimate> {
    if !(t1 >= 0.0 && t2 >= 0.0) {
        return Err(Error::domain("times must be non-negative"));
    }
    let tm = t1.min(t2);
    xi.validate(tm)?;
    if tm == 0.0 {
        return Ok(Estimate::exact(0.0));
    }
    let pre = limit_prefactor(beta, budget)?;
    let mut knots = vec![0.0];
    if let XiProfile::Table { times, .. } = xi {
        knots.extend(times.iter().copied().filter(|&s| s > 0.0 && s < tm));
    }
    knots.push(tm);
    // degree 4 on each linear piece: three Gauss nodes are exact
    let rule = gauss_legendre(3);
    let integral: f64 = knots
        .windows(2)
        .map(|w| rule.integrate(w[0], w[1], |s| (t1 - s) * (t2 - s) * xi.eval(s).powi(2)))
        .sum();
    Ok(pre.scale(integral))
}

pub fn variance_limit(beta: Beta, t: f64, xi: &XiProfile, budget: &QuadratureBudget) -> Result<Estimate> {
    covariance_limit(beta, t, t, xi, budget)
}

fn psi_time_integral(beta: Beta, t1: f64, t2: f64, radius: f64, budget: &QuadratureBudget) -> Result<Estimate> {
    let tm = t1.min(t2);
    if tm == 0.0 {
        return Ok(Estimate::exact(0.0));
    }
    let inner = budget.with_rel_tol(budget.rel_tol * 0.1);
    let mut failure = None;
    let est = kronrod_adaptive(0.0, tm, 2, budget, |s| match psi_r(t1, t2, s, radius, beta, &inner) {
        Ok(e) => e.value,
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    // each inner value carries up to `inner.rel_tol` relative error
    est.map(|e| Estimate::new(e.value, e.error + inner.rel_tol * e.value.abs()))
}

/// Exact `Cov(F_R(t1), F_R(t2))` for `sigma ≡ c`:
/// `c^2 R^{4 - beta} int_0^{t1 ∧ t2} Psi_R(t1, t2; s) ds`.
pub fn exact_covariance_additive(
    beta: Beta,
    t1: f64,
    t2: f64,
    radius: f64,
    c: f64,
    budget: &QuadratureBudget,
) -> Result<Estimate> {
    if c == 0.0 {
        return Ok(Estimate::exact(0.0));
    }
    let scale = c * c * radius.powf(4.0 - beta.value());
    Ok(psi_time_integral(beta, t1, t2, radius, budget)?.scale(scale))
}

pub fn exact_variance_additive(beta: Beta, t: f64, radius: f64, c: f64, budget: &QuadratureBudget) -> Result<Estimate> {
    exact_covariance_additive(beta, t, t, radius, c, budget)
}

/// Exact `||F_R(t) - F_R(s)||_2` for `sigma ≡ c`.
pub fn exact_increment_additive(
    beta: Beta,
    t: f64,
    s: f64,
    radius: f64,
    c: f64,
    budget: &QuadratureBudget,
) -> Result<Estimate> {
    if t == s {
        return Ok(Estimate::exact(0.0));
    }
    let tight = budget.with_rel_tol(budget.rel_tol * 0.01);
    let vt = exact_variance_additive(beta, t, radius, c, &tight)?;
    let vs = exact_variance_additive(beta, s, radius, c, &tight)?;
    let cv = exact_covariance_additive(beta, t, s, radius, c, &tight)?;
    let var = vt.value + vs.value - 2.0 * cv.value;
    let err = vt.error + vs.error + 2.0 * cv.error;
    let value = var.max(0.0).sqrt();
    Ok(Estimate::new(value, if value > 0.0 { 0.5 * err / value } else { err.sqrt() }))
}

/// Whether samples are standardised by their own mean and deviation or by
/// known values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Standardize {
    Empirical,
    Known { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityStats {
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    pub skewness: f64,
    pub skewness_se: f64,
    pub excess_kurtosis: f64,
    pub kurtosis_se: f64,
}

/// Minimum sample size accepted by [`normality_report`].
pub const MIN_NORMALITY_SAMPLES: usize = 500;

/// Asymptotic Kolmogorov tail `P(sqrt(n) D > x)` with Stephens' small-sample
/// correction.
pub fn kolmogorov_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
        if term < 1e-16 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// KS distance to `N(0, 1)` of the standardised sample plus sample skewness
/// and excess kurtosis with their normal-theory standard errors.
pub fn normality_report(samples: &[f64], standardize: Standardize) -> Result<NormalityStats> {
    let n = samples.len();
    if n < MIN_NORMALITY_SAMPLES {
        return Err(Error::TooFewSamples {
            got: n,
            need: MIN_NORMALITY_SAMPLES,
        });
    }
    let m = mean(samples);
    let m2 = neumaier(samples.iter().map(|x| (x - m).powi(2))) / n as f64;
    if !(m2 > 0.0) || m2.sqrt() <= 1e-14 * m.abs() {
        return Err(Error::Degenerate("samples are constant".into()));
    }
    let m3 = neumaier(samples.iter().map(|x| (x - m).powi(3))) / n as f64;
    let m4 = neumaier(samples.iter().map(|x| (x - m).powi(4))) / n as f64;
    let sd = (m2 * n as f64 / (n - 1) as f64).sqrt();
    let (mu, s) = match standardize {
        Standardize::Empirical => (m, sd),
        Standardize::Known { mean, sd } => (mean, sd),
    };
    let normal = Normal::standard();
    let mut z: Vec<f64> = samples.iter().map(|x| (x - mu) / s).collect();
    z.sort_by(f64::total_cmp);
    let nf = n as f64;
    let ks = z
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / nf).max((i + 1) as f64 / nf - f)
        })
        .fold(0.0, f64::max);
    let skew_se = (6.0 * nf * (nf - 1.0) / ((nf - 2.0) * (nf + 1.0) * (nf + 3.0))).sqrt();
    let kurt_se = 2.0 * skew_se * ((nf * nf - 1.0) / ((nf - 3.0) * (nf + 5.0))).sqrt();
    Ok(NormalityStats {
        count: n,
        mean: m,
        sd,
        ks_statistic: ks,
        ks_p_value: kolmogorov_p_value(ks, n),
        skewness: m3 / m2.powf(1.5),
        skewness_se: skew_se,
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        kurtosis_se: kurt_se,
    })
}

/// Skewness and excess kurtosis of an index-selected resample.
pub fn shape_moments(x: &[f64], idx: &[usize]) -> (f64, f64) {
    let n = idx.len() as f64;
    let m = idx.iter().map(|&i| x[i]).sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &i in idx {
        let d = x[i] - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci: (f64, f64),
    /// Every distance sits at the Monte Carlo noise floor.
    pub inconclusive: bool,
}

/// Least-squares slope of `log d` against `log R`. `replicates` holds one
/// bootstrap vector of distances per resample; without them the interval is
/// the 95% t-interval of the fit.
pub fn rate_regression(radii: &[f64], distances: &[f64], replicates: &[Vec<f64>], noise_floor: f64) -> Result<RateFit> {
    if radii.len() < 4 || radii.len() != distances.len() {
        return Err(Error::validation("radii", "need at least four radii with one distance each"));
    }
    let (lo, hi) = radii.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
    if !(lo > 0.0 && hi >= 4.0 * lo) {
        return Err(Error::validation("radii", "radii must be positive and span a factor of at least 4"));
    }
    if distances.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Degenerate("distances must be positive to take logarithms".into()));
    }
    let xs: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let fit = |d: &[f64]| -> (f64, f64) {
        let ys: Vec<f64> = d.iter().map(|v| v.max(1e-300).ln()).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let slope = sxy / sxx;
        (slope, my - slope * mx)
    };
    let (slope, intercept) = fit(distances);
    let ci = if replicates.is_empty() {
        let n = xs.len();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let rss: f64 = xs
            .iter()
            .zip(distances)
            .map(|(x, d)| (d.ln() - intercept - slope * x).powi(2))
            .sum();
        let se = (rss / (n - 2) as f64 / sxx).sqrt();
        let t = statrs::distribution::StudentsT::new(0.0, 1.0, (n - 2) as f64)
            .map_err(|e| Error::domain(e.to_string()))?
            .inverse_cdf(0.975);
        (slope - t * se, slope + t * se)
    } else {
        let mut slopes: Vec<f64> = replicates.iter().map(|d| fit(d).0).filter(|s| s.is_finite()).collect();
        slopes.sort_by(f64::total_cmp);
        let pick = |p: f64| slopes[((p * (slopes.len() - 1) as f64).round() as usize).min(slopes.len() - 1)];
        (pick(0.025), pick(0.975))
    };
    Ok(RateFit {
        slope,
        intercept,
        ci,
        inconclusive: distances.iter().all(|&d| d <= noise_floor),
    })
}

/// Distance proxy `|skewness| + |excess kurtosis|` and its noise floor (two
/// normal-theory SEs of each moment) for a sample of size `n`.
pub fn moment_distance(x: &[f64], idx: &[usize]) -> f64 {
    let (s, k) = shape_moments(x, idx);
    s.abs() + k.abs()
}

pub fn moment_noise_floor(n: usize) -> f64 {
    let nf = n as f64;
    2.0 * ((6.0 / nf).sqrt() + (24.0 / nf).sqrt())
}

/// `||F_R(t) - F_R(s)||_p` with a delta-method SE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncrementMoment {
    pub value: f64,
    pub se: f64,
    pub inconclusive: bool,
}

pub fn increment_moment(batch: &ReplicaBatch, t: f64, s: f64, radius: f64, p: u32) -> Result<IncrementMoment> {
    if p != 2 && p != 4 {
        return Err(Error::validation("p", "increment moments are tabulated for p = 2 and p = 4"));
    }
    let (ti, si, ri) = (batch.time_index(t)?, batch.time_index(s)?, batch.radius_index(radius)?);
    let n = batch.replica_count as usize;
    if ti == si {
        return Ok(IncrementMoment {
            value: 0.0,
            se: 0.0,
            inconclusive: false,
        });
    }
    let powers: Vec<f64> = (0..n)
        .map(|r| (batch.sample(r, ti, ri) - batch.sample(r, si, ri)).powi(p as i32))
        .collect();
    let m = mean_estimate(&powers)?;
    let pf = p as f64;
    let value = m.value.powf(1.0 / pf);
    let se = if m.value > 0.0 { m.se * m.value.powf(1.0 / pf - 1.0) / pf } else { 0.0 };
    Ok(IncrementMoment {
        value,
        se,
        inconclusive: se > value,
    })
}

/// One `(t, R)` row of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub time: f64,
    pub radius: f64,
    pub estimate: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub prediction: f64,
    pub prediction_error: f64,
    /// `exact` for the finite-R additive formula, `limit` otherwise.
    pub prediction_kind: String,
    pub verdict: Verdict,
    pub normality: Option<NormalityStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    /// Within three standard errors (plus the quadrature bound).
    Consistent,
    Inconsistent,
    /// Not enough information to decide.
    Inconclusive,
}

fn verdict(estimate: McEstimate, prediction: Estimate) -> Verdict {
    let tol = 3.0 * estimate.se + prediction.error;
    if !(estimate.se.is_finite()) || estimate.se == 0.0 && prediction.error == 0.0 {
        return Verdict::Inconclusive;
    }
    if (estimate.value - prediction.value).abs() <= tol {
        Verdict::Consistent
    } else {
        Verdict::Inconsistent
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceRow {
    pub radius: f64,
    pub t1: f64,
    pub t2: f64,
    pub correlation: McEstimate,
    pub predicted_limit_correlation: f64,
    /// Finite-R correlation in the additive case.
    pub predicted_exact_correlation: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiRow {
    pub time: f64,
    pub estimate: McEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementRow {
    pub radius: f64,
    pub t: f64,
    pub s: f64,
    pub p: u32,
    pub moment: IncrementMoment,
    /// `moment / (R^{1/q} sqrt(t - s))`.
    pub ratio: f64,
    pub exact: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub replica_count: u64,
    pub statistics: SufficientStatistics,
    pub variances: Vec<VarianceRow>,
    pub covariances: Vec<CovarianceRow>,
    pub xi: Vec<XiRow>,
    pub increments: Vec<IncrementRow>,
    pub rate: Option<RateFit>,
    pub rate_target_slope: f64,
}

impl CltReport {
    /// Builds every table from a batch. Predictions are the finite-R exact
    /// values when `sigma` is constant and the `R -> infinity` limits
    /// otherwise.
    pub fn build(batch: &ReplicaBatch, params: &ModelParams, budget: &QuadratureBudget) -> Result<Self> {
        let beta = params.beta;
        let b = beta.value();
        let n = batch.replica_count as usize;
        let sigma1 = params.sigma.eval(1.0);
        let additive = params.sigma.is_constant();
        let xi = if additive {
            XiProfile::Constant { value: sigma1 }
        } else {
            XiProfile::from_batch(batch, sigma1)?
        };
        let mut variances = Vec::new();
        for (ti, &t) in batch.times.iter().enumerate() {
            for (ri, &r) in batch.radii.iter().enumerate() {
                let col = batch.column(ti, ri);
                let est = variance_estimate(&col)?;
                let ci = bootstrap_interval(n, BOOTSTRAP_RESAMPLES, 0.95, BOOTSTRAP_SEED, |idx| {
                    let sel: Vec<f64> = idx.iter().map(|&i| col[i]).collect();
                    variance_estimate(&sel).map(|e| e.value).unwrap_or(f64::NAN)
                });
                let (prediction, kind) = if t == 0.0 {
                    (Estimate::exact(0.0), "exact")
                } else if additive {
                    (exact_variance_additive(beta, t, r, sigma1, budget)?, "exact")
                } else {
                    (variance_limit(beta, t, &xi, budget)?.scale(r.powf(4.0 - b)), "limit")
                };
                let normality = if t > 0.0 && n >= MIN_NORMALITY_SAMPLES {
                    Some(normality_report(&col, Standardize::Empirical)?)
                } else {
                    None
                };
                variances.push(VarianceRow {
                    time: t,
                    radius: r,
                    estimate: est.value,
                    se: est.se,
                    ci,
                    prediction: prediction.value,
                    prediction_error: prediction.error,
                    prediction_kind: kind.into(),
                    verdict: if t == 0.0 { Verdict::Consistent } else { verdict(est, prediction) },
                    normality,
                });
            }
        }
        let mut covariances = Vec::new();
        for (ri, &r) in batch.radii.iter().enumerate() {
            for i in 0..batch.times.len() {
                for j in i + 1..batch.times.len() {
                    let (t1, t2) = (batch.times[i], batch.times[j]);
                    if t1 == 0.0 {
                        continue;
                    }
                    let corr = correlation_estimate(&batch.column(i, ri), &batch.column(j, ri))?;
                    let c12 = covariance_limit(beta, t1, t2, &xi, budget)?.value;
                    let c11 = variance_limit(beta, t1, &xi, budget)?.value;
                    let c22 = variance_limit(beta, t2, &xi, budget)?.value;
                    let limit = c12 / (c11 * c22).sqrt();
                    let exact = if additive {
                        let e12 = exact_covariance_additive(beta, t1, t2, r, sigma1, budget)?.value;
                        let e11 = exact_variance_additive(beta, t1, r, sigma1, budget)?.value;
                        let e22 = exact_variance_additive(beta, t2, r, sigma1, budget)?.value;
                        Some(e12 / (e11 * e22).sqrt())
                    } else {
                        None
                    };
                    covariances.push(CovarianceRow {
                        radius: r,
                        t1,
                        t2,
                        correlation: corr,
                        predicted_limit_correlation: limit,
                        predicted_exact_correlation: exact,
                        verdict: verdict(corr, Estimate::exact(limit)),
                    });
                }
            }
        }
        let xi_rows = batch
            .times
            .iter()
            .map(|&t| Ok(XiRow { time: t, estimate: xi_estimate(batch, t)? }))
            .collect::<Result<_>>()?;
        let q = beta.q();
        let mut increments = Vec::new();
        if let Some(&t_last) = batch.times.last() {
            for &r in &batch.radii {
                for &s in batch.times.iter().filter(|&&s| s < t_last) {
                    for p in [2u32, 4] {
                        let moment = increment_moment(batch, t_last, s, r, p)?;
                        let exact = if additive && p == 2 {
                            Some(exact_increment_additive(beta, t_last, s, r, sigma1, budget)?)
                        } else {
                            None
                        };
                        increments.push(IncrementRow {
                            radius: r,
                            t: t_last,
                            s,
                            p,
                            ratio: moment.value / (r.powf(1.0 / q) * (t_last - s).sqrt()),
                            moment,
                            exact,
                        });
                    }
                }
            }
        }
        let rate = rate_study(batch, batch.times.len() - 1)?;
        Ok(CltReport {
            replica_count: batch.replica_count,
            statistics: batch.sufficient_statistics(),
            variances,
            covariances,
            xi: xi_rows,
            increments,
            rate,
            rate_target_slope: -0.5 * b,
        })
    }

    /// True when any comparison could not be decided.
    pub fn inconclusive(&self) -> bool {
        self.variances.iter().any(|v| v.verdict == Verdict::Inconclusive)
            || self.rate.as_ref().is_some_and(|r| r.inconclusive)
    }

    /// One row per `(t, R)`: estimate, SE, prediction, prediction error, verdict.
    pub fn variance_csv(&self) -> String {
        let mut out = String::from("time,radius,estimate,se,ci_low,ci_high,prediction,prediction_error,prediction_kind,verdict,ks_statistic,ks_p_value,skewness,excess_kurtosis\n");
        for v in &self.variances {
            let (ks, kp, sk, ku) = v
                .normality
                .as_ref()
                .map(|s| (s.ks_statistic, s.ks_p_value, s.skewness, s.excess_kurtosis))
                .unwrap_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN));
            out += &format!(
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{},{:?},{},{},{},{}\n",
                v.time,
                v.radius,
                v.estimate,
                v.se,
                v.ci.0,
                v.ci.1,
                v.prediction,
                v.prediction_error,
                v.prediction_kind,
                v.verdict,
                ks,
                kp,
                sk,
                ku
            );
        }
        out
    }

    pub fn increment_csv(&self) -> String {
        let mut out = String::from("radius,t,s,p,moment,se,ratio,exact,exact_error\n");
        for r in &self.increments {
            let (e, ee) = r.exact.map(|e| (e.value, e.error)).unwrap_or((f64::NAN, f64::NAN));
            out += &format!(
                "{},{},{},{},{:e},{:e},{:e},{:e},{:e}\n",
                r.radius, r.t, r.s, r.p, r.moment.value, r.moment.se, r.ratio, e, ee
            );
        }
        out
    }
}

/// Rate regression over the batch radii at checkpoint `ti`, with the moment
/// distance as proxy and a replica bootstrap for the interval. `None` when
/// the radii do not meet the regression preconditions.
pub fn rate_study(batch: &ReplicaBatch, ti: usize) -> Result<Option<RateFit>> {
    let radii = &batch.radii;
    let (lo, hi) = radii.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
    if radii.len() < 4 || hi < 4.0 * lo || batch.times[ti] == 0.0 {
        return Ok(None);
    }
    let n = batch.replica_count as usize;
    let cols: Vec<Vec<f64>> = (0..radii.len()).map(|ri| batch.column(ti, ri)).collect();
    let all: Vec<usize> = (0..n).collect();
    let distances: Vec<f64> = cols.iter().map(|c| moment_distance(c, &all)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    let mut idx = vec![0usize; n];
    let replicates: Vec<Vec<f64>> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            for i in idx.iter_mut() {
                *i = rng.random_range(0..n);
            }
            cols.iter().map(|c| moment_distance(c, &idx)).collect()
        })
        .collect();
    Ok(Some(rate_regression(radii, &distances, &replicates, moment_noise_floor(n))?))
}
