//! Special functions and the analytic constants of the Riesz-driven wave model.
//!
//! Everything here is a pure function of its arguments. Quadrature-backed
//! quantities return an [`Estimate`] with an absolute error bound.

use std::f64::consts::{FRAC_PI_4, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{gauss_legendre, jacobi_adaptive, kronrod_adaptive, Estimate};

/// Riesz exponent of the spatial covariance `|x - y|^-beta`, strictly inside `(0, 2)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Beta(f64);

impl Beta {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 && value < 2.0 {
            Ok(Beta(value))
        } else {
            Err(Error::validation("beta", format!("must lie in (0, 2), got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The conjugate exponent `2 / (4 - beta)`, always in `(1/2, 1)`.
    pub fn q(self) -> f64 {
        2.0 / (4.0 - self.0)
    }
}

impl TryFrom<f64> for Beta {
    type Error = Error;
    fn try_from(value: f64) -> Result<Self> {
        Beta::new(value)
    }
}

impl From<Beta> for f64 {
    fn from(b: Beta) -> f64 {
        b.0
    }
}

/// Stopping rule for adaptive quadrature: stop once
/// `error <= max(abs_tol, rel_tol * |value|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureBudget {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_evaluations: usize,
}

impl QuadratureBudget {
    pub fn new(abs_tol: f64, rel_tol: f64, max_evaluations: usize) -> Result<Self> {
        if !(abs_tol >= 0.0 && rel_tol >= 0.0) {
            return Err(Error::validation("budget", "tolerances must be non-negative"));
        }
        if abs_tol == 0.0 && rel_tol == 0.0 {
            return Err(Error::validation(
                "budget",
                "at least one of abs_tol and rel_tol must be positive",
            ));
        }
        if max_evaluations == 0 {
            return Err(Error::validation("budget", "max_evaluations must be positive"));
        }
        Ok(Self {
            abs_tol,
            rel_tol,
            max_evaluations,
        })
    }

    pub fn satisfied(&self, value: f64, error: f64) -> bool {
        error <= self.abs_tol.max(self.rel_tol * value.abs())
    }

    pub fn with_rel_tol(self, rel_tol: f64) -> Self {
        Self { rel_tol, ..self }
    }
}

impl Default for QuadratureBudget {
    fn default() -> Self {
        Self {
            abs_tol: 1e-14,
            rel_tol: 1e-10,
            max_evaluations: 2_000_000,
        }
    }
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Gamma function on the real line (poles return infinity).
pub fn gamma(x: f64) -> f64 {
    if x == x.floor() && x <= 0.0 {
        return f64::INFINITY;
    }
    if x < 0.5 {
        return PI / ((PI * x).sin() * gamma(1.0 - x));
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    (2.0 * PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * acc
}

pub fn beta_fn(a: f64, b: f64) -> f64 {
    gamma(a) * gamma(b) / gamma(a + b)
}

fn hyp2f1_series(a: f64, b: f64, c: f64, z: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 0..10_000 {
        let k = k as f64;
        term *= (a + k) * (b + k) / ((c + k) * (k + 1.0)) * z;
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// Gauss hypergeometric function for real `z` in `[0, 1)`.
///
/// For `z > 1/2` the argument is reflected to `1 - z`, which requires
/// `c - a - b` to be a non-integer.
pub fn hyp2f1(a: f64, b: f64, c: f64, z: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&z) {
        return Err(Error::domain(format!("hyp2f1 needs z in [0, 1), got {z}")));
    }
    if z <= 0.5 {
        return Ok(hyp2f1_series(a, b, c, z));
    }
    let (regular, singular) = hyp2f1_split(a, b, c, z)?;
    Ok(regular + (1.0 - z).powf(c - a - b) * singular)
}

/// Splits `2F1(a, b; c; z) = regular + (1 - z)^{c-a-b} * singular` by the
/// connection formula at `z = 1`. Both parts are analytic at `z = 1`.
pub fn hyp2f1_split(a: f64, b: f64, c: f64, z: f64) -> Result<(f64, f64)> {
    if !(z > 0.0 && z <= 1.0) {
        return Err(Error::domain(format!("hyp2f1_split needs z in (0, 1], got {z}")));
    }
    let d = c - a - b;
    if (d - d.round()).abs() < 1e-12 {
        return Err(Error::domain("hyp2f1 reflection needs non-integer c - a - b"));
    }
    let w = 1.0 - z;
    let regular =
        gamma(c) * gamma(d) / (gamma(c - a) * gamma(c - b)) * hyp2f1_series(a, b, 1.0 - d, w);
    let singular =
        gamma(c) * gamma(-d) / (gamma(a) * gamma(b)) * hyp2f1_series(c - a, c - b, 1.0 + d, w);
    Ok((regular, singular))
}

fn j1_series(x: f64) -> f64 {
    let half = 0.5 * x;
    let h2 = half * half;
    let mut term = half;
    let mut sum = half;
    for k in 1..60 {
        let k = k as f64;
        term *= -h2 / (k * (k + 1.0));
        sum += term;
        if term.abs() < 1e-18 * sum.abs().max(1e-300) {
            break;
        }
    }
    sum
}

fn j1_miller(x: f64) -> f64 {
    // Backward recurrence J_{k-1} = (2k/x) J_k - J_{k+1}, normalised by
    // J_0 + 2 sum J_{2k} = 1.
    let mut top = (x + 40.0 + 8.0 * x.sqrt()) as usize;
    top += top % 2;
    let mut next = 0.0;
    let mut cur = 1e-300;
    let mut norm = 0.0;
    let mut j1 = 0.0;
    for k in (1..=top).rev() {
        let prev = 2.0 * k as f64 / x * cur - next;
        next = cur;
        cur = prev;
        // `cur` now holds J_{k-1}
        if k - 1 == 1 {
            j1 = cur;
        }
        if (k - 1) % 2 == 0 && k > 1 {
            norm += 2.0 * cur;
        }
        if cur.abs() > 1e250 {
            cur *= 1e-250;
            next *= 1e-250;
            norm *= 1e-250;
            j1 *= 1e-250;
        }
    }
    norm += cur;
    j1 / norm
}

fn j1_asymptotic(x: f64) -> f64 {
    // Hankel expansion with mu = 4 nu^2 = 4.
    let mut p = 0.0;
    let mut q = 0.0;
    let mut a = 1.0;
    let mut last = f64::INFINITY;
    for k in 0..200usize {
        if k > 0 {
            let m = (2 * k - 1) as f64;
            a *= (4.0 - m * m) / (8.0 * k as f64 * x);
        }
        if a.abs() > last || a.abs() < 1e-18 {
            break;
        }
        last = a.abs();
        match k % 4 {
            0 => p += a,
            1 => q += a,
            2 => p -= a,
            _ => q -= a,
        }
    }
    let chi = x - 3.0 * FRAC_PI_4;
    (2.0 / (PI * x)).sqrt() * (p * chi.cos() - q * chi.sin())
}

/// Bessel function of the first kind, order one.
pub fn bessel_j1(x: f64) -> Result<f64> {
    if !x.is_finite() || x < 0.0 {
        return Err(Error::domain(format!("bessel_j1 needs finite x >= 0, got {x}")));
    }
    Ok(j1_unchecked(x))
}

pub(crate) fn j1_unchecked(x: f64) -> f64 {
    if x <= 8.0 {
        j1_series(x)
    } else if x < 25.0 {
        j1_miller(x)
    } else {
        j1_asymptotic(x)
    }
}

/// `J1(x) = (x / pi) * int_0^pi sin^2(theta) cos(x cos(theta)) d(theta)`,
/// evaluated by composite Gauss-Legendre. Slow; used as the reference for
/// [`bessel_j1`].
pub fn bessel_j1_integral(x: f64) -> Result<f64> {
    if !x.is_finite() || x < 0.0 {
        return Err(Error::domain(format!("bessel_j1 needs finite x >= 0, got {x}")));
    }
    let panels = (x.ceil() as usize).max(4);
    let rule = gauss_legendre(20);
    let width = PI / panels as f64;
    let mut sum = 0.0;
    for i in 0..panels {
        let a = width * i as f64;
        sum += rule.integrate(a, a + width, |t| {
            let s = t.sin();
            s * s * (x * t.cos()).cos()
        });
    }
    Ok(x / PI * sum)
}

/// `Gamma(1 - beta/2) / (pi 4^{beta/2} Gamma(beta/2))`, the normalisation
/// turning the spectral density `c |xi|^{beta-2}` into the Riesz kernel.
pub fn c_beta(beta: Beta) -> f64 {
    let b = beta.value();
    gamma(1.0 - 0.5 * b) / (PI * 4f64.powf(0.5 * b) * gamma(0.5 * b))
}

/// Controls for the radial evaluation of `kappa_beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaOptions {
    /// Beyond this radius `J1^2` is replaced by its cycle average `1/(pi r)`.
    pub cutoff: f64,
    /// Width of the initial Gauss-Kronrod panels on `[1, cutoff]`.
    pub panel_width: f64,
}

impl Default for KappaOptions {
    fn default() -> Self {
        Self {
            cutoff: 200.0,
            panel_width: PI,
        }
    }
}

/// `int_{R^2} |xi|^{beta-4} J1(|xi|)^2 d xi = 2 pi int_0^inf r^{beta-3} J1(r)^2 dr`.
pub fn kappa_beta(beta: Beta, budget: &QuadratureBudget) -> Result<Estimate> {
    kappa_beta_with(beta, budget, KappaOptions::default())
}

pub fn kappa_beta_with(
    beta: Beta,
    budget: &QuadratureBudget,
    opts: KappaOptions,
) -> Result<Estimate> {
    let b = beta.value();
    if !(opts.cutoff > 1.0 && opts.panel_width > 0.0) {
        return Err(Error::validation("kappa options", "cutoff must exceed 1 and panel width be positive"));
    }
    let inner = jacobi_adaptive(0.0, 1.0, 0.0, b - 1.0, budget, |r| {
        let j = j1_unchecked(r) / r;
        j * j
    })?;
    let panels = ((opts.cutoff - 1.0) / opts.panel_width).ceil() as usize;
    let middle = kronrod_adaptive(1.0, opts.cutoff, panels, budget, |r| {
        let j = j1_unchecked(r);
        r.powf(b - 3.0) * j * j
    })
    .map_err(|e| partial_sum(e, inner.value))?;
    let rs = opts.cutoff;
    let tail = rs.powf(b - 3.0) / (PI * (3.0 - b));
    // The dropped piece is -sin(2r)/(pi r) plus O(r^-2) amplitude terms.
    let tail_bound = rs.powf(b - 4.0) / PI + rs.powf(b - 5.0);
    let total = inner + middle + Estimate::new(tail, tail_bound);
    Ok(total.scale(2.0 * PI))
}

fn partial_sum(err: Error, offset: f64) -> Error {
    match err {
        Error::Convergence {
            estimate,
            error_bound,
            evaluations,
        } => Error::Convergence {
            estimate: 2.0 * PI * (estimate + offset),
            error_bound: 2.0 * PI * error_bound,
            evaluations,
        },
        other => other,
    }
}

/// `int_{B_1} int_{B_1} |y - z|^{-beta} dy dz` through the distance density
/// of two uniform points in the unit disc.
pub fn ball_ball_riesz(beta: Beta, budget: &QuadratureBudget) -> Result<Estimate> {
    let b = beta.value();
    // lens area of two unit discs at distance 2u, halved: acos u - u sqrt(1 - u^2),
    // which behaves like (1 - u)^{3/2}; the weight absorbs one half power.
    let est = jacobi_adaptive(0.0, 1.0, 0.5, 1.0 - b, budget, |u| {
        let g = u.acos() - u * (1.0 - u * u).sqrt();
        let e = 1.0 - u;
        if e <= 0.0 {
            // limit of g / sqrt(1 - u) at u = 1
            0.0
        } else {
            g / e.sqrt()
        }
    })?;
    Ok(est.scale(4.0 * PI * 2f64.powf(2.0 - b)))
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Quasi-Monte Carlo estimate of [`ball_ball_riesz`] for validation.
///
/// The offset `z - y` is drawn with radial density proportional to
/// `r^{1-beta}` on `[0, 2]`, which absorbs the singularity exactly; the
/// estimator is then a bounded indicator. The error is the standard error
/// across `shifts` Cranley-Patterson randomisations of a 4D Halton set.
pub fn ball_ball_riesz_qmc(beta: Beta, points: usize, shifts: usize, seed: u64) -> Result<Estimate> {
    if points == 0 || shifts < 2 {
        return Err(Error::validation("qmc", "need points > 0 and at least two shifts"));
    }
    let b = beta.value();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset_mass = 2.0 * PI * 2f64.powf(2.0 - b) / (2.0 - b);
    let scale = PI * offset_mass;
    let mut estimates = Vec::with_capacity(shifts);
    for _ in 0..shifts {
        let shift: [f64; 4] = [rng.random(), rng.random(), rng.random(), rng.random()];
        let mut hits = 0usize;
        for i in 1..=points as u64 {
            let mut u = [
                radical_inverse(i, 2),
                radical_inverse(i, 3),
                radical_inverse(i, 5),
                radical_inverse(i, 7),
            ];
            for (x, s) in u.iter_mut().zip(shift) {
                *x = (*x + s).fract();
            }
            let ry = u[0].sqrt();
            let ay = 2.0 * PI * u[1];
            let rd = 2.0 * u[2].powf(1.0 / (2.0 - b));
            let ad = 2.0 * PI * u[3];
            let x = ry * ay.cos() + rd * ad.cos();
            let y = ry * ay.sin() + rd * ad.sin();
            if x * x + y * y < 1.0 {
                hits += 1;
            }
        }
        estimates.push(scale * hits as f64 / points as f64);
    }
    let m = shifts as f64;
    let mean = estimates.iter().sum::<f64>() / m;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0);
    Ok(Estimate::new(mean, (var / m).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn beta_validation() {
        assert!(Beta::new(0.0).is_err());
        assert!(Beta::new(2.0).is_err());
        assert!(Beta::new(f64::NAN).is_err());
        let b = Beta::new(1.0).unwrap();
        assert_relative_eq!(b.q(), 2.0 / 3.0);
        let parsed: std::result::Result<Beta, _> = serde_json::from_str("2.5");
        assert!(parsed.is_err());
    }

    #[test]
    fn budget_needs_a_tolerance() {
        assert!(QuadratureBudget::new(0.0, 0.0, 10).is_err());
        assert!(QuadratureBudget::new(1e-8, 0.0, 0).is_err());
        assert!(QuadratureBudget::new(-1.0, 1e-3, 10).is_err());
    }

    #[test]
    fn gamma_factorials_and_reflection() {
        let mut fact = 1.0;
        for n in 1..=15 {
            assert_relative_eq!(gamma(n as f64), fact, max_relative = 1e-13);
            fact *= n as f64;
        }
        assert_relative_eq!(gamma(0.5), PI.sqrt(), max_relative = 1e-14);
        for &x in &[0.1, 0.37, 0.75, 1.3] {
            let lhs = gamma(x) * gamma(1.0 - x);
            assert_relative_eq!(lhs, PI / (PI * x).sin(), max_relative = 1e-13);
        }
        assert!(gamma(-2.0).is_infinite());
    }

    #[test]
    fn hyp2f1_known_values() {
        // 2F1(1,1;2;z) = -ln(1-z)/z
        for &z in &[0.1f64, 0.3, 0.5] {
            let v = hyp2f1(1.0, 1.0, 2.0, z).unwrap();
            assert_relative_eq!(v, -(1.0 - z).ln() / z, max_relative = 1e-14);
        }
        // integer c - a - b cannot be reflected
        assert!(hyp2f1(1.0, 1.0, 2.0, 0.8).is_err());
        // 2F1(1/2,1/2;3/2;z^2) = asin(z)/z
        for &z in &[0.3f64, 0.8, 0.95, 0.999] {
            let v = hyp2f1(0.5, 0.5, 1.5, z * z).unwrap();
            assert_relative_eq!(v, z.asin() / z, max_relative = 1e-12);
        }
        // 2F1(a,b;b;z) = (1-z)^{-a}
        let v = hyp2f1(0.3, 0.45, 0.45, 0.9).unwrap();
        assert_relative_eq!(v, 0.1f64.powf(-0.3), max_relative = 1e-12);
    }

    #[test]
    fn j1_small_values() {
        assert_eq!(bessel_j1(0.0).unwrap(), 0.0);
        let v = bessel_j1(0.01).unwrap();
        assert!((v - 0.004_999_937_5).abs() < 1e-10);
        assert!(bessel_j1(-1.0).is_err());
        assert!(bessel_j1(f64::INFINITY).is_err());
    }

    #[test]
    fn j1_first_zero_by_bisection_of_oracle() {
        let (mut lo, mut hi) = (3.8, 3.9);
        let flo = bessel_j1_integral(lo).unwrap();
        assert!(flo * bessel_j1_integral(hi).unwrap() < 0.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if bessel_j1_integral(mid).unwrap() * flo > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((lo - 3.831_705_970_207_512).abs() < 1e-12);
    }

    #[test]
    fn j1_fast_path_matches_integral() {
        let mut worst: f64 = 0.0;
        let n = 400;
        for i in 0..=n {
            let x = 1e-6 * (1e8f64).powf(i as f64 / n as f64);
            let d = (bessel_j1(x).unwrap() - bessel_j1_integral(x).unwrap()).abs();
            worst = worst.max(d);
        }
        assert!(worst <= 1e-12, "max deviation {worst:e}");
    }

    #[test]
    fn j1_envelope() {
        for i in 0..500 {
            let x = i as f64 * 0.2;
            let j = bessel_j1(x).unwrap();
            assert!(j.abs() <= (x / 2.0).min(1.0) + 1e-15);
        }
    }

    #[test]
    fn c_beta_values() {
        assert_relative_eq!(c_beta(Beta::new(1.0).unwrap()), 1.0 / (2.0 * PI), max_relative = 1e-13);
        for &b in &[0.05, 0.5, 1.2, 1.95] {
            assert!(c_beta(Beta::new(b).unwrap()) > 0.0);
        }
    }

    /// Weber-Schafheitlin closed form of `2 pi int r^{b-3} J1^2`.
    fn kappa_closed_form(b: f64) -> f64 {
        2.0 * PI * gamma(3.0 - b) * gamma(b / 2.0)
            / (2f64.powf(3.0 - b) * gamma(2.0 - b / 2.0).powi(2) * gamma(3.0 - b / 2.0))
    }

    #[test]
    fn kappa_matches_closed_form() {
        let budget = QuadratureBudget::default();
        for &b in &[0.25, 0.5, 1.0, 1.5, 1.75] {
            let est = kappa_beta(Beta::new(b).unwrap(), &budget).unwrap();
            let exact = kappa_closed_form(b);
            assert!(
                (est.value - exact).abs() <= est.error.max(1e-12 * exact),
                "beta={b}: {} vs {exact}, bound {}",
                est.value,
                est.error
            );
        }
        assert_relative_eq!(kappa_closed_form(1.0), 8.0 / 3.0, max_relative = 1e-13);
    }

    #[test]
    fn kappa_stable_under_panel_halving() {
        let budget = QuadratureBudget::default();
        for &b in &[0.5, 1.0, 1.5] {
            let beta = Beta::new(b).unwrap();
            let coarse = kappa_beta(beta, &budget).unwrap().value;
            let fine = kappa_beta_with(
                beta,
                &budget,
                KappaOptions {
                    panel_width: PI / 2.0,
                    ..KappaOptions::default()
                },
            )
            .unwrap()
            .value;
            assert!(((coarse - fine) / coarse).abs() < 1e-6);
        }
    }

    #[test]
    fn kappa_budget_exhaustion_carries_estimate() {
        let budget = QuadratureBudget::new(0.0, 1e-15, 3_000).unwrap();
        match kappa_beta(Beta::new(1.0).unwrap(), &budget) {
            Err(Error::Convergence { estimate, .. }) => assert!(estimate.is_finite()),
            other => panic!("expected convergence failure, got {other:?}"),
        }
    }

    #[test]
    fn ball_ball_limits() {
        let budget = QuadratureBudget::default();
        let small = ball_ball_riesz(Beta::new(1e-9).unwrap(), &budget).unwrap();
        assert_relative_eq!(small.value, PI * PI, max_relative = 1e-7);
        let b15 = ball_ball_riesz(Beta::new(1.5).unwrap(), &budget).unwrap();
        assert!(b15.value.is_finite() && b15.value > 0.0);
    }

    #[test]
    fn ball_ball_qmc_agrees() {
        let budget = QuadratureBudget::default();
        for &b in &[0.5, 1.0, 1.5] {
            let beta = Beta::new(b).unwrap();
            let det = ball_ball_riesz(beta, &budget).unwrap();
            let qmc = ball_ball_riesz_qmc(beta, 20_000, 16, 7).unwrap();
            assert!((det.value - qmc.value).abs() < 4.0 * qmc.error + 1e-3 * det.value);
        }
    }

    #[test]
    fn riesz_identity() {
        let budget = QuadratureBudget::default();
        for &b in &[0.25, 0.5, 1.0, 1.5, 1.75] {
            let beta = Beta::new(b).unwrap();
            let k = kappa_beta(beta, &budget).unwrap();
            let lhs = k.scale(4.0 * PI * PI * c_beta(beta));
            let rhs = ball_ball_riesz(beta, &budget).unwrap();
            assert!(
                (lhs.value - rhs.value).abs() <= lhs.error + rhs.error + 1e-12 * rhs.value,
                "beta={b}: {} vs {}",
                lhs.value,
                rhs.value
            );
        }
        let one = ball_ball_riesz(Beta::new(1.0).unwrap(), &budget).unwrap();
        assert_relative_eq!(one.value, 16.0 * PI / 3.0, max_relative = 1e-10);
    }
}
