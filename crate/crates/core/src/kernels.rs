//! Kernel functionals of the 2D wave propagator
//! `G_t(x) = (2 pi)^-1 (t^2 - |x|^2)^-1/2` on `|x| < t`.
//!
//! Every singular integral is split at its algebraic endpoints and handed to
//! Gauss-Jacobi rules carrying the endpoint exponents.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{
    gauss_legendre, graded_jacobi, graded_pieces, integrate_pieces, jacobi_adaptive, kronrod_adaptive, Endpoint,
    Estimate,
};
use crate::specfun::{beta_fn, c_beta, hyp2f1, hyp2f1_split, j1_unchecked, Beta, QuadratureBudget};

/// Relative width of the band around a regime boundary that is treated as
/// the boundary itself.
pub const BOUNDARY_EPS: f64 = 1e-9;

pub fn green(t: f64, x: [f64; 2]) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::domain(format!("green needs t > 0, got {t}")));
    }
    let r2 = x[0] * x[0] + x[1] * x[1];
    if r2 >= t * t {
        return Ok(0.0);
    }
    Ok(1.0 / (2.0 * PI * (t * t - r2).sqrt()))
}

fn check_power(p: f64, t: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("power mass needs p in (0, 1), got {p}")));
    }
    if !(t > 0.0) {
        return Err(Error::domain(format!("power mass needs t > 0, got {t}")));
    }
    Ok(())
}

/// Closed form of `int G_t^{2p}`.
pub fn green_power_mass(p: f64, t: f64) -> Result<f64> {
    check_power(p, t)?;
    Ok((2.0 * PI).powf(1.0 - 2.0 * p) * t.powf(2.0 - 2.0 * p) / (2.0 - 2.0 * p))
}

/// `int G_t^{2p}` by radial Gauss-Jacobi quadrature, independent of the
/// closed form.
pub fn green_power_mass_quadrature(p: f64, t: f64, budget: &QuadratureBudget) -> Result<Estimate> {
    check_power(p, t)?;
    let norm = (2.0 * PI).powf(-2.0 * p) * 2.0 * PI;
    let est = jacobi_adaptive(0.0, t, -p, 0.0, budget, |r| r * (t + r).powf(-p))?;
    Ok(est.scale(norm))
}

/// Angle subtended inside `B_R` by the circle of radius `r` about a point at
/// distance `d` from the origin.
fn arc_inside(r: f64, d: f64, radius: f64) -> f64 {
    if r <= 0.0 {
        return if d < radius { 2.0 * PI } else { 0.0 };
    }
    if r + d <= radius {
        return 2.0 * PI;
    }
    if r >= radius + d || r <= d - radius {
        return 0.0;
    }
    let c = ((r * r + d * d - radius * radius) / (2.0 * r * d)).clamp(-1.0, 1.0);
    2.0 * c.acos()
}

/// Ball-averaged propagator `phi = int_{B_R} G_{t-s}(x - y) dx`.
pub fn varphi(t: f64, radius: f64, s: f64, y: [f64; 2]) -> Result<f64> {
    if !(s >= 0.0 && s < t) {
        return Err(Error::domain(format!("varphi needs 0 <= s < t, got s={s}, t={t}")));
    }
    if !(radius > 0.0) {
        return Err(Error::domain("varphi needs a positive radius"));
    }
    let tau = t - s;
    let d = (y[0] * y[0] + y[1] * y[1]).sqrt();
    if d >= radius + tau {
        return Ok(0.0);
    }
    if d == 0.0 {
        let m = tau.min(radius);
        return Ok(tau - (tau * tau - m * m).max(0.0).sqrt());
    }
    // After r = tau sin(theta) the weight (tau^2 - r^2)^{-1/2} disappears;
    // split at the angles where the arc fraction has square-root kinks.
    let mut cuts = vec![0.0, std::f64::consts::FRAC_PI_2];
    for r in [(radius - d).abs(), radius + d] {
        if r < tau {
            cuts.push((r / tau).asin());
        }
    }
    cuts.sort_by(f64::total_cmp);
    let rule = gauss_legendre(24);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi - lo <= 0.0 {
            continue;
        }
        // cosine map clusters nodes at both kinks
        total += rule.integrate(0.0, PI, |u| {
            let theta = lo + 0.5 * (hi - lo) * (1.0 - u.cos());
            let jac = 0.5 * (hi - lo) * u.sin();
            let r = tau * theta.sin();
            r * arc_inside(r, d, radius) * jac
        });
    }
    Ok((total / (2.0 * PI)).clamp(0.0, tau))
}

/// `int_r^inf rho^{b-4} min(ta, R/rho) min(tb, R/rho) d rho`, which bounds the
/// sinc-product tail once `J1(rho)^2 <= 0.7 / rho` is used.
pub(crate) fn sinc_tail_mass(r: f64, b: f64, radius: f64, ta: f64, tb: f64) -> f64 {
    let (hi_t, lo_t) = if ta >= tb { (ta, tb) } else { (tb, ta) };
    if lo_t <= 0.0 {
        return 0.0;
    }
    let b1 = radius / hi_t;
    let b2 = radius / lo_t;
    let seg = |p: f64, x: f64, y: f64| -> f64 {
        if y <= x {
            0.0
        } else if y.is_infinite() {
            -x.powf(p + 1.0) / (p + 1.0)
        } else {
            (y.powf(p + 1.0) - x.powf(p + 1.0)) / (p + 1.0)
        }
    };
    let a0 = r;
    let mut sum = 0.0;
    sum += hi_t * lo_t * seg(b - 4.0, a0, b1.max(a0));
    sum += radius * lo_t * seg(b - 5.0, b1.max(a0), b2.max(a0));
    sum += radius * radius * seg(b - 6.0, b2.max(a0), f64::INFINITY);
    sum
}

/// `int_0^inf J1(rho)^2 rho^{b-3} h(rho) d rho` for a bounded weight `h`,
/// truncated where `tail(r)` certifies the remainder is negligible.
fn bessel_radial<H, T>(b: f64, period: f64, budget: &QuadratureBudget, h: H, tail: T) -> Result<Estimate>
where
    H: Fn(f64) -> f64,
    T: Fn(f64) -> f64,
{
    let head = jacobi_adaptive(0.0, 1.0, 0.0, b - 1.0, budget, |r| {
        let j = j1_unchecked(r) / r;
        j * j * h(r)
    })?;
    let integrand = |r: f64| {
        let j = j1_unchecked(r);
        j * j * r.powf(b - 3.0) * h(r)
    };
    let width = period.min(PI);
    let mut lo = 1.0;
    let mut hi = 16.0f64.max(8.0 * period);
    let mut total = head;
    loop {
        let panels = ((hi - lo) / width).ceil() as usize;
        total = total + kronrod_adaptive(lo, hi, panels, budget, integrand)?;
        let target = 0.25 * budget.abs_tol.max(budget.rel_tol * total.value.abs());
        let t = tail(hi);
        if t <= target || hi > 1e7 {
            return Ok(Estimate::new(total.value, total.error + t));
        }
        lo = hi;
        hi *= 2.0;
    }
}

/// Normalised covariance functional of the ball averages,
/// `c_beta int [2 pi J1(|xi|)/|xi|]^2 S_1 S_2 |xi|^{beta-2} d xi`
/// with `S_i = sin((t_i - s)|xi|/R) / (|xi|/R)`.
pub fn psi_r(
    t1: f64,
    t2: f64,
    s: f64,
    radius: f64,
    beta: Beta,
    budget: &QuadratureBudget,
) -> Result<Estimate> {
    if !(s >= 0.0 && s <= t1.min(t2)) {
        return Err(Error::domain(format!(
            "psi_r needs 0 <= s <= min(t1, t2), got s={s}, t1={t1}, t2={t2}"
        )));
    }
    if !(radius > 0.0) {
        return Err(Error::domain("psi_r needs a positive radius"));
    }
    let (ta, tb) = (t1 - s, t2 - s);
    if ta == 0.0 || tb == 0.0 {
        return Ok(Estimate::exact(0.0));
    }
    let b = beta.value();
    let sinc = |tau: f64, r: f64| radius * (tau * r / radius).sin() / r;
    let period = 2.0 * PI * radius / ta.max(tb);
    riesz_radial(
        beta,
        period,
        budget,
        |r| sinc(ta, r) * sinc(tb, r),
        |r| sinc_tail_mass(r, b, radius, ta, tb),
    )
}

/// Monte Carlo estimate of `R^{beta-4} int int phi_1(y) phi_2(z) |y - z|^-beta`,
/// the definition of [`psi_r`] before Fourier transformation. The offset
/// `z - y` is drawn with radial density `rho^{1-beta}` so the weight is bounded.
pub fn psi_r_monte_carlo(
    t1: f64,
    t2: f64,
    s: f64,
    radius: f64,
    beta: Beta,
    samples: usize,
    seed: u64,
) -> Result<Estimate> {
    use rand::{Rng, SeedableRng};
    if !(s >= 0.0 && s < t1.min(t2)) || !(radius > 0.0) {
        return Err(Error::domain("psi_r_monte_carlo needs 0 <= s < min(t1, t2) and R > 0"));
    }
    if samples < 2 {
        return Err(Error::TooFewSamples { got: samples, need: 2 });
    }
    let b = beta.value();
    let reach = radius + (t1.max(t2) - s);
    let weight = PI * reach * reach * 2.0 * PI * (2.0 * reach).powf(2.0 - b) / (2.0 - b);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..samples {
        let ry = reach * rng.random::<f64>().sqrt();
        let ay = 2.0 * PI * rng.random::<f64>();
        let y = [ry * ay.cos(), ry * ay.sin()];
        let rho = 2.0 * reach * rng.random::<f64>().powf(1.0 / (2.0 - b));
        let az = 2.0 * PI * rng.random::<f64>();
        let z = [y[0] + rho * az.cos(), y[1] + rho * az.sin()];
        let v = weight * varphi(t1, radius, s, y)? * varphi(t2, radius, s, z)?;
        sum += v;
        sum2 += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(Estimate::new(mean, (var / n).sqrt()).scale(radius.powf(b - 4.0)))
}

/// `c_beta 8 pi^3 int_0^inf J1(rho)^2 rho^{b-3} h(rho) d rho`. `tail(r)` must
/// bound `int_r^inf rho^{b-4} |h(rho)| d rho`.
pub(crate) fn riesz_radial<H, T>(
    beta: Beta,
    period: f64,
    budget: &QuadratureBudget,
    h: H,
    tail: T,
) -> Result<Estimate>
where
    H: Fn(f64) -> f64,
    T: Fn(f64) -> f64,
{
    let b = beta.value();
    let norm = c_beta(beta) * 8.0 * PI.powi(3);
    Ok(bessel_radial(b, period, budget, h, |r| tail(r) * 0.7)?.scale(norm))
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.5 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("q must lie in (1/2, 1), got {q}")))
    }
}

/// A point where an integrand may be singular: position, exponent seen from
/// the piece below and from the piece above, and whether the local behaviour
/// mixes several powers.
#[derive(Debug, Clone, Copy)]
struct Break {
    at: f64,
    below: f64,
    above: f64,
    /// Grading depth for mixed behaviour, `None` for a pure power.
    mixed: Option<f64>,
}

impl Break {
    fn new(at: f64, below: f64, above: f64) -> Self {
        Self {
            at,
            below,
            above,
            mixed: None,
        }
    }

    fn mixed(at: f64, exponent: f64, depth: f64) -> Self {
        Self {
            at,
            below: exponent,
            above: exponent,
            mixed: Some(depth),
        }
    }

    fn endpoint(&self, exponent: f64, scale: f64) -> Endpoint {
        if let Some(depth) = self.mixed {
            Endpoint::mixed(exponent, scale, depth)
        } else if exponent != 0.0 {
            Endpoint::power(exponent, scale)
        } else {
            Endpoint::near(scale)
        }
    }
}

/// Integrates across consecutive breakpoints, grading each toward its
/// neighbours at the scale of the closest other breakpoint.
fn integrate_breaks<F: FnMut(f64) -> f64>(
    breaks: &[Break],
    budget: &QuadratureBudget,
    f: F,
) -> Result<Estimate> {
    let scale = |x: f64| {
        breaks
            .iter()
            .map(|b| (b.at - x).abs())
            .filter(|d| *d > 0.0)
            .fold(f64::INFINITY, f64::min)
    };
    let mut pieces = Vec::new();
    for pair in breaks.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        pieces.extend(graded_pieces(
            a.at,
            b.at,
            a.endpoint(a.above, scale(a.at)),
            b.endpoint(b.below, scale(b.at)),
        ));
    }
    integrate_pieces(&pieces, budget, f)
}

/// Inner integral over `y` of the convolution after the change of variables
/// `(x, y) = (|p|^2, |p - z|^2)`, in closed hypergeometric form.
fn inner_section(rho: f64, w: f64, s: f64, q: f64) -> f64 {
    let d = rho - w;
    // c - a and b - a without cancellation
    let c_minus_a = (s - d) * (s + d);
    if c_minus_a <= 0.0 {
        return 0.0;
    }
    let b_minus_a = 4.0 * rho * w;
    if b_minus_a < c_minus_a {
        let z = b_minus_a / c_minus_a;
        PI * c_minus_a.powf(-q) * hyp2f1(q, 0.5, 1.0, z).unwrap_or(f64::NAN)
    } else {
        let z = c_minus_a / b_minus_a;
        let z = z.min(1.0 - f64::EPSILON);
        beta_fn(0.5, 1.0 - q)
            * c_minus_a.powf(0.5 - q)
            * b_minus_a.powf(-0.5)
            * hyp2f1(0.5, 0.5, 1.5 - q, z).unwrap_or(f64::NAN)
    }
}

/// [`inner_section`] near the tangency `rho = s - w`, split as
/// `regular + |rho - (s - w)|^{1/2 - q} * singular` with both parts analytic.
fn inner_section_split(rho: f64, w: f64, s: f64, q: f64) -> (f64, f64) {
    let d = rho - w;
    let c_minus_a = (s - d) * (s + d);
    if c_minus_a <= 0.0 {
        return (0.0, 0.0);
    }
    let b_minus_a = 4.0 * rho * w;
    let e = 0.5 - q;
    if b_minus_a < c_minus_a {
        let z = b_minus_a / c_minus_a;
        let (reg, sing) = hyp2f1_split(q, 0.5, 1.0, z).unwrap_or((f64::NAN, f64::NAN));
        let k = PI * c_minus_a.powf(-q);
        (k * reg, k * sing * ((s + rho + w) / c_minus_a).powf(e))
    } else {
        let z = c_minus_a / b_minus_a;
        let (reg, sing) = hyp2f1_split(0.5, 0.5, 1.5 - q, z).unwrap_or((f64::NAN, f64::NAN));
        let k = beta_fn(0.5, 1.0 - q) * c_minus_a.powf(e) * b_minus_a.powf(-0.5);
        (k * reg, k * sing * ((rho + w + s) / b_minus_a).powf(e))
    }
}

/// Same section integral by Gauss-Jacobi in `y`; kept as an independent check
/// of the closed form.
pub fn inner_section_quadrature(rho: f64, w: f64, s: f64, q: f64, budget: &QuadratureBudget) -> Result<f64> {
    check_q(q)?;
    let a = (rho - w) * (rho - w);
    let b = (rho + w) * (rho + w);
    let c = s * s;
    if a >= c {
        return Ok(0.0);
    }
    if b <= c {
        // weight (b - y)^{-1/2} (y - a)^{-1/2}
        Ok(jacobi_adaptive(a, b, -0.5, -0.5, budget, |y| (c - y).powf(-q))?.value)
    } else {
        Ok(jacobi_adaptive(a, c, -q, -0.5, budget, |y| (b - y).powf(-0.5))?.value)
    }
}

/// Convolution `(G_t^{2q} * G_s^{2q})(z)` at `|z| = w`.
///
/// Fails with [`Error::Degenerate`] exactly on the light-cone contact
/// `t = s + w` (after ordering `t >= s`), where the value can diverge.
pub fn conv_g2q(t: f64, s: f64, w: f64, q: f64, budget: &QuadratureBudget) -> Result<Estimate> {
    check_q(q)?;
    if !(t > 0.0 && s >= 0.0 && w >= 0.0) || !(t + s + w).is_finite() {
        return Err(Error::domain(format!(
            "conv_g2q needs t > 0, s >= 0, w >= 0, got t={t}, s={s}, w={w}"
        )));
    }
    let (t, s) = if s > t { (s, t) } else { (t, s) };
    if s == 0.0 || w >= t + s {
        return Ok(Estimate::exact(0.0));
    }
    if (t - s - w).abs() <= 1e-12 * t {
        return Err(Error::Degenerate(format!(
            "convolution on the cone contact t = s + w (t={t}, s={s}, w={w})"
        )));
    }
    if t != 1.0 {
        // conv(l t, l s, l w) = l^{2 - 4q} conv(t, s, w)
        let est = conv_g2q(1.0, s / t, w / t, q, budget)?;
        return Ok(est.scale(t.powf(2.0 - 4.0 * q)));
    }
    let norm = (2.0 * PI).powf(-4.0 * q);
    if w == 0.0 {
        // radial: 2 pi int_0^s rho (t^2 - rho^2)^-q (s^2 - rho^2)^-q
        let est = graded_jacobi(
            0.0,
            s,
            Endpoint::regular(),
            Endpoint::power(-q, t - s),
            budget,
            |r| 2.0 * PI * r * (s * s - r * r).powf(-q) * (t * t - r * r).powf(-q),
        )?;
        return Ok(est.scale(norm));
    }
    let e = 0.5 - q;
    let outer = |r: f64| 2.0 * r * (t * t - r * r).powf(-q);
    // Support in rho = |p| ends at s + w or at the rim t.
    let (end, end_exp) = if s + w < t { (s + w, e) } else { (t, -q) };
    let end_scale = (t - s - w).abs();
    if w >= s {
        let start = w - s;
        let left = if start == 0.0 {
            Endpoint::power(1.0 - q, f64::INFINITY)
        } else {
            Endpoint::power(e, start)
        };
        let est = graded_jacobi(
            start,
            end,
            left,
            Endpoint::power(end_exp, end_scale.min(end - start)),
            budget,
            |r| outer(r) * inner_section(r, w, s, q),
        )?;
        return Ok(est.scale(norm));
    }
    // s > w: the section integral has a tangency at rho1 = s - w. Between the
    // points where the hypergeometric argument equals 1/2 the integrand is
    // split into its regular and singular parts.
    let rho1 = s - w;
    let rho_b = -3.0 * w + (8.0 * w * w + s * s).sqrt();
    let rho_a = (s * s - w * w).sqrt();
    let scale1 = (2.0 * w).min(t - rho1).min(rho1);
    let mut pieces = graded_pieces(0.0, rho_b, Endpoint::regular(), Endpoint::near(rho1 - rho_b));
    pieces.extend(graded_pieces(rho_b, rho1, Endpoint::near(rho_b), Endpoint::near(scale1)));
    pieces.extend(graded_pieces(rho1, rho_a, Endpoint::near(scale1), Endpoint::near(end - rho_a)));
    pieces.extend(graded_pieces(
        rho_a,
        end,
        Endpoint::near(rho_a - rho1),
        Endpoint::power(end_exp, end_scale.min(end - rho_a)),
    ));
    let regular = integrate_pieces(&pieces, budget, |r| {
        if r > rho_b && r < rho_a {
            outer(r) * inner_section_split(r, w, s, q).0
        } else {
            outer(r) * inner_section(r, w, s, q)
        }
    })?;
    let mut sing_pieces = graded_pieces(rho_b, rho1, Endpoint::near(rho_b), Endpoint::power(e, scale1));
    sing_pieces.extend(graded_pieces(
        rho1,
        rho_a,
        Endpoint::power(e, scale1),
        Endpoint::near(end - rho_a),
    ));
    let singular = integrate_pieces(&sing_pieces, budget, |r| {
        outer(r) * (r - rho1).abs().powf(e) * inner_section_split(r, w, s, q).1
    })?;
    Ok((regular + singular).scale(norm))
}

/// A bound evaluated off its regime boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeBound {
    pub value: f64,
    /// The requested point sat on a regime boundary and was nudged by
    /// [`BOUNDARY_EPS`] before evaluation.
    pub on_boundary: bool,
    /// Coordinates actually evaluated, after ordering and nudging.
    pub t: f64,
    pub s: f64,
    pub w: f64,
}

/// Nudges `w` off the degenerate equalities `w = s`, `t = s + w`,
/// `t = |s - w|`. `t >= s` is assumed.
fn nudge(t: f64, s: f64, w: f64) -> (f64, bool) {
    let scale = BOUNDARY_EPS * t.max(s + w);
    let near = |a: f64, b: f64| (a - b).abs() <= scale;
    let hit = near(w, s) || near(t, s + w) || near(t, (s - w).abs());
    if !hit {
        return (w, false);
    }
    (w * (1.0 - 1e3 * BOUNDARY_EPS) + if w == 0.0 { 1e3 * scale } else { 0.0 }, true)
}

/// Three-regime envelope for `G_t^{2q} * G_s^{2q}` at distance `w`, without
/// its implicit constant.
pub fn lemma1_bound(t: f64, s: f64, w: f64, q: f64) -> Result<RegimeBound> {
    check_q(q)?;
    if !(t > 0.0 && s >= 0.0 && w >= 0.0) {
        return Err(Error::domain("lemma1_bound needs t > 0, s >= 0, w >= 0"));
    }
    let (t, s) = if s > t { (s, t) } else { (t, s) };
    if w >= t + s {
        return Ok(RegimeBound {
            value: 0.0,
            on_boundary: false,
            t,
            s,
            w,
        });
    }
    let (w, on_boundary) = nudge(t, s, w);
    Ok(RegimeBound {
        value: lemma1_rhs(t, s, w, q),
        on_boundary,
        t,
        s,
        w,
    })
}

fn lemma1_rhs(t: f64, s: f64, w: f64, q: f64) -> f64 {
    let e = 1.0 - 2.0 * q;
    let mut v = 0.0;
    if w < s {
        v += (t * t - (s - w) * (s - w)).powf(e);
    }
    if t > s + w {
        v += (t * t - (s + w) * (s + w)).powf(e);
    }
    if (s - w).abs() < t && t < s + w {
        v += ((w + s) * (w + s) - t * t).powf(0.5 - q) * (t * t - (s - w) * (s - w)).powf(0.5 - q);
    }
    v
}

/// Result of [`lemma2_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCheck {
    pub lhs: Estimate,
    pub rhs: f64,
}

impl EnvelopeCheck {
    pub fn ratio(&self) -> f64 {
        if self.rhs == 0.0 {
            if self.lhs.value == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.lhs.value / self.rhs
        }
    }
}

/// Time-integrated convolution `int_s^t [G_{t-r}^{2q} * G_{r-s}^{2q}(z)]^delta dr`
/// against its envelope `(t-s)^{1 - delta(2q-1)} G_{t-s}(z)^{delta(2q-1)}`.
pub fn lemma2_check(
    s: f64,
    t: f64,
    z: [f64; 2],
    q: f64,
    delta: f64,
    budget: &QuadratureBudget,
) -> Result<EnvelopeCheck> {
    check_q(q)?;
    if !(s < t) {
        return Err(Error::domain(format!("lemma2_check needs s < t, got s={s}, t={t}")));
    }
    if !(delta >= 1.0 - 1e-12 && delta <= 1.0 / q + 1e-12) {
        return Err(Error::domain(format!("delta must lie in [1, 1/q], got {delta}")));
    }
    let tau = t - s;
    let w = (z[0] * z[0] + z[1] * z[1]).sqrt();
    if w >= tau {
        return Ok(EnvelopeCheck {
            lhs: Estimate::exact(0.0),
            rhs: 0.0,
        });
    }
    let g = green(tau, z)?;
    let rhs = tau.powf(1.0 - delta * (2.0 * q - 1.0)) * g.powf(delta * (2.0 * q - 1.0));

    // With r' = r - s the integrand is conv(tau - r', r', w)^delta. It touches
    // the cone contact at r' = (tau -+ w)/2 and vanishes at both ends.
    let lo_b = 0.5 * (tau - w);
    let hi_b = 0.5 * (tau + w);
    let end = delta * (2.0 - 2.0 * q);
    let conv_budget = budget.with_rel_tol(budget.rel_tol * 0.1);
    let mut failure: Option<Error> = None;
    let eval = |r: f64| -> f64 {
        // Nodes can land within rounding of a contact; step off it.
        let mut r = r;
        for c in [lo_b, hi_b] {
            let gap = 1e-10 * tau;
            if (r - c).abs() < gap {
                r = if r < c { c - gap } else { c + gap };
            }
        }
        match conv_g2q(tau - r, r, w, q, &conv_budget) {
            Ok(c) => c.value.max(0.0).powf(delta),
            Err(Error::Convergence { estimate, .. }) => estimate.max(0.0).powf(delta),
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        }
    };
    // Near a contact conv behaves like A + B |r - r_c|^e with e = 3/2 - 2q,
    // so its power mixes exponents spaced by |e|. Grade until the first
    // correction is below tolerance. At z = 0 both cones touch along the
    // whole rim and e drops to 1 - 2q.
    let e = if w > 0.0 { 1.5 - 2.0 * q } else { 1.0 - 2.0 * q };
    let contact = delta * e.min(0.0);
    let depth = budget.rel_tol.powf(1.0 / (1.0 + contact + e.abs())).min(1e-2);
    let mut breaks = vec![Break::new(0.0, 0.0, end)];
    breaks.push(Break::mixed(lo_b, contact, depth));
    if w > 0.0 {
        breaks.push(Break::mixed(hi_b, contact, depth));
    }
    breaks.push(Break::new(tau, end, 0.0));
    let total = integrate_breaks(&breaks, budget, eval)?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(EnvelopeCheck { lhs: total, rhs })
}
