//! Space-time Gaussian noise on a periodic grid: white in time, Riesz
//! covariance `|x - y|^-beta` in space.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{signed_index, Fft2};
use crate::quadrature::{gauss_jacobi, gauss_legendre};
use crate::specfun::{c_beta, Beta};

/// Periodic square `[-A, A]^2` with `n` cells per axis and time step `dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct GridSpec {
    half_width: f64,
    n: usize,
    dt: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    half_width: f64,
    n: usize,
    dt: f64,
}

impl TryFrom<RawGrid> for GridSpec {
    type Error = Error;
    fn try_from(r: RawGrid) -> Result<Self> {
        GridSpec::new(r.half_width, r.n, r.dt)
    }
}

impl From<GridSpec> for RawGrid {
    fn from(g: GridSpec) -> Self {
        RawGrid {
            half_width: g.half_width,
            n: g.n,
            dt: g.dt,
        }
    }
}

impl GridSpec {
    /// Validates the grid and the CFL condition `dt <= h / sqrt(2)`.
    pub fn new(half_width: f64, n: usize, dt: f64) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::validation("grid.half_width", format!("must be positive, got {half_width}")));
        }
        if n < 2 || n % 2 != 0 {
            return Err(Error::validation("grid.n", format!("must be a positive even integer, got {n}")));
        }
        let h = 2.0 * half_width / n as f64;
        if !(dt > 0.0) {
            return Err(Error::validation("grid.dt", format!("must be positive, got {dt}")));
        }
        if dt > h / std::f64::consts::SQRT_2 * (1.0 + 1e-12) {
            return Err(Error::validation(
                "grid.dt",
                format!("CFL violated: dt = {dt} exceeds h/sqrt(2) = {}", h / std::f64::consts::SQRT_2),
            ));
        }
        Ok(Self { half_width, n, dt })
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn h(&self) -> f64 {
        2.0 * self.half_width / self.n as f64
    }

    pub fn cells(&self) -> usize {
        self.n * self.n
    }

    /// Centre of cell `i` along one axis.
    pub fn center(&self, i: usize) -> f64 {
        -self.half_width + (i as f64 + 0.5) * self.h()
    }

    /// Index of the cell containing coordinate `x`, wrapped onto the torus.
    pub fn cell_of(&self, x: f64) -> usize {
        let k = ((x + self.half_width) / self.h()).floor() as i64;
        k.rem_euclid(self.n as i64) as usize
    }

    /// Angular frequency of FFT index `k`.
    pub fn frequency(&self, k: usize) -> f64 {
        PI * signed_index(k, self.n) as f64 / self.half_width
    }

    /// Number of whole steps of `dt` in `t`, if `t` is a multiple of `dt`.
    pub fn steps_to(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt).round();
        ((k * self.dt - t).abs() <= 1e-9 * t.abs().max(self.dt)).then_some(k as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMethod {
    /// Exact cell-averaged covariance, periodised by minimum image.
    #[default]
    CirculantEmbedding,
    /// Dual-lattice modes weighted by the spectral density `c_beta |xi|^{beta-2}`.
    SpectralTruncation,
}

/// Treatment of the divergent zero mode in spectral truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroMode {
    #[default]
    Exclude,
    /// Spectral mass of the dual cell around the origin.
    CellAverage,
}

/// Immutable sampling plan. Cheap to clone; amplitudes are shared.
#[derive(Debug, Clone)]
pub struct NoisePlan {
    grid: GridSpec,
    beta: Beta,
    method: NoiseMethod,
    zero_mode: ZeroMode,
    seed: u64,
    /// `|amplitude_k|^2` sums to the covariance at lag 0.
    amplitudes: Arc<Vec<f64>>,
    min_eigenvalue: f64,
}

impl NoisePlan {
    pub fn new(grid: GridSpec, beta: Beta, method: NoiseMethod, seed: u64) -> Result<Self> {
        Self::with_zero_mode(grid, beta, method, ZeroMode::default(), seed)
    }

    pub fn with_zero_mode(grid: GridSpec, beta: Beta, method: NoiseMethod, zero_mode: ZeroMode, seed: u64) -> Result<Self> {
        let n = grid.n();
        let (amplitudes, min_eigenvalue) = match method {
            NoiseMethod::CirculantEmbedding => {
                let table = min_image_covariance(beta, &grid);
                let mut data: Vec<Complex64> = table.iter().map(|&c| Complex64::new(c, 0.0)).collect();
                Fft2::new(n).forward(&mut data);
                let eig: Vec<f64> = data.iter().map(|z| z.re).collect();
                let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
                let max = eig.iter().copied().fold(0.0, f64::max);
                if min < -1e-10 * max {
                    return Err(Error::NotPositiveSemidefinite { min_eigenvalue: min });
                }
                let norm = 1.0 / (n * n) as f64;
                (eig.iter().map(|&l| (l.max(0.0) * norm).sqrt()).collect(), min)
            }
            NoiseMethod::SpectralTruncation => {
                let cb = c_beta(beta);
                let b = beta.value();
                let dk = PI / grid.half_width();
                let mut amp = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let (k1, k2) = (grid.frequency(i), grid.frequency(j));
                        let r = (k1 * k1 + k2 * k2).sqrt();
                        amp[i * n + j] = if r > 0.0 {
                            (cb * r.powf(b - 2.0) * dk * dk).sqrt()
                        } else {
                            match zero_mode {
                                ZeroMode::Exclude => 0.0,
                                ZeroMode::CellAverage => (cb * zero_cell_mass(b, 0.5 * dk)).sqrt(),
                            }
                        };
                    }
                }
                (amp, 0.0)
            }
        };
        Ok(Self {
            grid,
            beta,
            method,
            zero_mode,
            seed,
            amplitudes: Arc::new(amplitudes),
            min_eigenvalue,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn beta(&self) -> Beta {
        self.beta
    }

    pub fn method(&self) -> NoiseMethod {
        self.method
    }

    pub fn zero_mode(&self) -> ZeroMode {
        self.zero_mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Smallest circulant eigenvalue (0 for spectral truncation).
    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    /// Covariance of the sampled unit-time field at a cell offset.
    pub fn field_covariance(&self, offset: [i64; 2]) -> f64 {
        let n = self.grid.n();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let a = self.amplitudes[i * n + j];
                let phase = 2.0 * PI * (signed_index(i, n) * offset[0] + signed_index(j, n) * offset[1]) as f64 / n as f64;
                acc += a * a * phase.cos();
            }
        }
        acc
    }

    /// Independent increment source for one replica.
    pub fn stream(&self, replica: u64) -> NoiseStream {
        NoiseStream::new(self.clone(), replica)
    }
}

/// `int` of `|xi|^{b-2}` over the square `[-a, a]^2`.
fn zero_cell_mass(b: f64, a: f64) -> f64 {
    let rule = gauss_legendre(32);
    let ang = rule.integrate(0.0, PI / 4.0, |th| th.cos().powf(-b));
    8.0 * a.powf(b) / b * ang
}

/// Covariance of two grid cells, `h^-4 int_{C_0} int_{C_k} |y - z|^-beta`.
pub fn cell_cov(beta: Beta, grid: &GridSpec, offset: [i64; 2]) -> f64 {
    cell_cov_with(beta, grid.h(), offset, 12)
}

/// [`cell_cov`] for cell size `h` with `nodes` points per direction. After
/// integrating out the cell positions the integrand is a tent weight on
/// `[-1, 1]^2` times `|x + k|^-beta`; each unit square is handled either by
/// tensor Gauss-Legendre or, when the singularity sits on its corner, in polar
/// coordinates about that corner.
pub fn cell_cov_with(beta: Beta, h: f64, offset: [i64; 2], nodes: usize) -> f64 {
    let b = beta.value();
    // the kernel is even in each axis and symmetric under swapping them
    let (k0, k1) = (offset[0].unsigned_abs(), offset[1].unsigned_abs());
    let k = [k0.max(k1) as f64, k0.min(k1) as f64];
    let tent = |x: [f64; 2]| (1.0 - x[0].abs()) * (1.0 - x[1].abs());
    let gl = gauss_legendre(nodes);
    let radial = gauss_jacobi(nodes, 0.0, 1.0 - b).expect("valid Jacobi exponents");
    let c = [-k[0], -k[1]];
    let mut total = 0.0;
    for a0 in [-1.0f64, 0.0] {
        for a1 in [-1.0f64, 0.0] {
            let on_corner = (c[0] == a0 || c[0] == a0 + 1.0) && (c[1] == a1 || c[1] == a1 + 1.0);
            if on_corner {
                let sx = if c[0] == a0 { 1.0 } else { -1.0 };
                let sy = if c[1] == a1 { 1.0 } else { -1.0 };
                for (lo, hi, lower) in [(0.0, PI / 4.0, true), (PI / 4.0, PI / 2.0, false)] {
                    total += gl.integrate(lo, hi, |th: f64| {
                        let r_max = if lower { 1.0 / th.cos() } else { 1.0 / th.sin() };
                        let (ct, st) = (th.cos(), th.sin());
                        // weight u^{1-b} from r^{-b} r dr
                        let inner = radial.integrate(0.0, 1.0, |u| {
                            let r = u * r_max;
                            tent([c[0] + sx * r * ct, c[1] + sy * r * st])
                        });
                        r_max.powf(2.0 - b) * inner
                    });
                }
            } else {
                total += gl.integrate(a0, a0 + 1.0, |x0| {
                    gl.integrate(a1, a1 + 1.0, |x1| {
                        let d = ((x0 - c[0]).powi(2) + (x1 - c[1]).powi(2)).sqrt();
                        tent([x0, x1]) * d.powf(-b)
                    })
                });
            }
        }
    }
    h.powf(-b) * total
}

/// `cell_cov` at every minimum-image offset of the torus, row-major.
fn min_image_covariance(beta: Beta, grid: &GridSpec) -> Vec<f64> {
    let n = grid.n();
    let half = n / 2;
    let mut quarter = vec![0.0; (half + 1) * (half + 1)];
    for i in 0..=half {
        for j in 0..=i {
            let v = cell_cov(beta, grid, [i as i64, j as i64]);
            quarter[i * (half + 1) + j] = v;
            quarter[j * (half + 1) + i] = v;
        }
    }
    let mut table = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let a = signed_index(i, n).unsigned_abs() as usize;
            let b = signed_index(j, n).unsigned_abs() as usize;
            table[i * n + j] = quarter[a * (half + 1) + b];
        }
    }
    table
}

/// Cell-averaged increment of the noise over one time step, row-major
/// `n x n`, in units of noise times time^{1/2}.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseIncrement {
    pub n: usize,
    pub values: Vec<f64>,
}

/// Words reserved in the ChaCha stream for each pair of increments.
const WORDS_PER_PAIR: u128 = 1 << 32;

/// Counter-based increment source keyed by `(seed, replica, step)`. Each FFT
/// yields two independent fields (real and imaginary parts), so steps are
/// generated in pairs; any step can be produced independently of the others.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    plan: NoisePlan,
    replica: u64,
    rng: ChaCha8Rng,
    fft: Fft2,
    buf: Vec<Complex64>,
    cached: Option<(u64, Vec<f64>)>,
    /// Pair whose untransformed draws are in `buf`.
    drawn: Option<u64>,
    next_step: u64,
}

impl NoiseStream {
    pub fn new(plan: NoisePlan, replica: u64) -> Self {
        let n = plan.grid.n();
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        rng.set_stream(replica);
        Self {
            replica,
            rng,
            fft: Fft2::new(n),
            buf: vec![Complex64::default(); n * n],
            cached: None,
            drawn: None,
            next_step: 0,
            plan,
        }
    }

    pub fn replica(&self) -> u64 {
        self.replica
    }

    pub fn plan(&self) -> &NoisePlan {
        &self.plan
    }

    /// Increment for the next step, scaled to time step `dt`.
    pub fn next_increment(&mut self, dt: f64) -> NoiseIncrement {
        let step = self.next_step;
        self.next_step += 1;
        self.increment_at(step, dt)
    }

    /// Increment of step `step`, independent of the call history.
    pub fn increment_at(&mut self, step: u64, dt: f64) -> NoiseIncrement {
        let n = self.plan.grid.n();
        let scale = dt.sqrt();
        if let Some((s, values)) = self.cached.take() {
            if s == step {
                return NoiseIncrement {
                    n,
                    values: values.into_iter().map(|v| v * scale).collect(),
                };
            }
        }
        self.draw_pair(step / 2);
        self.fft.inverse(&mut self.buf);
        self.drawn = None;
        let re: Vec<f64> = self.buf.iter().map(|z| z.re).collect();
        let im: Vec<f64> = self.buf.iter().map(|z| z.im).collect();
        let (mine, other, other_step) = if step % 2 == 0 { (re, im, step + 1) } else { (im, re, step - 1) };
        self.cached = Some((other_step, other));
        NoiseIncrement {
            n,
            values: mine.into_iter().map(|v| v * scale).collect(),
        }
    }

    /// Unnormalised forward FFT of [`increment_at`](Self::increment_at),
    /// obtained from the spectral draws without transforming.
    pub fn spectral_increment_at(&mut self, step: u64, dt: f64) -> Vec<Complex64> {
        let n = self.plan.grid.n();
        self.draw_pair(step / 2);
        // With y = IFFT(b): FFT(Re y)_k = n^2 (b_k + conj b_-k) / 2 and
        // FFT(Im y)_k = n^2 (b_k - conj b_-k) / 2i.
        let scale = dt.sqrt() * (n * n) as f64 * 0.5;
        let odd = step % 2 == 1;
        let mut out = vec![Complex64::default(); n * n];
        for i in 0..n {
            let mi = (n - i) % n;
            for j in 0..n {
                let mj = (n - j) % n;
                let b = self.buf[i * n + j];
                let c = self.buf[mi * n + mj].conj();
                out[i * n + j] = if odd {
                    (b - c) * Complex64::new(0.0, -1.0) * scale
                } else {
                    (b + c) * scale
                };
            }
        }
        out
    }

    fn draw_pair(&mut self, pair: u64) {
        if self.drawn == Some(pair) {
            return;
        }
        self.drawn = Some(pair);
        self.rng.set_word_pos(pair as u128 * WORDS_PER_PAIR);
        for (z, &a) in self.buf.iter_mut().zip(self.plan.amplitudes.iter()) {
            let re: f64 = self.rng.sample(StandardNormal);
            let im: f64 = self.rng.sample(StandardNormal);
            *z = Complex64::new(a * re, a * im);
        }
    }
}

/// Field file layout by extension. `.csv`: a `# n=<n> h=<h> <label>` comment,
/// then `n` rows of `n` comma-separated values (row = first index). Anything
/// else: binary, the 8 bytes `SWE2DFLD`, `n` as u64, `h` as f64, then `n*n`
/// f64 values, all little-endian, row-major.
pub fn write_field(path: &Path, n: usize, h: f64, label: &str, values: &[f64]) -> Result<()> {
    if values.len() != n * n {
        return Err(Error::domain(format!("field has {} values, expected {}", values.len(), n * n)));
    }
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    if path.extension().is_some_and(|e| e == "csv") {
        writeln!(out, "# n={n} h={h} {label}")?;
        for row in values.chunks(n) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
    } else {
        out.write_all(b"SWE2DFLD")?;
        out.write_all(&(n as u64).to_le_bytes())?;
        out.write_all(&h.to_le_bytes())?;
        for v in values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a binary field written by [`write_field`]; returns `(n, h, values)`.
pub fn read_field(path: &Path) -> Result<(usize, f64, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 24 || &bytes[..8] != b"SWE2DFLD" {
        return Err(Error::domain(format!("{} is not a binary field file", path.display())));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let h = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let body = &bytes[24..];
    if body.len() != n * n * 8 {
        return Err(Error::domain("truncated field file"));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((n, h, values))
}
