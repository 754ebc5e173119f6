//! Brute-force grid convolution of powers of the wave propagator.

#![allow(dead_code)]

use std::f64::consts::PI;

use swe2d::quadrature::{gauss_jacobi, gauss_legendre};

/// Length of the arc `|x| = r` inside `[x0, x1] x [y0, y1]`, first quadrant.
pub fn arc_in_cell(r: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let c = |v: f64| (v / r).clamp(-1.0, 1.0);
    let lo = c(x1).acos().max(c(y0).asin());
    let hi = c(x0).acos().min(c(y1).asin());
    r * (hi - lo).max(0.0)
}

/// `int_cell (t^2 - |x|^2)_+^{-q} dx` for a first-quadrant cell, by radial
/// quadrature against the arc length. Exact up to the quadrature rule.
pub fn cell_mass(t: f64, q: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let rmin = x0.hypot(y0);
    let rmax = x1.hypot(y1);
    if rmin >= t {
        return 0.0;
    }
    let top = rmax.min(t);
    let mut cuts = vec![rmin, top];
    for k in [x1.hypot(y0), x0.hypot(y1), x1, y1] {
        if k > rmin && k < top {
            cuts.push(k);
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let gl = gauss_legendre(10);
    let gj = gauss_jacobi(10, -q, 0.0).expect("valid exponent");
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        total += if b == t && rmax > t {
            gj.integrate(a, b, |r| (t + r).powf(-q) * arc_in_cell(r, x0, x1, y0, y1))
        } else {
            gl.integrate(a, b, |r| (t * t - r * r).powf(-q) * arc_in_cell(r, x0, x1, y0, y1))
        };
    }
    total
}

/// Cell masses of `G_t^{2q}` on the quadrant cells `[ih, (i+1)h] x [jh, (j+1)h]`.
pub struct QuadrantMasses {
    pub m: usize,
    pub masses: Vec<f64>,
}

impl QuadrantMasses {
    pub fn new(t: f64, q: f64, h: f64) -> Self {
        let m = (t / h).ceil() as usize + 1;
        let norm = (2.0 * PI).powf(-2.0 * q);
        let mut masses = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let (x0, y0) = (i as f64 * h, j as f64 * h);
                masses[i * m + j] = norm * cell_mass(t, q, x0, x0 + h, y0, y0 + h);
            }
        }
        Self { m, masses }
    }

    /// Mass of cell `(i, j)` anywhere in the plane, by reflection.
    pub fn get(&self, i: i64, j: i64) -> f64 {
        let fold = |k: i64| if k >= 0 { k } else { -k - 1 } as usize;
        let (a, b) = (fold(i), fold(j));
        if a >= self.m || b >= self.m {
            0.0
        } else {
            self.masses[a * self.m + b]
        }
    }

    pub fn total(&self) -> f64 {
        4.0 * self.masses.iter().sum::<f64>()
    }
}

/// `(G_t^{2q} * G_s^{2q})(k h, 0)` as a sum of products of cell averages.
pub fn grid_convolution(ft: &QuadrantMasses, fs: &QuadrantMasses, k: i64, h: f64) -> f64 {
    let mt = ft.m as i64;
    let mut sum = 0.0;
    for i in -mt..mt {
        for j in -mt..mt {
            let a = ft.get(i, j);
            if a != 0.0 {
                sum += a * fs.get(k - i - 1, -j - 1);
            }
        }
    }
    sum / (h * h)
}

/// Brute-force convolution at distance `w`, rounded to the nearest multiple
/// of `h`. Returns the distance actually used.
pub fn brute_conv(t: f64, s: f64, w: f64, q: f64, h: f64) -> (f64, f64) {
    let k = (w / h).round() as i64;
    let ft = QuadrantMasses::new(t, q, h);
    let fs = QuadrantMasses::new(s, q, h);
    (k as f64 * h, grid_convolution(&ft, &fs, k, h))
}
