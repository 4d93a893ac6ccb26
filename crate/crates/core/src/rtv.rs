//! Relative-total-variation texture removal.
//!
//! Each round linearizes the RTV energy around the current estimate into a
//! per-edge weight, then solves the screened system `(I + lambda * L_w) s = f`
//! for every channel, where `L_w` is the weighted graph Laplacian of the pixel
//! grid with Neumann boundaries. The system is symmetric positive definite and
//! is solved with Jacobi-preconditioned conjugate gradients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::image::{Image, StructureImage};

/// Floor for the windowed inherent variation.
pub const INHERENT_EPS: f64 = 1e-3;
const MAX_CG_ITERS: usize = 20_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RtvError {
    #[error("invalid RTV parameters: {0}")]
    InvalidParams(String),
    #[error("input image contains non-finite values")]
    NonFinite,
    #[error("conjugate gradients stalled after {iterations} iterations (relative residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtvParams {
    pub lambda: f64,
    pub sigma: f64,
    pub sharpness_eps: f64,
    pub iterations: usize,
    pub solver_tol: f64,
}

impl Default for RtvParams {
    fn default() -> Self {
        Self {
            lambda: 0.015,
            sigma: 3.0,
            sharpness_eps: 0.02,
            iterations: 4,
            solver_tol: 1e-10,
        }
    }
}

impl RtvParams {
    pub fn validate(&self) -> Result<(), RtvError> {
        let positive = [
            ("lambda", self.lambda),
            ("sigma", self.sigma),
            ("sharpness_eps", self.sharpness_eps),
            ("solver_tol", self.solver_tol),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(RtvError::InvalidParams(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.iterations == 0 {
            return Err(RtvError::InvalidParams(
                "iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Stable byte encoding, used to key the structure cache.
    pub fn fingerprint(&self) -> [u8; 40] {
        let mut out = [0u8; 40];
        let fields = [
            self.lambda.to_bits(),
            self.sigma.to_bits(),
            self.sharpness_eps.to_bits(),
            self.iterations as u64,
            self.solver_tol.to_bits(),
        ];
        for (i, f) in fields.iter().enumerate() {
            out[i * 8..(i + 1) * 8].copy_from_slice(&f.to_le_bytes());
        }
        out
    }
}

/// Smoothness weights on the grid edges: `wx` has `height x (width - 1)`
/// entries (edge between `(y, x)` and `(y, x + 1)`), `wy` has
/// `(height - 1) x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct RtvWeights {
    pub height: usize,
    pub width: usize,
    pub wx: Vec<f64>,
    pub wy: Vec<f64>,
}

impl RtvWeights {
    #[inline]
    pub fn wx(&self, y: usize, x: usize) -> f64 {
        self.wx[y * (self.width - 1) + x]
    }

    #[inline]
    pub fn wy(&self, y: usize, x: usize) -> f64 {
        self.wy[y * self.width + x]
    }
}

/// Normalized 1-D Gaussian taps, radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter with replicated borders on an `h x w` grid.
fn gaussian_filter(src: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &g) in kernel.iter().enumerate() {
                let xx = clamp(x as isize + k as isize - r, w);
                acc += g * src[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &g) in kernel.iter().enumerate() {
                let yy = clamp(y as isize + k as isize - r, h);
                acc += g * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Weights for one axis on an edge grid of size `eh x ew`.
///
/// `grads[c]` is the forward difference of channel `c`. The weight is the
/// window-summed reciprocal of the windowed inherent variation, times the
/// reciprocal of the local gradient magnitude.
fn axis_weights(
    grads: &[Vec<f64>],
    eh: usize,
    ew: usize,
    kernel: &[f64],
    sharpness_eps: f64,
) -> Vec<f64> {
    let nc = grads.len() as f64;
    let n = eh * ew;
    let mut local = vec![0.0; n];
    let mut inherent = vec![0.0; n];
    for g in grads {
        let smoothed = gaussian_filter(g, eh, ew, kernel);
        for i in 0..n {
            local[i] += g[i].abs() / nc;
            inherent[i] += smoothed[i].abs() / nc;
        }
    }
    let recip: Vec<f64> = inherent.iter().map(|&l| 1.0 / (l + INHERENT_EPS)).collect();
    let window = gaussian_filter(&recip, eh, ew, kernel);
    window
        .iter()
        .zip(&local)
        .map(|(&u, &d)| u / (d + sharpness_eps))
        .collect()
}

pub fn rtv_weights(image: &Image, params: &RtvParams) -> RtvWeights {
    let planes: Vec<Vec<f64>> = (0..image.channels()).map(|c| image.plane(c)).collect();
    weights_from_planes(&planes, image.height(), image.width(), params)
}

fn weights_from_planes(planes: &[Vec<f64>], h: usize, w: usize, params: &RtvParams) -> RtvWeights {
    let kernel = gaussian_kernel(params.sigma);
    let wx = if w > 1 {
        let gx: Vec<Vec<f64>> = planes
            .iter()
            .map(|p| {
                let mut g = Vec::with_capacity(h * (w - 1));
                for y in 0..h {
                    for x in 0..w - 1 {
                        g.push(p[y * w + x + 1] - p[y * w + x]);
                    }
                }
                g
            })
            .collect();
        axis_weights(&gx, h, w - 1, &kernel, params.sharpness_eps)
    } else {
        Vec::new()
    };
    let wy = if h > 1 {
        let gy: Vec<Vec<f64>> = planes
            .iter()
            .map(|p| (0..(h - 1) * w).map(|i| p[i + w] - p[i]).collect())
            .collect();
        axis_weights(&gy, h - 1, w, &kernel, params.sharpness_eps)
    } else {
        Vec::new()
    };
    RtvWeights {
        height: h,
        width: w,
        wx,
        wy,
    }
}

/// `(I + lambda * L_w) s`.
pub fn apply_system(weights: &RtvWeights, lambda: f64, s: &[f64], out: &mut [f64]) {
    let (h, w) = (weights.height, weights.width);
    out.copy_from_slice(s);
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            let i = y * w + x;
            let f = lambda * weights.wx(y, x) * (s[i] - s[i + 1]);
            out[i] += f;
            out[i + 1] -= f;
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            let i = y * w + x;
            let f = lambda * weights.wy(y, x) * (s[i] - s[i + w]);
            out[i] += f;
            out[i + w] -= f;
        }
    }
}

fn system_diagonal(weights: &RtvWeights, lambda: f64) -> Vec<f64> {
    let (h, w) = (weights.height, weights.width);
    let mut d = vec![1.0; h * w];
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            let v = lambda * weights.wx(y, x);
            d[y * w + x] += v;
            d[y * w + x + 1] += v;
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            let v = lambda * weights.wy(y, x);
            d[y * w + x] += v;
            d[(y + 1) * w + x] += v;
        }
    }
    d
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned CG for `(I + lambda L_w) s = rhs`, warm-started at
/// `x0`. Stops when `||r|| <= tol * ||rhs||`.
pub fn solve_screened(
    weights: &RtvWeights,
    lambda: f64,
    rhs: &[f64],
    x0: &[f64],
    tol: f64,
) -> Result<Vec<f64>, RtvError> {
    let n = rhs.len();
    let diag = system_diagonal(weights, lambda);
    let mut x = x0.to_vec();
    let mut ax = vec![0.0; n];
    apply_system(weights, lambda, &x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let rhs_norm = dot(rhs, rhs).sqrt().max(f64::MIN_POSITIVE);
    let mut rnorm = dot(&r, &r).sqrt();
    if rnorm <= tol * rhs_norm {
        return Ok(x);
    }
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for _ in 0..MAX_CG_ITERS {
        apply_system(weights, lambda, &p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rnorm = dot(&r, &r).sqrt();
        if rnorm <= tol * rhs_norm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(RtvError::NoConvergence {
        iterations: MAX_CG_ITERS,
        residual: rnorm / rhs_norm,
    })
}

pub fn rtv_smooth(image: &Image, params: &RtvParams) -> Result<StructureImage, RtvError> {
    rtv_smooth_with(Exec::default(), image, params)
}

/// Runs `params.iterations` reweighting rounds and clamps the result to
/// `[0, 1]`. Channels are solved independently under `exec`.
pub fn rtv_smooth_with(
    exec: Exec,
    image: &Image,
    params: &RtvParams,
) -> Result<StructureImage, RtvError> {
    params.validate()?;
    if !image.is_finite() {
        return Err(RtvError::NonFinite);
    }
    let (h, w, c) = image.shape();
    let source: Vec<Vec<f64>> = (0..c).map(|i| image.plane(i)).collect();
    let mut current = source.clone();
    for _ in 0..params.iterations {
        let weights = weights_from_planes(&current, h, w, params);
        let solved = exec.map_range(c, |ch| {
            solve_screened(
                &weights,
                params.lambda,
                &source[ch],
                &current[ch],
                params.solver_tol,
            )
        });
        current = solved.into_iter().collect::<Result<Vec<_>, _>>()?;
    }
    Ok(Image::from_planes(h, w, &current).clamp01())
}
