//! Image-quality metrics on `[0, 1]` images: MSE, PSNR, SSIM / MS-SSIM and
//! the Fréchet distance between two feature sets.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{compensated_sum, Exec};
use crate::image::Image;

pub const DEFAULT_PSNR_CAP: f64 = 100.0;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("feature sets need at least 2 vectors each (got {0} and {1})")]
    TooFewFeatures(usize, usize),
    #[error("feature dimensions differ or are empty")]
    DimensionMismatch,
    #[error("features contain non-finite values")]
    NonFinite,
    #[error("no image pairs to evaluate")]
    Empty,
}

fn check_shapes(a: &Image, b: &Image) -> Result<(), MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let sum = compensated_sum(a.data().iter().zip(b.data()).map(|(&x, &y)| {
        let d = x as f64 - y as f64;
        d * d
    }));
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1 / mse)`, capped so identical images stay finite.
pub fn psnr_from_mse(mse: f64, cap: f64) -> f64 {
    if mse <= 0.0 {
        return cap;
    }
    (10.0 * (1.0 / mse).log10()).min(cap)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    Ok(psnr_from_mse(mse(a, b)?, DEFAULT_PSNR_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsimMode {
    Single,
    #[default]
    Multiscale,
}

struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                v.push(
                    0.25 * (self.v[i]
                        + self.v[i + 1]
                        + self.v[i + self.w]
                        + self.v[i + self.w + 1]),
                );
            }
        }
        Plane { h, w, v }
    }
}

fn window_for(h: usize, w: usize) -> usize {
    let m = h.min(w).min(SSIM_WINDOW);
    if m % 2 == 0 { m - 1 } else { m }.max(1)
}

/// Valid-mode separable Gaussian filter.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

fn gauss(n: usize) -> Vec<f64> {
    let r = (n / 2) as f64;
    let mut k: Vec<f64> = (0..n)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_terms(a: &Plane, b: &Plane) -> (f64, f64) {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let k = gauss(window_for(a.h, a.w));
    let sq = |p: &Plane| p.v.iter().map(|x| x * x).collect::<Vec<_>>();
    let ab: Vec<f64> = a.v.iter().zip(&b.v).map(|(x, y)| x * y).collect();
    let (mu_a, oh, ow) = filter_valid(&a.v, a.h, a.w, &k);
    let (mu_b, _, _) = filter_valid(&b.v, b.h, b.w, &k);
    let (aa, _, _) = filter_valid(&sq(a), a.h, a.w, &k);
    let (bb, _, _) = filter_valid(&sq(b), b.h, b.w, &k);
    let (abf, _, _) = filter_valid(&ab, a.h, a.w, &k);
    let n = oh * ow;
    let mut ssim_sum = Vec::with_capacity(n);
    let mut cs_sum = Vec::with_capacity(n);
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = abf[i] - ma * mb;
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        ssim_sum.push(l * cs);
        cs_sum.push(cs);
    }
    (
        compensated_sum(ssim_sum) / n as f64,
        compensated_sum(cs_sum) / n as f64,
    )
}

fn planes(img: &Image) -> Vec<Plane> {
    (0..img.channels())
        .map(|c| Plane {
            h: img.height(),
            w: img.width(),
            v: img.plane(c),
        })
        .collect()
}

/// Single-scale SSIM (11-tap Gaussian window, sigma 1.5), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    if a.data() == b.data() {
        return Ok(1.0);
    }
    let pa = planes(a);
    let pb = planes(b);
    let s: f64 = pa.iter().zip(&pb).map(|(x, y)| ssim_terms(x, y).0).sum();
    Ok((s / pa.len() as f64).clamp(0.0, 1.0))
}

/// Number of MS-SSIM scales usable at this size (at most 5, at least 1).
pub fn ms_ssim_scales(height: usize, width: usize) -> usize {
    let mut n = 1;
    let (mut h, mut w) = (height / 2, width / 2);
    while n < MS_SSIM_WEIGHTS.len() && h.min(w) >= SSIM_WINDOW {
        n += 1;
        h /= 2;
        w /= 2;
    }
    n
}

/// Multi-scale SSIM with the standard five weights. Images too small for five
/// scales use the leading weights, renormalized to sum to one. Negative
/// contrast terms are clamped to zero.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    if a.data() == b.data() {
        return Ok(1.0);
    }
    let scales = ms_ssim_scales(a.height(), a.width());
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..scales].iter().map(|w| w / wsum).collect();
    let mut total = 0.0;
    let pa = planes(a);
    let pb = planes(b);
    for (mut x, mut y) in pa.into_iter().zip(pb) {
        let mut value = 1.0;
        for (j, &wj) in weights.iter().enumerate() {
            let (s, cs) = ssim_terms(&x, &y);
            let term = if j + 1 == scales { s } else { cs };
            value *= term.max(0.0).powf(wj);
            if j + 1 < scales {
                x = x.downsample();
                y = y.downsample();
            }
        }
        total += value;
    }
    Ok((total / a.channels() as f64).clamp(0.0, 1.0))
}

fn mean_cov(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len() as f64;
    let mut mu = DVector::zeros(dim);
    for v in set {
        for (i, x) in v.iter().enumerate() {
            mu[i] += x;
        }
    }
    mu /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in set {
        let d = DVector::from_iterator(dim, v.iter().zip(mu.iter()).map(|(x, m)| x - m));
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `tr((A B)^{1/2})` for PSD `A`, `B`, via the symmetric form `A^{1/2} B A^{1/2}`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let sa = sym_sqrt(a);
    let m = &sa * b * &sa;
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, clipped at zero.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricsError::TooFewFeatures(a.len(), b.len()));
    }
    let dim = a[0].len();
    if dim == 0 || a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(MetricsError::DimensionMismatch);
    }
    if a.iter().chain(b).flatten().any(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let (mu_a, cov_a) = mean_cov(a, dim);
    let (mu_b, cov_b) = mean_cov(b, dim);
    let diff = (&mu_a - &mu_b).norm_squared();
    // the two orderings agree analytically; averaging makes the result
    // symmetric in its arguments to rounding
    let tr_sqrt = 0.5 * (trace_sqrt_product(&cov_a, &cov_b) + trace_sqrt_product(&cov_b, &cov_a));
    let d = diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub mse: f64,
    pub psnr: f64,
    pub mssim: f64,
}

pub fn score_pair(
    pred: &Image,
    gt: &Image,
    mode: SsimMode,
    psnr_cap: f64,
) -> Result<PairScores, MetricsError> {
    let m = mse(pred, gt)?;
    let s = match mode {
        SsimMode::Single => ssim(pred, gt)?,
        SsimMode::Multiscale => ms_ssim(pred, gt)?,
    };
    Ok(PairScores {
        mse: m,
        psnr: psnr_from_mse(m, psnr_cap),
        mssim: s,
    })
}

/// Aggregate Image-Eval scores. `fdist` is the Fréchet distance of the
/// bundled extractor's pooled features; it is not comparable to FID numbers
/// computed with Inception weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub mssim: f64,
    pub mse: f64,
    pub fdist: Option<f64>,
    pub n_images: usize,
}

impl EvalReport {
    pub fn from_scores(scores: &[PairScores]) -> Result<Self, MetricsError> {
        if scores.is_empty() {
            return Err(MetricsError::Empty);
        }
        let n = scores.len() as f64;
        Ok(Self {
            psnr: compensated_sum(scores.iter().map(|s| s.psnr)) / n,
            mssim: compensated_sum(scores.iter().map(|s| s.mssim)) / n,
            mse: compensated_sum(scores.iter().map(|s| s.mse)) / n,
            fdist: None,
            n_images: scores.len(),
        })
    }
}

/// Scores `preds[i]` against `gts[i]` for all pairs.
pub fn evaluate_pairs(
    exec: Exec,
    preds: &[Image],
    gts: &[Image],
    mode: SsimMode,
) -> Result<EvalReport, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::DimensionMismatch);
    }
    let pairs: Vec<(&Image, &Image)> = preds.iter().zip(gts).collect();
    let scores = exec
        .map(&pairs, |(p, g)| score_pair(p, g, mode, DEFAULT_PSNR_CAP))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    EvalReport::from_scores(&scores)
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>12}", "metric", "value")?;
        writeln!(f, "{:<8} {:>12.4}", "psnr", self.psnr)?;
        writeln!(f, "{:<8} {:>12.4}", "mssim", self.mssim)?;
        writeln!(f, "{:<8} {:>12.6}", "mse", self.mse)?;
        match self.fdist {
            Some(d) => writeln!(f, "{:<8} {:>12.4}", "fdist", d)?,
            None => writeln!(f, "{:<8} {:>12}", "fdist", "n/a")?,
        }
        write!(f, "{:<8} {:>12}", "images", self.n_images)
    }
}
