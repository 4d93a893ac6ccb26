//! Training objectives. Every L1 term is a mean over elements, and masks are
//! brought to each loss resolution by area averaging.

use candle_core::{Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::extractor::FeatureExtractor;
use crate::nn::area_downsample;
use crate::ops::softplus;

/// Area-downsamples a `[B, 1, H, W]` mask to `h×w`.
pub fn mask_at(m_s: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, mh, mw) = m_s.dims4()?;
    if mh % h != 0 || mw % w != 0 || mh / h != mw / w {
        candle_core::bail!("mask {mh}x{mw} cannot be area-averaged to {h}x{w}");
    }
    area_downsample(m_s, mh / h)
}

/// `mean(|pred - target| * (1 + coef * m))` with `m` broadcast over channels.
pub fn weighted_l1(pred: &Tensor, target: &Tensor, m: &Tensor, coef: f64) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        candle_core::bail!("shape mismatch: {:?} vs {:?}", pred.dims(), target.dims());
    }
    let (_, _, h, w) = pred.dims4()?;
    let weight = (mask_at(m, h, w)?.to_dtype(pred.dtype())? * coef)? + 1.0;
    (pred - target)?.abs()?.broadcast_mul(&weight?)?.mean_all()
}

pub fn align_loss(f_hc: &Tensor, f_hc_target: &Tensor, m_s: &Tensor, alpha: f64) -> Result<Tensor> {
    weighted_l1(f_hc, f_hc_target, m_s, alpha)
}

pub fn structure_loss(s_out: &Tensor, s_gt: &Tensor, m_s: &Tensor, gamma: f64) -> Result<Tensor> {
    weighted_l1(s_out, s_gt, m_s, gamma)
}

/// Sum over scales of the mask-weighted L1 against the area-downsampled
/// ground truth. Scale factors are taken from the output shapes.
pub fn msr_loss(outputs: &[Tensor], i_gt: &Tensor, m_s: &Tensor, theta: [f64; 3]) -> Result<Tensor> {
    if outputs.len() != 3 {
        candle_core::bail!("expected 3 outputs, got {}", outputs.len());
    }
    let (_, _, h, w) = i_gt.dims4()?;
    let mut total: Option<Tensor> = None;
    for (out, th) in outputs.iter().zip(theta) {
        let (_, _, oh, ow) = out.dims4()?;
        if h % oh != 0 || w % ow != 0 || h / oh != w / ow {
            candle_core::bail!("output {oh}x{ow} is not a scale of {h}x{w}");
        }
        let gt = area_downsample(i_gt, h / oh)?;
        let term = weighted_l1(out, &gt, m_s, th)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("three terms"))
}

/// `i_in * (1 - m) + i_out * m`.
pub fn composite(i_in: &Tensor, i_out: &Tensor, m_s: &Tensor) -> Result<Tensor> {
    let m = m_s.to_dtype(i_in.dtype())?;
    let keep = m.affine(-1.0, 1.0)?;
    i_in.broadcast_mul(&keep)? + i_out.broadcast_mul(&m)?
}

/// Unnormalized `F Fᵀ` over flattened positions: `[B, C, H, W] -> [B, C, C]`.
pub fn gram(f: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    let flat = f.contiguous()?.reshape((b, c, h * w))?;
    flat.matmul(&flat.t()?.contiguous()?)
}

/// Predictions paired with their targets for the feature-space losses. The
/// structure pair is absent when the structure branch is ablated.
pub struct FeaturePairs<'a> {
    pub i_out: &'a Tensor,
    pub i_com: &'a Tensor,
    pub i_gt: &'a Tensor,
    pub structure: Option<(&'a Tensor, &'a Tensor)>,
}

impl FeaturePairs<'_> {
    /// Features of each (prediction, target) pair; the ground-truth features
    /// are computed once and shared.
    fn features(&self, ex: &dyn FeatureExtractor) -> Result<Vec<(Vec<Tensor>, Vec<Tensor>)>> {
        let gt = ex.features(self.i_gt)?;
        let mut out = vec![(ex.features(self.i_out)?, gt.clone()), (ex.features(self.i_com)?, gt)];
        if let Some((s_out, s_gt)) = self.structure {
            out.push((ex.features(s_out)?, ex.features(s_gt)?));
        }
        Ok(out)
    }
}

fn sum(terms: Vec<Tensor>) -> Result<Tensor> {
    let mut it = terms.into_iter();
    let first = it.next().expect("at least one term");
    it.try_fold(first, |acc, t| acc + t)
}

pub fn perceptual_loss(pairs: &FeaturePairs, ex: &dyn FeatureExtractor) -> Result<Tensor> {
    let mut terms = Vec::new();
    for (pred, target) in pairs.features(ex)? {
        for (p, t) in pred.iter().zip(&target) {
            terms.push((p - t)?.abs()?.mean_all()?);
        }
    }
    sum(terms)
}

pub fn style_loss(pairs: &FeaturePairs, ex: &dyn FeatureExtractor) -> Result<Tensor> {
    let mut terms = Vec::new();
    for (pred, target) in pairs.features(ex)? {
        for (p, t) in pred.iter().zip(&target) {
            let (_, c, h, w) = p.dims4()?;
            let d = (gram(p)? - gram(t)?)?.abs()?.mean_all()?;
            terms.push((d / (h * w * c) as f64)?);
        }
    }
    sum(terms)
}

/// `(loss_D, loss_G)` in the non-saturating logit form:
/// `loss_D = mean softplus(-real) + mean softplus(fake)`,
/// `loss_G = mean softplus(-fake)`.
pub fn adversarial_losses(d_real: &Tensor, d_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    let loss_d = (softplus(&d_real.neg()?)?.mean_all()? + softplus(d_fake)?.mean_all()?)?;
    Ok((loss_d, generator_adversarial(d_fake)?))
}

pub fn generator_adversarial(d_fake: &Tensor) -> Result<Tensor> {
    softplus(&d_fake.neg()?)?.mean_all()
}

/// Unweighted generator-side loss components. Terms switched off by an
/// ablation are `None` and count as zero.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub align: Option<Tensor>,
    pub structure: Option<Tensor>,
    pub msr: Tensor,
    pub perceptual: Tensor,
    pub style: Tensor,
    pub adv_g: Tensor,
}

impl LossTerms {
    /// The weighted sum that the generator minimizes.
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        let mut terms = vec![
            (&self.msr * w.lambda_m)?,
            (&self.perceptual * w.lambda_p)?,
            (&self.style * w.lambda_s)?,
            (&self.adv_g * w.lambda_a)?,
        ];
        if let Some(a) = &self.align {
            terms.push((a * w.lambda_al)?);
        }
        if let Some(s) = &self.structure {
            terms.push((s * w.lambda_str)?);
        }
        sum(terms)
    }
}

/// One logged line per training step. Component values are unweighted;
/// `total` is the weighted generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub l_align: f64,
    pub l_str: f64,
    pub l_msr: f64,
    pub l_per: f64,
    pub l_style: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the weighted sum from the logged components.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.lambda_al * self.l_align
            + w.lambda_str * self.l_str
            + w.lambda_m * self.l_msr
            + w.lambda_p * self.l_per
            + w.lambda_s * self.l_style
            + w.lambda_a * self.l_adv_g
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("breakdown serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    fn val(x: &Tensor) -> f64 {
        x.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn uniform_ratio(coef: f64, f: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor) {
        let a = Tensor::zeros((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let b = (a.clone() + 0.25).unwrap();
        let ones = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        let r = val(&f(&a, &b, &ones)) / val(&f(&a, &b, &zeros));
        assert!((r - (1.0 + coef)).abs() < 1e-12, "{r}");
    }

    #[test]
    fn align_and_structure_ratios() {
        let w = LossWeights::default();
        uniform_ratio(w.alpha, |a, b, m| align_loss(a, b, m, w.alpha).unwrap());
        uniform_ratio(w.gamma, |a, b, m| structure_loss(a, b, m, w.gamma).unwrap());
    }

    #[test]
    fn align_uses_area_downsampled_mask() {
        let f = Tensor::zeros((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let g = (f.clone() + 1.0).unwrap();
        // one full-res pixel of 16 in the top-left block: block weight 1/4
        let mut m = vec![0.0; 16];
        m[0] = 1.0;
        let m = t(&m, &[1, 1, 4, 4]);
        let got = val(&align_loss(&f, &g, &m, 2.0).unwrap());
        assert!((got - (1.5 + 1.0 + 1.0 + 1.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn msr_hand_value() {
        // 4x4 single-channel ground truth, outputs at 1x1, 2x2, 4x4
        let gt: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let gt = t(&gt, &[1, 1, 4, 4]);
        let mut m = vec![0.0; 16];
        m[5] = 1.0;
        let m = t(&m, &[1, 1, 4, 4]);
        let o0 = t(&[0.0], &[1, 1, 1, 1]);
        let o1 = area_downsample(&gt, 2).unwrap();
        let o2 = (gt.clone() + 0.1).unwrap();
        let got = val(&msr_loss(&[o0, o1, o2], &gt, &m, [2.0, 3.0, 4.0]).unwrap());
        // scale 0: |0 - 7.5/16| * (1 + 2/16); scale 1: zero; scale 2: 0.1 * (16 + 4) / 16
        let want = 7.5 / 16.0 * (1.0 + 2.0 / 16.0) + 0.1 * 20.0 / 16.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn composite_blends() {
        let a = t(&[0.2, 0.4, 0.6, 0.8], &[1, 1, 2, 2]);
        let b = t(&[1.0, 0.0, 0.5, 0.3], &[1, 1, 2, 2]);
        let half = t(&[0.5; 4], &[1, 1, 2, 2]);
        let got = composite(&a, &b, &half).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (g, w) in got.iter().zip([0.6, 0.2, 0.55, 0.55]) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn gram_of_ones_and_orthogonal_channels() {
        let ones = t(&[1.0; 4], &[1, 1, 2, 2]);
        assert_eq!(gram(&ones).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![4.0]);
        let f = t(&[1.0, 0.0, 2.0, 0.0, 0.0, 3.0, 0.0, 1.0], &[1, 2, 2, 2]);
        let g = gram(&f).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g, vec![5.0, 0.0, 0.0, 10.0]);
    }

    #[test]
    fn adversarial_closed_forms() {
        let z = t(&[0.0, 0.0], &[2]);
        let (d, g) = adversarial_losses(&z, &z).unwrap();
        assert!((val(&d) - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((val(&g) - 2f64.ln()).abs() < 1e-15);
        let (d, _) = adversarial_losses(&t(&[1e3], &[1]), &t(&[-1e3], &[1])).unwrap();
        assert!(val(&d) < 1e-300);
        let mut prev = f64::INFINITY;
        for x in [-5.0, -1.0, 0.0, 1.0, 5.0] {
            let (_, g) = adversarial_losses(&z, &t(&[x], &[1])).unwrap();
            assert!(val(&g) < prev);
            prev = val(&g);
        }
    }

    #[test]
    fn breakdown_sums_and_linearity() {
        let s = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let terms = LossTerms {
            align: Some(s(0.3)),
            structure: Some(s(0.2)),
            msr: s(0.1),
            perceptual: s(5.0),
            style: s(0.001),
            adv_g: s(0.7),
        };
        let w = LossWeights::default();
        let total = val(&terms.total(&w).unwrap());
        let b = LossBreakdown {
            step: 0,
            l_align: 0.3,
            l_str: 0.2,
            l_msr: 0.1,
            l_per: 5.0,
            l_style: 0.001,
            l_adv_g: 0.7,
            l_adv_d: 1.0,
            total,
        };
        assert!((b.weighted_sum(&w) - total).abs() < 1e-6);
        let w2 = LossWeights { lambda_s: 2.0 * w.lambda_s, ..w };
        let total2 = val(&terms.total(&w2).unwrap());
        assert!((total2 - total - w.lambda_s * 0.001).abs() < 1e-12);
        let zero = LossTerms {
            align: None,
            structure: None,
            msr: s(0.0),
            perceptual: s(0.0),
            style: s(0.0),
            adv_g: s(0.0),
        };
        assert_eq!(val(&zero.total(&w).unwrap()), 0.0);
    }

    #[test]
    fn breakdown_json_keys() {
        let b = LossBreakdown {
            step: 3,
            l_align: 0.0,
            l_str: 0.0,
            l_msr: 0.0,
            l_per: 0.0,
            l_style: 0.0,
            l_adv_g: 0.0,
            l_adv_d: 0.0,
            total: 0.0,
        };
        let v: serde_json::Value = serde_json::from_str(&b.to_json_line()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys.len(), 9);
        for k in ["step", "l_align", "l_str", "l_msr", "l_per", "l_style", "l_adv_g", "l_adv_d", "total"] {
            assert!(keys.contains(&k));
        }
    }
}
