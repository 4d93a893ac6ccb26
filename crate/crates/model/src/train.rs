//! Alternating discriminator/generator updates, the batch schedule, and
//! single-image inference.

use std::sync::Arc;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textwipe_core::data::PreparedSample;
use textwipe_core::rtv::rtv_smooth_with;
use textwipe_core::{Exec, Image, RtvParams, SoftMask};

use crate::config::TrainConfig;
use crate::discriminator::Discriminator;
use crate::extractor::TextureNet;
use crate::generator::{Generator, GeneratorOutput};
use crate::losses::{
    adversarial_losses, align_loss, composite, generator_adversarial, msr_loss, perceptual_loss, structure_loss, style_loss, FeaturePairs,
    LossBreakdown, LossTerms,
};
use crate::nn::scalar_f64;
use crate::optim::{Adam, AdamParams};
use crate::tensor::{image_to_tensor, mask_to_tensor, tensor_to_image, Batch};
use crate::{ModelError, Result};

/// Offset applied to the run seed for the discriminator's initialization.
const DISC_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// Loads the configured extractor weights, or the bundled ones.
pub fn load_extractor(cfg: &TrainConfig, device: &Device) -> Result<Arc<TextureNet>> {
    let net = match &cfg.extractor_weights {
        Some(path) => TextureNet::load(path, device)?,
        None => TextureNet::bundled(device)?,
    };
    Ok(Arc::new(net))
}

#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    device: Device,
    extractor: Arc<TextureNet>,
    gen: Generator,
    disc: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, extractor: Arc<TextureNet>, device: &Device) -> Result<Self> {
        cfg.validate().map_err(ModelError::Config)?;
        let gen = Generator::new(cfg.net, cfg.ablation, cfg.seed, extractor.clone(), device)?;
        let disc = Discriminator::new(
            cfg.net.disc_mask_conditioning,
            cfg.seed.wrapping_add(DISC_SEED_OFFSET),
            device,
        )?;
        let adam = |lr: f64| AdamParams {
            lr,
            beta1: cfg.adam_betas.0,
            beta2: cfg.adam_betas.1,
            eps: cfg.adam_eps,
        };
        let opt_g = Adam::new(gen.params().iter(), adam(cfg.lr_g))?;
        let opt_d = Adam::new(disc.params().iter(), adam(cfg.lr_d))?;
        Ok(Self {
            cfg,
            device: device.clone(),
            extractor,
            gen,
            disc,
            opt_g,
            opt_d,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    pub fn extractor(&self) -> &Arc<TextureNet> {
        &self.extractor
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Discriminator, &mut Adam, &mut Adam, &mut u64) {
        (&mut self.disc, &mut self.opt_g, &mut self.opt_d, &mut self.step)
    }

    pub(crate) fn optimizers(&self) -> (&Adam, &Adam) {
        (&self.opt_g, &self.opt_d)
    }

    fn disc_mask<'a>(&self, m_s: &'a Tensor) -> Option<&'a Tensor> {
        self.disc.mask_conditioning().then_some(m_s)
    }

    /// Generator-side loss terms for an already computed forward pass.
    /// `detach_disc` keeps the discriminator parameters out of the graph.
    pub fn generator_terms(&self, batch: &Batch, out: &GeneratorOutput, detach_disc: bool) -> Result<LossTerms> {
        let w = &self.cfg.loss;
        let i_out = out.i_out();
        let i_com = composite(&batch.i_in, i_out, &batch.m_s)?;
        let align = match (&out.f_hc, &out.f_hc_target) {
            (Some(f), Some(t)) => Some(align_loss(f, t, &batch.m_s, w.alpha)?),
            _ => None,
        };
        let structure = match &out.s_out {
            Some(s) => Some(structure_loss(s, &batch.s_gt, &batch.m_s, w.gamma)?),
            None => None,
        };
        let pairs = FeaturePairs {
            i_out,
            i_com: &i_com,
            i_gt: &batch.i_gt,
            structure: out.s_out.as_ref().map(|s| (s, &batch.s_gt)),
        };
        let d_fake = self.disc.forward(i_out, self.disc_mask(&batch.m_s), detach_disc)?;
        let adv_g = generator_adversarial(&d_fake)?;
        Ok(LossTerms {
            align,
            structure,
            msr: msr_loss(&out.outputs, &batch.i_gt, &batch.m_s, w.theta)?,
            perceptual: perceptual_loss(&pairs, self.extractor.as_ref())?,
            style: style_loss(&pairs, self.extractor.as_ref())?,
            adv_g,
        })
    }

    /// One discriminator update followed by one generator update, both from
    /// a single generator forward pass.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let step = self.step + 1;
        let out = self.gen.forward(&batch.i_in, &batch.m_s, &batch.s_in, Some(&batch.i_gt))?;

        self.disc.power_iteration()?;
        let mask = self.disc_mask(&batch.m_s);
        let d_real = self.disc.forward(&batch.i_gt, mask, false)?;
        let d_fake = self.disc.forward(&out.i_out().detach(), mask, false)?;
        let (loss_d, _) = adversarial_losses(&d_real, &d_fake)?;
        let l_adv_d = finite(scalar_f64(&loss_d)?, "l_adv_d", step)?;
        self.opt_d.step(&loss_d.backward()?)?;

        let terms = self.generator_terms(batch, &out, true)?;
        let total = terms.total(&self.cfg.loss)?;
        let opt = |t: &Option<Tensor>| -> Result<f64> { t.as_ref().map_or(Ok(0.0), |t| Ok(scalar_f64(t)?)) };
        let breakdown = LossBreakdown {
            step,
            l_align: finite(opt(&terms.align)?, "l_align", step)?,
            l_str: finite(opt(&terms.structure)?, "l_str", step)?,
            l_msr: finite(scalar_f64(&terms.msr)?, "l_msr", step)?,
            l_per: finite(scalar_f64(&terms.perceptual)?, "l_per", step)?,
            l_style: finite(scalar_f64(&terms.style)?, "l_style", step)?,
            l_adv_g: finite(scalar_f64(&terms.adv_g)?, "l_adv_g", step)?,
            l_adv_d,
            total: finite(scalar_f64(&total)?, "total", step)?,
        };
        self.opt_g.step(&total.backward()?)?;
        self.step = step;
        Ok(breakdown)
    }

    /// Runs `steps` updates over `samples` with the deterministic batch
    /// schedule. `on_step` sees every breakdown and may stop the run early by
    /// returning `false`.
    pub fn fit(
        &mut self,
        samples: &[PreparedSample],
        steps: usize,
        mut on_step: impl FnMut(&LossBreakdown, &Trainer) -> Result<bool>,
    ) -> Result<Vec<LossBreakdown>> {
        if samples.is_empty() {
            return Err(ModelError::Config("no training samples".into()));
        }
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx = batch_indices(self.cfg.seed, samples.len(), self.cfg.batch_size, self.step);
            let refs: Vec<&PreparedSample> = idx.iter().map(|&i| &samples[i]).collect();
            let batch = Batch::stack(&refs, &self.device)?;
            let b = self.train_step(&batch)?;
            log.push(b);
            if !on_step(&b, self)? {
                break;
            }
        }
        Ok(log)
    }
}

fn finite(v: f64, component: &'static str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ModelError::NonFinite { component, step })
    }
}

/// Sample indices for the batch consumed at `step` (0-based). Each epoch is
/// an independent seeded permutation, so the schedule resumes exactly from
/// any step.
pub fn batch_indices(seed: u64, n: usize, batch_size: usize, step: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch_size as u64 {
        let pos = step * batch_size as u64 + j;
        let epoch = pos / n as u64;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x2545_f491_4f6c_dd1d));
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        let perm = &cached.as_ref().expect("filled above").1;
        out.push(perm[(pos % n as u64) as usize]);
    }
    out
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub s_in: Image,
    pub s_out: Option<Image>,
    /// Erased images at 1/16, 1/4 and full scale.
    pub outputs: Vec<Image>,
    pub i_out: Image,
    pub i_com: Image,
}

/// Erases the masked text from one image. The structure prior is computed
/// here; no ground truth is involved.
pub fn infer(gen: &Generator, exec: Exec, i_in: &Image, m_s: &SoftMask, rtv: &RtvParams) -> Result<Inference> {
    let (h, w, _) = i_in.shape();
    if (m_s.height(), m_s.width()) != (h, w) {
        return Err(ModelError::Shape(format!(
            "mask {}x{} does not match image {h}x{w}",
            m_s.height(),
            m_s.width()
        )));
    }
    let s_in = rtv_smooth_with(exec, i_in, rtv).map_err(|e| ModelError::Config(e.to_string()))?;
    let device = Device::Cpu;
    let x = image_to_tensor(i_in, &device)?;
    let m = mask_to_tensor(m_s, &device)?;
    let s = image_to_tensor(&s_in, &device)?;
    let out = gen.forward(&x, &m, &s, None)?;
    let i_com = composite(&x, out.i_out(), &m)?;
    Ok(Inference {
        s_in,
        s_out: out.s_out.as_ref().map(|t| tensor_to_image(t, 0)).transpose()?,
        outputs: out.outputs.iter().map(|t| tensor_to_image(t, 0)).collect::<candle_core::Result<_>>()?,
        i_out: tensor_to_image(out.i_out(), 0)?,
        i_com: tensor_to_image(&i_com, 0)?,
    })
}
