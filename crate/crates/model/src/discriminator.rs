//! Patch discriminator with spectrally normalized convolutions.
//!
//! Each conv weight is divided by an estimate of its largest singular value,
//! maintained by power iteration on persistent left/right vectors. The
//! vectors advance once per [`Discriminator::power_iteration`] call and are
//! treated as constants when differentiating.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{apply_conv, gaussian, leaky_relu, Conv2d, ParamStore, Path};
use crate::{ModelError, Result};

type TResult<T> = candle_core::Result<T>;

const CHANNELS: [usize; 4] = [32, 64, 128, 256];
const EPS: f64 = 1e-12;

fn normalize(v: &Tensor) -> TResult<Tensor> {
    let n = v.sqr()?.sum_all()?.sqrt()?;
    v.broadcast_div(&(n + EPS)?)
}

/// One power-iteration round on a `[O, K]` matrix: `v = Wᵀu / |Wᵀu|`,
/// `u = Wv / |Wv|`. Inputs and outputs are detached vectors.
pub fn power_step(w: &Tensor, u: &Tensor) -> TResult<(Tensor, Tensor)> {
    let w = w.detach();
    let v = normalize(&w.t()?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?)?;
    let u = normalize(&w.matmul(&v.unsqueeze(1)?)?.squeeze(1)?)?;
    Ok((u, v))
}

/// `uᵀ W v`, differentiable in `W`.
pub fn sigma_estimate(w: &Tensor, u: &Tensor, v: &Tensor) -> TResult<Tensor> {
    u.unsqueeze(0)?.matmul(&w.matmul(&v.unsqueeze(1)?)?)?.squeeze(1)?.squeeze(0)
}

/// Runs `iters` rounds from `u` and returns `W / sigma` with the final `u`.
pub fn spectral_normalize(w: &Tensor, u: &Tensor, iters: usize) -> TResult<(Tensor, Tensor)> {
    let (mut u, mut v) = power_step(w, u)?;
    for _ in 1..iters {
        (u, v) = power_step(w, &u)?;
    }
    let sigma = sigma_estimate(w, &u, &v)?;
    Ok((w.broadcast_div(&sigma)?, u))
}

#[derive(Debug, Clone)]
struct SnLayer {
    conv: Conv2d,
    u: Tensor,
    v: Tensor,
}

impl SnLayer {
    fn matrix(&self) -> TResult<Tensor> {
        let w = self.conv.weight.as_tensor();
        w.reshape((w.dim(0)?, w.elem_count() / w.dim(0)?))
    }

    /// Normalized weight; `detach` cuts the graph back to the parameters.
    fn weight(&self, detach: bool) -> TResult<Tensor> {
        let mut w = self.conv.weight.as_tensor().clone();
        if detach {
            w = w.detach();
        }
        let (o, k) = (w.dim(0)?, w.elem_count() / w.dim(0)?);
        let sigma = sigma_estimate(&w.reshape((o, k))?, &self.u, &self.v)?;
        w.broadcast_div(&sigma)
    }

    fn forward(&self, x: &Tensor, detach: bool) -> TResult<Tensor> {
        let b = self.conv.bias.as_ref().map(|b| b.as_tensor());
        let b = match (b, detach) {
            (Some(b), true) => Some(b.detach()),
            (b, _) => b.cloned(),
        };
        apply_conv(x, &self.weight(detach)?, b.as_ref(), self.conv.geom)
    }
}

#[derive(Debug)]
pub struct Discriminator {
    params: ParamStore,
    layers: Vec<SnLayer>,
    mask_conditioning: bool,
}

impl Discriminator {
    pub fn new(mask_conditioning: bool, seed: u64, device: &Device) -> Result<Self> {
        let mut ps = ParamStore::new(seed, device.clone());
        let root = Path::root("disc");
        let mut cin = if mask_conditioning { 4 } else { 3 };
        let mut convs = Vec::new();
        for (i, &c) in CHANNELS.iter().enumerate() {
            convs.push(Conv2d::down4(&mut ps, &root.sub(format!("layer{i}")), cin, c)?);
            cin = c;
        }
        convs.push(Conv2d::same3(&mut ps, &root.sub("layer4"), cin, 1)?);
        let mut layers = Vec::new();
        for conv in convs {
            let o = conv.weight.dim(0)?;
            let mut rng = ChaCha8Rng::seed_from_u64(ps.next_seed());
            let u0: Vec<f32> = (0..o).map(|_| gaussian(&mut rng) as f32).collect();
            let u0 = normalize(&Tensor::from_vec(u0, o, device)?)?;
            let mut layer = SnLayer {
                conv,
                u: u0.clone(),
                v: u0,
            };
            (layer.u, layer.v) = power_step(&layer.matrix()?, &layer.u)?;
            layers.push(layer);
        }
        Ok(Self {
            params: ps,
            layers,
            mask_conditioning,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn mask_conditioning(&self) -> bool {
        self.mask_conditioning
    }

    /// Advances every layer's power-iteration vectors by one round.
    pub fn power_iteration(&mut self) -> Result<()> {
        for l in &mut self.layers {
            let (u, v) = power_step(&l.matrix()?, &l.u)?;
            l.u = u;
            l.v = v;
        }
        Ok(())
    }

    /// Patch logits `[B, 1, H/16, W/16]`. `m_s` is required exactly when mask
    /// conditioning is on. With `detach_weights` the logits stay
    /// differentiable in `x` but not in the discriminator parameters.
    pub fn forward(&self, x: &Tensor, m_s: Option<&Tensor>, detach_weights: bool) -> Result<Tensor> {
        let mut h = match (self.mask_conditioning, m_s) {
            (true, Some(m)) => Tensor::cat(&[x, &m.to_dtype(x.dtype())?], 1)?,
            (false, None) => x.clone(),
            (true, None) => return Err(ModelError::Config("mask-conditioned discriminator needs a mask".into())),
            (false, Some(_)) => return Err(ModelError::Config("discriminator is not mask-conditioned".into())),
        };
        let (_, _, hh, ww) = h.dims4()?;
        if hh % 16 != 0 || ww % 16 != 0 {
            return Err(ModelError::Shape(format!("discriminator input {hh}x{ww} is not divisible by 16")));
        }
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h, detach_weights)?;
            if i < last {
                h = leaky_relu(&h)?;
            }
        }
        Ok(h)
    }

    /// Spectrally normalized weights as `[O, K]` matrices.
    pub fn normalized_matrices(&self) -> Result<Vec<Tensor>> {
        self.layers
            .iter()
            .map(|l| {
                let w = l.weight(true)?;
                let o = w.dim(0)?;
                Ok(w.reshape((o, w.elem_count() / o))?.to_dtype(DType::F64)?)
            })
            .collect()
    }

    /// Power-iteration vectors, for checkpointing.
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("disc/layer{i}/sn_u"), l.u.clone()));
            out.push((format!("disc/layer{i}/sn_v"), l.v.clone()));
        }
        out
    }

    pub fn restore_buffers(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (which, slot) in [("sn_u", &mut l.u), ("sn_v", &mut l.v)] {
                let name = format!("disc/layer{i}/{which}");
                let t = lookup(&name).ok_or_else(|| ModelError::Config(format!("missing {name}")))?;
                if t.dims() != slot.dims() {
                    return Err(ModelError::Shape(format!("{name} has shape {:?}", t.dims())));
                }
                *slot = t;
            }
        }
        Ok(())
    }
}
