//! The frozen feature extractor used by the perceptual and style losses, the
//! target context encoder, and the Fréchet metric.
//!
//! It is a three-stage convolutional classifier pretrained on a procedural
//! 10-class texture task. Weights ship with the crate; [`pretrain`]
//! regenerates them from a seed, and [`TextureNet::load`] accepts any
//! safetensors file with the same tensor names and shapes.

use std::collections::HashMap;
use std::path::Path as FsPath;

use candle_core::{DType, Device, Result, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{apply_conv, area_downsample, Conv2d, Linear, ParamStore, Path};
use crate::ops::ConvGeom;
use crate::optim::{Adam, AdamParams};

pub const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];
pub const NUM_CLASSES: usize = 10;

static BUNDLED: &[u8] = include_bytes!("../assets/texture_net.safetensors");

/// Anything that maps `[N, 3, H, W]` images to a list of feature maps.
pub trait FeatureExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone)]
pub struct TextureNet {
    convs: Vec<(Tensor, Tensor)>,
    head: (Tensor, Tensor),
}

fn tensor_names() -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..3 {
        names.push(format!("stage{i}/weight"));
        names.push(format!("stage{i}/bias"));
    }
    names.push("head/weight".into());
    names.push("head/bias".into());
    names
}

fn expected_shape(name: &str) -> Vec<usize> {
    let cin = |i: usize| if i == 0 { 3 } else { STAGE_CHANNELS[i - 1] };
    match name {
        "head/weight" => vec![NUM_CLASSES, STAGE_CHANNELS[2]],
        "head/bias" => vec![NUM_CLASSES],
        _ => {
            let i: usize = name[5..6].parse().expect("stage index");
            if name.ends_with("weight") {
                vec![STAGE_CHANNELS[i], cin(i), 3, 3]
            } else {
                vec![STAGE_CHANNELS[i]]
            }
        }
    }
}

impl TextureNet {
    /// The weights bundled with the crate.
    pub fn bundled(device: &Device) -> Result<Self> {
        if BUNDLED.is_empty() {
            candle_core::bail!("no bundled extractor weights; run `textwipe pretrain-extractor`");
        }
        Self::from_tensors(candle_core::safetensors::load_buffer(BUNDLED, device)?)
    }

    pub fn load(path: &FsPath, device: &Device) -> Result<Self> {
        Self::from_tensors(candle_core::safetensors::load(path, device)?)
    }

    pub fn from_tensors(mut map: HashMap<String, Tensor>) -> Result<Self> {
        let mut take = |name: &str| -> Result<Tensor> {
            let t = map
                .remove(name)
                .ok_or_else(|| candle_core::Error::Msg(format!("extractor weights lack {name}")))?;
            if t.dims() != expected_shape(name).as_slice() {
                candle_core::bail!("extractor tensor {name} has shape {:?}", t.dims());
            }
            t.to_dtype(DType::F32)
        };
        let convs = (0..3)
            .map(|i| Ok((take(&format!("stage{i}/weight"))?, take(&format!("stage{i}/bias"))?)))
            .collect::<Result<Vec<_>>>()?;
        let head = (take("head/weight")?, take("head/bias")?);
        Ok(Self { convs, head })
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut all: Vec<Tensor> = Vec::new();
        for (w, b) in &self.convs {
            all.push(w.clone());
            all.push(b.clone());
        }
        all.push(self.head.0.clone());
        all.push(self.head.1.clone());
        tensor_names().into_iter().zip(all).collect()
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        let map: HashMap<String, Tensor> = self.tensors().into_iter().collect();
        candle_core::safetensors::save(&map, path)
    }

    /// `[phi1, phi2, phi3]` at 1/2, 1/4 and 1/8 of the input size.
    pub fn stages(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.affine(2.0, -1.0)?;
        let mut out = Vec::with_capacity(3);
        for (w, b) in &self.convs {
            h = apply_conv(&h, w, Some(b), ConvGeom::new(1, 1, 1))?.relu()?;
            h = area_downsample(&h, 2)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Global average of the last stage: `[N, 64]`.
    pub fn pooled(&self, x: &Tensor) -> Result<Tensor> {
        let phi3 = self.stages(x)?.pop().expect("three stages");
        phi3.mean((2, 3))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.pooled(x)?;
        let (w, b) = &self.head;
        p.matmul(&w.to_dtype(p.dtype())?.t()?)?
            .broadcast_add(&b.to_dtype(p.dtype())?)
    }

    /// Pooled features of each image, as plain vectors for the metric code.
    pub fn feature_vectors(&self, images: &[textwipe_core::Image], device: &Device) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let x = crate::tensor::images_to_tensor(chunk, device)?;
            let p = self.pooled(&x)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            out.extend(p);
        }
        Ok(out)
    }
}

impl FeatureExtractor for TextureNet {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.stages(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub image_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            steps: 400,
            batch_size: 20,
            image_size: 32,
            lr: 3e-3,
        }
    }
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// One procedural texture of class `label` as `3 × n × n` planar data.
pub fn toy_texture(rng: &mut ChaCha8Rng, label: usize, n: usize) -> Vec<f32> {
    use std::f64::consts::TAU;
    let c0 = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let mut c1 = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    if (c0.iter().sum::<f64>() - c1.iter().sum::<f64>()).abs() < 0.6 {
        c1 = c0.map(|v| 1.0 - v);
    }
    let freq = rng.random_range(2.0..6.0) / n as f64;
    let phase = rng.random_range(0.0..TAU);
    let (cx, cy) = (rng.random_range(0.3..0.7) * n as f64, rng.random_range(0.3..0.7) * n as f64);
    let blobs: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64), rng.random_range(3.0..8.0)))
        .collect();
    let noise: Vec<f64> = (0..n * n).map(|_| rng.random()).collect();
    let mut px = vec![[0.0; 3]; n * n];
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let wave = |u: f64| 0.5 + 0.5 * (TAU * freq * u + phase).sin();
            let t = match label {
                0 => wave(yf),
                1 => wave(xf),
                2 => wave((xf + yf) / 2f64.sqrt()),
                3 => {
                    let p = (1.0 / freq / 2.0).max(2.0);
                    (((xf / p).floor() + (yf / p).floor()) as i64 % 2) as f64
                }
                4 => {
                    let p = (1.0 / freq).max(4.0);
                    let (dx, dy) = (xf % p - p / 2.0, yf % p - p / 2.0);
                    if dx * dx + dy * dy < (p / 4.0).powi(2) { 1.0 } else { 0.0 }
                }
                5 => (xf * phase.cos() + yf * phase.sin()) / (n as f64 * 1.5) + 0.5,
                6 => noise[y * n + x],
                7 => wave(((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt()),
                8 => blobs
                    .iter()
                    .map(|&(bx, by, r)| (-((xf - bx).powi(2) + (yf - by).powi(2)) / (2.0 * r * r)).exp())
                    .sum::<f64>()
                    .min(1.0),
                _ => wave(xf).max(wave(yf)),
            };
            px[y * n + x] = lerp(c0, c1, t.clamp(0.0, 1.0));
        }
    }
    let mut planar = vec![0.0f32; 3 * n * n];
    for c in 0..3 {
        for i in 0..n * n {
            planar[c * n * n + i] = px[i][c] as f32;
        }
    }
    planar
}

fn toy_batch(rng: &mut ChaCha8Rng, batch: usize, n: usize, device: &Device) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::with_capacity(batch * 3 * n * n);
    let mut labels = Vec::with_capacity(batch);
    for i in 0..batch {
        let label = i % NUM_CLASSES;
        data.extend(toy_texture(rng, label, n));
        labels.push(label);
    }
    Ok((Tensor::from_vec(data, (batch, 3, n, n), device)?, labels))
}

fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    let mut onehot = vec![0f32; n * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, k), logits.device())?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let lse = (logits.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()? + max)?;
    let picked = (logits * onehot)?.sum_keepdim(D::Minus1)?;
    (lse - picked)?.mean_all()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub final_loss: f64,
    pub accuracy: f64,
}

/// Trains the extractor from scratch on the toy texture task.
pub fn pretrain(cfg: &PretrainConfig, device: &Device) -> Result<(TextureNet, PretrainReport)> {
    let mut ps = ParamStore::new(cfg.seed, device.clone());
    let mut convs = Vec::new();
    let mut cin = 3;
    for (i, &c) in STAGE_CHANNELS.iter().enumerate() {
        convs.push(Conv2d::same3(&mut ps, &Path::root(&format!("stage{i}")), cin, c)?);
        cin = c;
    }
    let head = Linear::new(&mut ps, &Path::root("head"), STAGE_CHANNELS[2], NUM_CLASSES)?;
    let snapshot = |convs: &[Conv2d], head: &Linear| -> Result<TextureNet> {
        Ok(TextureNet {
            convs: convs
                .iter()
                .map(|c| {
                    let b = c.bias.as_ref().expect("bias").as_tensor().detach();
                    Ok((c.weight.as_tensor().detach(), b))
                })
                .collect::<Result<Vec<_>>>()?,
            head: (head.weight.as_tensor().detach(), head.bias.as_tensor().detach()),
        })
    };
    let mut opt = Adam::new(
        ps.iter(),
        AdamParams { lr: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e57);
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let (x, labels) = toy_batch(&mut rng, cfg.batch_size, cfg.image_size, device)?;
        let net = TextureNetView { convs: &convs, head: &head };
        let loss = cross_entropy(&net.logits(&x)?, &labels)?;
        final_loss = loss.to_scalar::<f32>()? as f64;
        opt.step(&loss.backward()?)?;
    }
    let net = snapshot(&convs, &head)?;
    let accuracy = accuracy(&net, cfg.seed.wrapping_add(99), 200, cfg.image_size, device)?;
    Ok((net, PretrainReport { final_loss, accuracy }))
}

/// Classification accuracy on freshly generated textures.
pub fn accuracy(net: &TextureNet, seed: u64, n: usize, size: usize, device: &Device) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, labels) = toy_batch(&mut rng, n, size, device)?;
    let pred = net.logits(&x)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
    let hits = pred.iter().zip(&labels).filter(|(p, l)| **p as usize == **l).count();
    Ok(hits as f64 / n as f64)
}

/// Trainable view used only during pretraining.
struct TextureNetView<'a> {
    convs: &'a [Conv2d],
    head: &'a Linear,
}

impl TextureNetView<'_> {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.affine(2.0, -1.0)?;
        for c in self.convs {
            h = area_downsample(&c.forward(&h)?.relu()?, 2)?;
        }
        self.head.forward(&h.mean((2, 3))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_shapes() {
        let net = TextureNet::bundled(&Device::Cpu).unwrap();
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let f = net.stages(&x).unwrap();
        assert_eq!(f[0].dims(), &[2, 16, 32, 32]);
        assert_eq!(f[1].dims(), &[2, 32, 16, 16]);
        assert_eq!(f[2].dims(), &[2, 64, 8, 8]);
        assert_eq!(net.pooled(&x).unwrap().dims(), &[2, 64]);
    }

    #[test]
    fn bundled_weights_classify_toy_textures() {
        let net = TextureNet::bundled(&Device::Cpu).unwrap();
        let acc = accuracy(&net, 4242, 200, 32, &Device::Cpu).unwrap();
        assert!(acc > 0.8, "accuracy {acc}");
    }

    #[test]
    fn pretraining_is_deterministic() {
        let cfg = PretrainConfig { steps: 5, ..PretrainConfig::default() };
        let (a, ra) = pretrain(&cfg, &Device::Cpu).unwrap();
        let (b, rb) = pretrain(&cfg, &Device::Cpu).unwrap();
        assert_eq!(ra, rb);
        for ((_, x), (_, y)) in a.tensors().iter().zip(b.tensors().iter()) {
            assert_eq!(
                x.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                y.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
    }

    #[test]
    fn save_load_round_trip() {
        let net = TextureNet::bundled(&Device::Cpu).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.safetensors");
        net.save(&p).unwrap();
        let back = TextureNet::load(&p, &Device::Cpu).unwrap();
        for ((na, a), (nb, b)) in net.tensors().iter().zip(back.tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(
                a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let mut map: HashMap<String, Tensor> = TextureNet::bundled(&Device::Cpu).unwrap().tensors().into_iter().collect();
        map.insert("head/bias".into(), Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap());
        assert!(TextureNet::from_tensors(map).is_err());
    }
}
