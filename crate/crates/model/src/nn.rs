//! Parameter storage and the small set of layers the networks are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Result, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ops::{conv2d, conv_transpose2d, ConvGeom};

/// Named trainable tensors, kept in name order so that iteration (and thus
/// optimizer updates and checkpoint layout) is deterministic.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, data: Vec<f32>, shape: &[usize]) -> Result<Var> {
        assert!(!self.vars.contains_key(&name), "duplicate parameter {name}");
        let var = Var::from_vec(data, shape, &self.device)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound) as f32)
            .collect();
        self.insert(name, data, shape)
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| (gaussian(&mut self.rng) * std) as f32).collect();
        self.insert(name, data, shape)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f32) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Draws a fresh seed from the store's generator (for sub-components that
    /// need their own stream, like power-iteration vectors).
    pub fn next_seed(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Box-Muller standard normal.
pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Scope helper: `p.sub("enc").name("conv1")` gives `"enc/conv1"`.
#[derive(Debug, Clone)]
pub struct Path(String);

impl Path {
    pub fn root(name: &str) -> Self {
        Path(name.to_string())
    }

    pub fn sub(&self, name: impl std::fmt::Display) -> Self {
        Path(format!("{}/{}", self.0, name))
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}/{}", self.0, leaf)
    }
}

/// Convolution with a `[O, C, k, k]` weight. Default init is uniform with
/// bound `1/sqrt(fan_in)` for weight and bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, p: &Path, cin: usize, cout: usize, k: usize, geom: ConvGeom) -> Result<Self> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(p.name("weight"), &[cout, cin, k, k], bound)?,
            bias: Some(ps.uniform(p.name("bias"), &[cout], bound)?),
            geom,
        })
    }

    /// Weight and bias start at zero.
    pub fn zeros(ps: &mut ParamStore, p: &Path, cin: usize, cout: usize, k: usize, geom: ConvGeom) -> Result<Self> {
        Ok(Self {
            weight: ps.constant(p.name("weight"), &[cout, cin, k, k], 0.0)?,
            bias: Some(ps.constant(p.name("bias"), &[cout], 0.0)?),
            geom,
        })
    }

    /// 3×3, stride 1, size-preserving.
    pub fn same3(ps: &mut ParamStore, p: &Path, cin: usize, cout: usize) -> Result<Self> {
        Self::new(ps, p, cin, cout, 3, ConvGeom::new(1, 1, 1))
    }

    /// 4×4, stride 1, size-preserving (one extra trailing pad).
    pub fn same4(ps: &mut ParamStore, p: &Path, cin: usize, cout: usize) -> Result<Self> {
        Self::new(ps, p, cin, cout, 4, ConvGeom::new(1, 1, 2))
    }

    /// 4×4, stride 2, halves the size.
    pub fn down4(ps: &mut ParamStore, p: &Path, cin: usize, cout: usize) -> Result<Self> {
        Self::new(ps, p, cin, cout, 4, ConvGeom::new(2, 1, 1))
    }

    pub fn pointwise(ps: &mut ParamStore, p: &Path, cin: usize, cout: usize) -> Result<Self> {
        Self::new(ps, p, cin, cout, 1, ConvGeom::new(1, 0, 0))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        apply_conv(x, self.weight.as_tensor(), self.bias.as_ref().map(|b| b.as_tensor()), self.geom)
    }
}

pub(crate) fn apply_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, geom: ConvGeom) -> Result<Tensor> {
    let y = conv2d(x, &w.to_dtype(x.dtype())?, geom)?;
    match b {
        Some(b) => add_channel_bias(&y, &b.to_dtype(x.dtype())?),
        None => Ok(y),
    }
}

fn add_channel_bias(y: &Tensor, b: &Tensor) -> Result<Tensor> {
    y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)
}

/// 4×4 stride-2 transposed convolution (doubles the size), weight
/// `[Cin, Cout, 4, 4]`.
#[derive(Debug, Clone)]
pub struct Up4 {
    pub weight: Var,
    pub bias: Var,
}

impl Up4 {
    pub fn new(ps: &mut ParamStore, p: &Path, cin: usize, cout: usize) -> Result<Self> {
        let bound = 1.0 / ((cout * 16) as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(p.name("weight"), &[cin, cout, 4, 4], bound)?,
            bias: ps.uniform(p.name("bias"), &[cout], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose2d(x, self.weight.as_tensor(), ConvGeom::new(2, 1, 1))?;
        add_channel_bias(&y, self.bias.as_tensor())
    }
}

/// `x W^T + b` over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, p: &Path, din: usize, dout: usize) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(p.name("weight"), &[dout, din], bound)?,
            bias: ps.uniform(p.name("bias"), &[dout], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.broadcast_matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, p: &Path, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(p.name("gamma"), &[dim], 1.0)?,
            beta: ps.constant(p.name("beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        xn.broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())
    }
}

/// Per-sample, per-channel normalization over the spatial dims, no affine.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim((2, 3))?;
    xc.broadcast_div(&(var + 1e-5)?.sqrt()?)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    x.relu()? - (x.neg()?.relu()? * 0.2)?
}

/// `sigmoid(x) = (1 + tanh(x / 2)) / 2`, which stays finite for any input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    (x * 0.5)?.tanh()?.affine(0.5, 0.5)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// Mean over non-overlapping `k×k` blocks of an `[N, C, H, W]` tensor.
pub fn area_downsample(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    if h % k != 0 || w % k != 0 {
        candle_core::bail!("{h}x{w} is not divisible by {k}");
    }
    x.contiguous()?
        .reshape((n, c, h / k, k, w / k, k))?
        .mean_keepdim(5)?
        .mean_keepdim(3)?
        .reshape((n, c, h / k, w / k))
}

/// Frozen (non-trainable) tensors loaded or generated once.
pub fn frozen(data: Vec<f32>, shape: &[usize], device: &Device) -> Result<Tensor> {
    Tensor::from_vec(data, shape, device)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    t.to_dtype(DType::F64)?.to_scalar::<f64>()
}
