//! The generator: structure generator, context encoder with its feature
//! mapping head, frozen target context, image encoder, the stacked
//! local-global context stages, and the multi-scale decoder.
//!
//! Feature maps live at a quarter of the input resolution. Tensors are
//! `[B, C, H, W]` throughout.

use std::sync::Arc;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, NetConfig};
use crate::extractor::{TextureNet, STAGE_CHANNELS};
use crate::nn::{area_downsample, gaussian, instance_norm, leaky_relu, sigmoid, Conv2d, Linear, ParamStore, Path, Up4};
use crate::ops::ConvGeom;
use crate::transformer::TransformerEncoder;
use crate::{ModelError, Result};

type TResult<T> = candle_core::Result<T>;

/// Input sides must be a multiple of this.
pub const SIDE_MULTIPLE: usize = 16;

#[derive(Debug, Clone)]
struct StructureGenerator {
    inc: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    res: [Conv2d; 2],
    up1: Up4,
    up2: Up4,
    out: Conv2d,
}

impl StructureGenerator {
    fn new(ps: &mut ParamStore, p: &Path, c: usize) -> TResult<Self> {
        let h = c / 2;
        Ok(Self {
            inc: Conv2d::same3(ps, &p.sub("in"), 4, h)?,
            down1: Conv2d::down4(ps, &p.sub("down1"), h, c)?,
            down2: Conv2d::down4(ps, &p.sub("down2"), c, c)?,
            res: [Conv2d::same3(ps, &p.sub("res0"), c, c)?, Conv2d::same3(ps, &p.sub("res1"), c, c)?],
            up1: Up4::new(ps, &p.sub("up1"), c, c)?,
            up2: Up4::new(ps, &p.sub("up2"), c, h)?,
            out: Conv2d::same3(ps, &p.sub("out"), h, 3)?,
        })
    }

    fn forward(&self, s_in: &Tensor, m_s: &Tensor) -> TResult<Tensor> {
        let x = Tensor::cat(&[s_in, m_s], 1)?;
        let e1 = leaky_relu(&self.inc.forward(&x)?)?;
        let e2 = leaky_relu(&self.down1.forward(&e1)?)?;
        let mut h = leaky_relu(&self.down2.forward(&e2)?)?;
        for r in &self.res {
            h = (&h + r.forward(&leaky_relu(&h)?)?)?;
        }
        let d2 = (leaky_relu(&self.up1.forward(&h)?)? + e2)?;
        let d1 = (leaky_relu(&self.up2.forward(&d2)?)? + e1)?;
        sigmoid(&self.out.forward(&d1)?)
    }
}

/// Three-conv encoder to `C` channels at a quarter of the input size.
#[derive(Debug, Clone)]
struct QuarterEncoder {
    inc: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    out: Conv2d,
}

impl QuarterEncoder {
    fn new(ps: &mut ParamStore, p: &Path, cin: usize, c: usize) -> TResult<Self> {
        Ok(Self {
            inc: Conv2d::same3(ps, &p.sub("in"), cin, c / 2)?,
            down1: Conv2d::down4(ps, &p.sub("down1"), c / 2, c)?,
            down2: Conv2d::down4(ps, &p.sub("down2"), c, c)?,
            out: Conv2d::same3(ps, &p.sub("out"), c, c)?,
        })
    }

    fn forward(&self, x: &Tensor) -> TResult<Tensor> {
        let h = leaky_relu(&self.inc.forward(x)?)?;
        let h = leaky_relu(&self.down1.forward(&h)?)?;
        let h = leaky_relu(&self.down2.forward(&h)?)?;
        self.out.forward(&h)
    }
}

/// Context encoder followed by the 1×1 feature mapping to `context_dim`.
#[derive(Debug, Clone)]
struct ContextEncoder {
    enc: QuarterEncoder,
    fam1: Conv2d,
    fam2: Conv2d,
}

impl ContextEncoder {
    fn forward(&self, i_in: &Tensor, m_s: &Tensor) -> TResult<Tensor> {
        let f = leaky_relu(&self.enc.forward(&Tensor::cat(&[i_in, m_s], 1)?)?)?;
        self.fam2.forward(&leaky_relu(&self.fam1.forward(&f)?)?)
    }
}

/// Frozen alignment target: the extractor's second stage (already at a
/// quarter of the input size) through a fixed random 1×1 projection.
#[derive(Debug, Clone)]
struct TargetContext {
    extractor: Arc<TextureNet>,
    projection: Tensor,
}

impl TargetContext {
    fn new(extractor: Arc<TextureNet>, context_dim: usize, seed: u64, device: &Device) -> TResult<Self> {
        let cin = STAGE_CHANNELS[1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5c_3e11_d00d_0001);
        let std = 1.0 / (cin as f64).sqrt();
        let data: Vec<f32> = (0..context_dim * cin).map(|_| (gaussian(&mut rng) * std) as f32).collect();
        Ok(Self {
            extractor,
            projection: Tensor::from_vec(data, (context_dim, cin, 1, 1), device)?,
        })
    }

    fn forward(&self, i_gt: &Tensor) -> TResult<Tensor> {
        let phi2 = self.extractor.stages(&i_gt.detach())?.swap_remove(1);
        crate::nn::apply_conv(&phi2, &self.projection, None, ConvGeom::new(1, 0, 0))
    }
}

/// Residual block whose normalized activations are modulated per pixel by
/// the high-level context. The modulation convs start at zero, so a fresh
/// block ignores the context.
#[derive(Debug, Clone)]
struct ResSpade {
    hidden: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
    conv: Conv2d,
}

impl ResSpade {
    fn new(ps: &mut ParamStore, p: &Path, c: usize, context_dim: usize) -> TResult<Self> {
        let same3 = ConvGeom::new(1, 1, 1);
        Ok(Self {
            hidden: Conv2d::pointwise(ps, &p.sub("hidden"), context_dim, c)?,
            gamma: Conv2d::zeros(ps, &p.sub("gamma"), c, c, 3, same3)?,
            beta: Conv2d::zeros(ps, &p.sub("beta"), c, c, 3, same3)?,
            conv: Conv2d::same3(ps, &p.sub("conv"), c, c)?,
        })
    }

    fn forward(&self, x: &Tensor, context: Option<&Tensor>) -> TResult<Tensor> {
        let mut m = instance_norm(x)?;
        if let Some(ctx) = context {
            let h = leaky_relu(&self.hidden.forward(ctx)?)?;
            let gamma = self.gamma.forward(&h)?;
            let beta = self.beta.forward(&h)?;
            m = ((&m * (gamma + 1.0)?)? + beta)?;
        }
        x + self.conv.forward(&leaky_relu(&m)?)?
    }
}

/// One local-global context stage. The local path brings the quarter-scale
/// features down to 1/16 with 4×4 convolutions, the token grid goes through
/// a transformer with learned row and column embeddings, and two transposed
/// convolutions return to the quarter scale.
#[derive(Debug, Clone)]
struct LgcmStage {
    local: [Conv2d; 4],
    to_tokens: Linear,
    pos_row: Tensor,
    pos_col: Tensor,
    transformer: TransformerEncoder,
    from_tokens: Linear,
    up1: Up4,
    up2: Up4,
    spade: ResSpade,
}

impl LgcmStage {
    fn new(ps: &mut ParamStore, p: &Path, net: &NetConfig) -> TResult<Self> {
        let c = net.base_channels;
        let t = &net.transformer;
        let pos = |ps: &mut ParamStore, name: &str| -> TResult<Tensor> {
            Ok(ps.normal(p.name(name), &[net.max_token_side, t.model_dim], 0.02)?.as_tensor().clone())
        };
        Ok(Self {
            local: [
                Conv2d::down4(ps, &p.sub("local0"), c, c)?,
                Conv2d::same4(ps, &p.sub("local1"), c, c)?,
                Conv2d::down4(ps, &p.sub("local2"), c, c)?,
                Conv2d::same4(ps, &p.sub("local3"), c, c)?,
            ],
            to_tokens: Linear::new(ps, &p.sub("to_tokens"), c, t.model_dim)?,
            pos_row: pos(ps, "pos_row")?,
            pos_col: pos(ps, "pos_col")?,
            transformer: TransformerEncoder::new(ps, &p.sub("transformer"), t.num_layers, t.num_heads, t.model_dim, t.ffn_dim)?,
            from_tokens: Linear::new(ps, &p.sub("from_tokens"), t.model_dim, c)?,
            up1: Up4::new(ps, &p.sub("up1"), c, c)?,
            up2: Up4::new(ps, &p.sub("up2"), c, c)?,
            spade: ResSpade::new(ps, &p.sub("spade"), c, net.context_dim)?,
        })
    }

    fn forward(&self, f_prev: &Tensor, f_hc: Option<&Tensor>) -> Result<Tensor> {
        let mut h = f_prev.clone();
        for conv in &self.local {
            h = leaky_relu(&conv.forward(&h)?)?;
        }
        let (b, c, gh, gw) = h.dims4()?;
        let max = self.pos_row.dim(0)?;
        if gh > max || gw > max {
            return Err(ModelError::TokenLimit { side: gh.max(gw), max });
        }
        let tokens = h.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let d = self.pos_row.dim(1)?;
        let pos = self
            .pos_row
            .narrow(0, 0, gh)?
            .unsqueeze(1)?
            .broadcast_add(&self.pos_col.narrow(0, 0, gw)?.unsqueeze(0)?)?
            .reshape((1, gh * gw, d))?;
        let z = self.to_tokens.forward(&tokens)?.broadcast_add(&pos)?;
        let z = self.from_tokens.forward(&self.transformer.forward(&z)?)?;
        let g = z.transpose(1, 2)?.contiguous()?.reshape((b, c, gh, gw))?;
        let up = self.up2.forward(&leaky_relu(&self.up1.forward(&g)?)?)?;
        let y = (f_prev + up)?;
        Ok(self.spade.forward(&y, f_hc)?)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    res: [Conv2d; 2],
    out16: Conv2d,
    out4: Conv2d,
    up1: Up4,
    conv1: Conv2d,
    up2: Up4,
    conv2: Conv2d,
    out1: Conv2d,
}

impl Decoder {
    fn new(ps: &mut ParamStore, p: &Path, c: usize) -> TResult<Self> {
        let h = c / 2;
        Ok(Self {
            res: [Conv2d::same3(ps, &p.sub("res0"), c, c)?, Conv2d::same3(ps, &p.sub("res1"), c, c)?],
            out16: Conv2d::same3(ps, &p.sub("out16"), c, 3)?,
            out4: Conv2d::same3(ps, &p.sub("out4"), c, 3)?,
            up1: Up4::new(ps, &p.sub("up1"), c, h)?,
            conv1: Conv2d::same3(ps, &p.sub("conv1"), h, h)?,
            up2: Up4::new(ps, &p.sub("up2"), h, h)?,
            conv2: Conv2d::same3(ps, &p.sub("conv2"), h, h)?,
            out1: Conv2d::same3(ps, &p.sub("out1"), h, 3)?,
        })
    }

    /// Outputs at 1/16, 1/4 and full resolution of the original input.
    fn forward(&self, x: &Tensor) -> TResult<[Tensor; 3]> {
        let h1 = leaky_relu(&self.res[0].forward(&leaky_relu(x)?)?)?;
        let h = (x + self.res[1].forward(&h1)?)?;
        let o16 = sigmoid(&self.out16.forward(&area_downsample(&h, 4)?)?)?;
        let o4 = sigmoid(&self.out4.forward(&h)?)?;
        let u = leaky_relu(&self.up1.forward(&h)?)?;
        let u = leaky_relu(&self.conv1.forward(&u)?)?;
        let u = leaky_relu(&self.up2.forward(&u)?)?;
        let u = leaky_relu(&self.conv2.forward(&u)?)?;
        let o1 = sigmoid(&self.out1.forward(&u)?)?;
        Ok([o16, o4, o1])
    }
}

/// Everything a forward pass produces. Optional members are absent when
/// the corresponding branch is ablated or, for the target context, when no
/// ground truth was supplied.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub s_out: Option<Tensor>,
    /// Erased images at 1/16, 1/4 and full scale.
    pub outputs: [Tensor; 3],
    pub f_hc: Option<Tensor>,
    pub f_hc_target: Option<Tensor>,
    pub f_s: Tensor,
    pub f_l: Tensor,
}

impl GeneratorOutput {
    pub fn i_out(&self) -> &Tensor {
        &self.outputs[2]
    }
}

#[derive(Debug)]
pub struct Generator {
    net: NetConfig,
    ablation: Ablation,
    params: ParamStore,
    structure: StructureGenerator,
    context: ContextEncoder,
    target: TargetContext,
    image_enc: QuarterEncoder,
    stages: Vec<LgcmStage>,
    decoder: Decoder,
}

impl Generator {
    /// Builds every branch regardless of `ablation`, so parameter layout and
    /// initial values depend only on `net` and `seed`.
    pub fn new(net: NetConfig, ablation: Ablation, seed: u64, extractor: Arc<TextureNet>, device: &Device) -> Result<Self> {
        net.validate().map_err(ModelError::Config)?;
        if net.lgcm_stages == 0 {
            return Err(ModelError::Config("lgcm_stages must be at least 1".into()));
        }
        let c = net.base_channels;
        let mut ps = ParamStore::new(seed, device.clone());
        let root = Path::root("gen");
        let structure = StructureGenerator::new(&mut ps, &root.sub("structure"), c)?;
        let context = ContextEncoder {
            enc: QuarterEncoder::new(&mut ps, &root.sub("context"), 4, c)?,
            fam1: Conv2d::pointwise(&mut ps, &root.sub("fam").sub("conv1"), c, net.context_dim)?,
            fam2: Conv2d::pointwise(&mut ps, &root.sub("fam").sub("conv2"), net.context_dim, net.context_dim)?,
        };
        let image_enc = QuarterEncoder::new(&mut ps, &root.sub("image_enc"), 7, c)?;
        let stages = (0..net.lgcm_stages)
            .map(|i| LgcmStage::new(&mut ps, &root.sub("lgcm").sub(format!("stage{i}")), &net))
            .collect::<TResult<Vec<_>>>()?;
        let decoder = Decoder::new(&mut ps, &root.sub("decoder"), c)?;
        let target = TargetContext::new(extractor, net.context_dim, seed, device)?;
        Ok(Self {
            net,
            ablation,
            params: ps,
            structure,
            context,
            target,
            image_enc,
            stages,
            decoder,
        })
    }

    pub fn net(&self) -> &NetConfig {
        &self.net
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Number of stages actually run.
    pub fn active_stages(&self) -> usize {
        if self.ablation.use_lgcm {
            self.stages.len()
        } else {
            0
        }
    }

    /// Frozen tensors that must never change during training.
    pub fn frozen_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("target/projection".to_string(), self.target.projection.clone())];
        for (name, t) in self.target.extractor.tensors() {
            out.push((format!("target/extractor/{name}"), t));
        }
        out
    }

    pub fn generate_structure(&self, s_in: &Tensor, m_s: &Tensor) -> Result<Tensor> {
        check_pair(s_in, m_s)?;
        Ok(self.structure.forward(s_in, m_s)?)
    }

    pub fn encode_context(&self, i_in: &Tensor, m_s: &Tensor) -> Result<Tensor> {
        check_pair(i_in, m_s)?;
        Ok(self.context.forward(i_in, m_s)?)
    }

    /// The frozen alignment target. Only meaningful during training, when
    /// the ground truth exists.
    pub fn extract_target_context(&self, i_gt: Option<&Tensor>) -> Result<Tensor> {
        let i_gt = i_gt.ok_or(ModelError::TrainOnly)?;
        Ok(self.target.forward(i_gt)?)
    }

    pub fn encode_image(&self, i_in: &Tensor, s_out: &Tensor, m_s: &Tensor) -> Result<Tensor> {
        check_pair(i_in, m_s)?;
        check_pair(s_out, m_s)?;
        Ok(self.image_enc.forward(&Tensor::cat(&[i_in, s_out, m_s], 1)?)?)
    }

    /// Stage `i` applied once. Passing `None` for the context bypasses the
    /// modulation.
    pub fn lgcm_stage(&self, i: usize, f_prev: &Tensor, f_hc: Option<&Tensor>) -> Result<Tensor> {
        let stage = self
            .stages
            .get(i)
            .ok_or_else(|| ModelError::Config(format!("stage {i} out of range")))?;
        stage.forward(f_prev, f_hc)
    }

    /// Folds the first `k` stages starting from `f_s`.
    pub fn run_lgcm(&self, f_s: &Tensor, f_hc: Option<&Tensor>, k: usize) -> Result<Tensor> {
        if k > self.stages.len() {
            return Err(ModelError::Config(format!("k = {k} exceeds the {} built stages", self.stages.len())));
        }
        let mut f = f_s.clone();
        for stage in &self.stages[..k] {
            f = stage.forward(&f, f_hc)?;
        }
        Ok(f)
    }

    pub fn decode_features(&self, f_lk: &Tensor, f_s: &Tensor) -> Result<[Tensor; 3]> {
        if f_lk.dims() != f_s.dims() {
            return Err(ModelError::Shape(format!("{:?} vs {:?}", f_lk.dims(), f_s.dims())));
        }
        Ok(self.decoder.forward(&(f_lk + f_s)?)?)
    }

    /// Full pass given a precomputed structure image `s_in`. `i_gt`, when
    /// present, is used only for the alignment target.
    pub fn forward(&self, i_in: &Tensor, m_s: &Tensor, s_in: &Tensor, i_gt: Option<&Tensor>) -> Result<GeneratorOutput> {
        check_input(i_in)?;
        check_pair(i_in, m_s)?;
        check_pair(s_in, m_s)?;
        if let Some(gt) = i_gt {
            if gt.dims() != i_in.dims() {
                return Err(ModelError::Shape(format!("ground truth {:?} vs input {:?}", gt.dims(), i_in.dims())));
            }
        }
        let s_out = if self.ablation.use_lcg {
            Some(self.generate_structure(s_in, m_s)?)
        } else {
            None
        };
        let s_feed = match &s_out {
            Some(s) => s.clone(),
            None => s_in.zeros_like()?,
        };
        let (f_hc, f_hc_target) = if self.ablation.use_hcg {
            let target = match i_gt {
                Some(gt) => Some(self.extract_target_context(Some(gt))?),
                None => None,
            };
            (Some(self.encode_context(i_in, m_s)?), target)
        } else {
            (None, None)
        };
        let f_s = self.encode_image(i_in, &s_feed, m_s)?;
        let f_l = self.run_lgcm(&f_s, f_hc.as_ref(), self.active_stages())?;
        let outputs = self.decode_features(&f_l, &f_s)?;
        Ok(GeneratorOutput {
            s_out,
            outputs,
            f_hc,
            f_hc_target,
            f_s,
            f_l,
        })
    }
}

fn check_input(i_in: &Tensor) -> Result<()> {
    let (_, c, h, w) = i_in.dims4()?;
    if c != 3 {
        return Err(ModelError::Shape(format!("expected 3 channels, got {c}")));
    }
    if h != w || h % SIDE_MULTIPLE != 0 || h == 0 {
        return Err(ModelError::Shape(format!(
            "input must be square with a side divisible by {SIDE_MULTIPLE}, got {h}x{w}"
        )));
    }
    Ok(())
}

fn check_pair(x: &Tensor, m: &Tensor) -> Result<()> {
    let (bx, _, hx, wx) = x.dims4()?;
    let (bm, cm, hm, wm) = m.dims4()?;
    if bx != bm || hx != hm || wx != wm || cm != 1 {
        return Err(ModelError::Shape(format!("image {:?} and mask {:?} do not match", x.dims(), m.dims())));
    }
    Ok(())
}
