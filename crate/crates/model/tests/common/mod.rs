#![allow(dead_code)]

use std::sync::Arc;

use candle_core::Device;
use textwipe_core::data::{prepare_samples, synth_sample, PreparedSample, SynthConfig};
use textwipe_core::metrics::psnr;
use textwipe_core::{Exec, MaskMode, RtvParams};
use textwipe_model::config::{NetConfig, TrainConfig, TransformerConfig};
use textwipe_model::losses::composite;
use textwipe_model::tensor::{tensor_to_images, Batch};
use textwipe_model::{Generator, TextureNet};

pub fn extractor() -> Arc<TextureNet> {
    Arc::new(TextureNet::bundled(&Device::Cpu).expect("bundled extractor"))
}

/// Synthetic pairs rendered and prepared with the given RTV settings.
pub fn prepared(seed: u64, n: usize, size: usize, rtv: &RtvParams) -> Vec<PreparedSample> {
    let cfg = SynthConfig {
        image_size: size,
        seed,
        ..SynthConfig::default()
    };
    let raw: Vec<_> = (0..n as u64).map(|i| synth_sample(&cfg, i)).collect();
    prepare_samples(Exec::default(), &raw, 0.9, MaskMode::Soft, rtv, None).expect("prepare")
}

pub fn fast_rtv() -> RtvParams {
    RtvParams {
        iterations: 2,
        solver_tol: 1e-6,
        ..RtvParams::default()
    }
}

/// A few-thousand-parameter network on 32×32 inputs.
pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        net: NetConfig {
            base_channels: 8,
            lgcm_stages: 2,
            transformer: TransformerConfig {
                num_layers: 1,
                num_heads: 2,
                model_dim: 16,
                ffn_dim: 32,
            },
            context_dim: 8,
            max_token_side: 4,
            disc_mask_conditioning: false,
        },
        rtv: fast_rtv(),
        image_size: 32,
        batch_size: 2,
        seed,
        ..TrainConfig::default()
    }
}

/// Mean `(PSNR(I_com, I_gt), PSNR(I_out, I_gt))` at inference.
pub fn mean_psnr(gen: &Generator, samples: &[PreparedSample]) -> (f64, f64) {
    let (mut com, mut out) = (0.0, 0.0);
    for chunk in samples.chunks(4) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let b = Batch::stack(&refs, &Device::Cpu).unwrap();
        let o = gen.forward(&b.i_in, &b.m_s, &b.s_in, None).unwrap();
        let i_com = composite(&b.i_in, o.i_out(), &b.m_s).unwrap();
        let coms = tensor_to_images(&i_com).unwrap();
        let outs = tensor_to_images(o.i_out()).unwrap();
        for ((s, c), i) in chunk.iter().zip(&coms).zip(&outs) {
            com += psnr(c, &s.i_gt).unwrap();
            out += psnr(i, &s.i_gt).unwrap();
        }
    }
    let n = samples.len() as f64;
    (com / n, out / n)
}
