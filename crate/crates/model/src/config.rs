//! Network, loss and training configuration, plus the flat JSON form used by
//! config files and checkpoint headers.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use textwipe_core::{MaskMode, RtvParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub base_channels: usize,
    pub lgcm_stages: usize,
    pub transformer: TransformerConfig,
    pub context_dim: usize,
    /// Largest token grid side the positional tables cover.
    pub max_token_side: usize,
    /// Feed the soft mask to the discriminator as a fourth channel.
    pub disc_mask_conditioning: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            lgcm_stages: 8,
            transformer: TransformerConfig {
                num_layers: 2,
                num_heads: 4,
                model_dim: 128,
                ffn_dim: 256,
            },
            context_dim: 128,
            max_token_side: 16,
            disc_mask_conditioning: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), String> {
        let t = &self.transformer;
        if self.base_channels == 0 || self.context_dim == 0 || self.max_token_side == 0 {
            return Err("base_channels, context_dim and max_token_side must be positive".into());
        }
        if t.num_heads == 0 || t.model_dim % t.num_heads != 0 {
            return Err(format!(
                "model_dim {} must be divisible by num_heads {}",
                t.model_dim, t.num_heads
            ));
        }
        if t.num_layers == 0 || t.ffn_dim == 0 {
            return Err("transformer needs at least one layer and a positive ffn_dim".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub theta: [f64; 3],
    pub lambda_al: f64,
    pub lambda_str: f64,
    pub lambda_m: f64,
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            gamma: 3.0,
            theta: [2.0, 3.0, 4.0],
            lambda_al: 1.0,
            lambda_str: 2.0,
            lambda_m: 10.0,
            lambda_p: 0.01,
            lambda_s: 120.0,
            lambda_a: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.alpha,
            self.gamma,
            self.theta[0],
            self.theta[1],
            self.theta[2],
            self.lambda_al,
            self.lambda_str,
            self.lambda_m,
            self.lambda_p,
            self.lambda_s,
            self.lambda_a,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_hcg: bool,
    pub use_lgcm: bool,
    pub use_lcg: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_hcg: true,
            use_lgcm: true,
            use_lcg: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub loss: LossWeights,
    pub rtv: RtvParams,
    pub ablation: Ablation,
    pub image_size: usize,
    pub batch_size: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub mask_mode: MaskMode,
    pub mask_ratio: f64,
    pub extractor_weights: Option<PathBuf>,
    pub structure_cache: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::try_from(FlatConfig::default()).expect("defaults are valid")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.net.validate()?;
        self.loss.validate()?;
        self.rtv.validate().map_err(|e| e.to_string())?;
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(format!("image_size {} must be a positive multiple of 16", self.image_size));
        }
        if self.batch_size == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return Err("batch_size, log_every and checkpoint_every must be positive".into());
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err("adam betas must lie in [0, 1)".into());
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0 && self.adam_eps > 0.0) {
            return Err("learning rates and adam_eps must be positive".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err("mask_ratio must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Stage count after ablation.
    pub fn effective_stages(&self) -> usize {
        if self.ablation.use_lgcm {
            self.net.lgcm_stages
        } else {
            0
        }
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let flat: FlatConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let cfg = TrainConfig::try_from(flat)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&FlatConfig::from(self)).expect("config serializes")
    }
}

/// One-level JSON document mirroring [`TrainConfig`]. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlatConfig {
    pub base_channels: usize,
    pub lgcm_stages: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub context_dim: usize,
    pub max_token_side: usize,
    pub disc_mask_conditioning: bool,
    pub alpha: f64,
    pub gamma: f64,
    pub theta: [f64; 3],
    pub lambda_al: f64,
    pub lambda_str: f64,
    pub lambda_m: f64,
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_a: f64,
    pub rtv_lambda: f64,
    pub rtv_sigma: f64,
    pub rtv_sharpness_eps: f64,
    pub rtv_iterations: usize,
    pub rtv_solver_tol: f64,
    pub use_hcg: bool,
    pub use_lgcm: bool,
    pub use_lcg: bool,
    pub image_size: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub mask_mode: String,
    pub mask_ratio: f64,
    pub extractor_weights: Option<PathBuf>,
    pub structure_cache: Option<PathBuf>,
}

impl Default for FlatConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        let loss = LossWeights::default();
        let rtv = RtvParams::default();
        Self {
            base_channels: net.base_channels,
            lgcm_stages: net.lgcm_stages,
            transformer_layers: net.transformer.num_layers,
            transformer_heads: net.transformer.num_heads,
            model_dim: net.transformer.model_dim,
            ffn_dim: net.transformer.ffn_dim,
            context_dim: net.context_dim,
            max_token_side: net.max_token_side,
            disc_mask_conditioning: net.disc_mask_conditioning,
            alpha: loss.alpha,
            gamma: loss.gamma,
            theta: loss.theta,
            lambda_al: loss.lambda_al,
            lambda_str: loss.lambda_str,
            lambda_m: loss.lambda_m,
            lambda_p: loss.lambda_p,
            lambda_s: loss.lambda_s,
            lambda_a: loss.lambda_a,
            rtv_lambda: rtv.lambda,
            rtv_sigma: rtv.sigma,
            rtv_sharpness_eps: rtv.sharpness_eps,
            rtv_iterations: rtv.iterations,
            rtv_solver_tol: rtv.solver_tol,
            use_hcg: true,
            use_lgcm: true,
            use_lcg: true,
            image_size: 64,
            batch_size: 2,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            lr_g: 1e-4,
            lr_d: 4e-4,
            max_steps: 2000,
            seed: 0,
            checkpoint_every: 500,
            log_every: 10,
            mask_mode: "soft".into(),
            mask_ratio: 0.9,
            extractor_weights: None,
            structure_cache: None,
        }
    }
}

impl TryFrom<FlatConfig> for TrainConfig {
    type Error = String;

    fn try_from(f: FlatConfig) -> Result<Self, String> {
        let mask_mode = f.mask_mode.parse::<MaskMode>().map_err(|e| e.to_string())?;
        Ok(TrainConfig {
            net: NetConfig {
                base_channels: f.base_channels,
                lgcm_stages: f.lgcm_stages,
                transformer: TransformerConfig {
                    num_layers: f.transformer_layers,
                    num_heads: f.transformer_heads,
                    model_dim: f.model_dim,
                    ffn_dim: f.ffn_dim,
                },
                context_dim: f.context_dim,
                max_token_side: f.max_token_side,
                disc_mask_conditioning: f.disc_mask_conditioning,
            },
            loss: LossWeights {
                alpha: f.alpha,
                gamma: f.gamma,
                theta: f.theta,
                lambda_al: f.lambda_al,
                lambda_str: f.lambda_str,
                lambda_m: f.lambda_m,
                lambda_p: f.lambda_p,
                lambda_s: f.lambda_s,
                lambda_a: f.lambda_a,
            },
            rtv: RtvParams {
                lambda: f.rtv_lambda,
                sigma: f.rtv_sigma,
                sharpness_eps: f.rtv_sharpness_eps,
                iterations: f.rtv_iterations,
                solver_tol: f.rtv_solver_tol,
            },
            ablation: Ablation {
                use_hcg: f.use_hcg,
                use_lgcm: f.use_lgcm,
                use_lcg: f.use_lcg,
            },
            image_size: f.image_size,
            batch_size: f.batch_size,
            adam_betas: (f.adam_beta1, f.adam_beta2),
            adam_eps: f.adam_eps,
            lr_g: f.lr_g,
            lr_d: f.lr_d,
            max_steps: f.max_steps,
            seed: f.seed,
            checkpoint_every: f.checkpoint_every,
            log_every: f.log_every,
            mask_mode,
            mask_ratio: f.mask_ratio,
            extractor_weights: f.extractor_weights,
            structure_cache: f.structure_cache,
        })
    }
}

impl From<&TrainConfig> for FlatConfig {
    fn from(c: &TrainConfig) -> Self {
        FlatConfig {
            base_channels: c.net.base_channels,
            lgcm_stages: c.net.lgcm_stages,
            transformer_layers: c.net.transformer.num_layers,
            transformer_heads: c.net.transformer.num_heads,
            model_dim: c.net.transformer.model_dim,
            ffn_dim: c.net.transformer.ffn_dim,
            context_dim: c.net.context_dim,
            max_token_side: c.net.max_token_side,
            disc_mask_conditioning: c.net.disc_mask_conditioning,
            alpha: c.loss.alpha,
            gamma: c.loss.gamma,
            theta: c.loss.theta,
            lambda_al: c.loss.lambda_al,
            lambda_str: c.loss.lambda_str,
            lambda_m: c.loss.lambda_m,
            lambda_p: c.loss.lambda_p,
            lambda_s: c.loss.lambda_s,
            lambda_a: c.loss.lambda_a,
            rtv_lambda: c.rtv.lambda,
            rtv_sigma: c.rtv.sigma,
            rtv_sharpness_eps: c.rtv.sharpness_eps,
            rtv_iterations: c.rtv.iterations,
            rtv_solver_tol: c.rtv.solver_tol,
            use_hcg: c.ablation.use_hcg,
            use_lgcm: c.ablation.use_lgcm,
            use_lcg: c.ablation.use_lcg,
            image_size: c.image_size,
            batch_size: c.batch_size,
            adam_beta1: c.adam_betas.0,
            adam_beta2: c.adam_betas.1,
            adam_eps: c.adam_eps,
            lr_g: c.lr_g,
            lr_d: c.lr_d,
            max_steps: c.max_steps,
            seed: c.seed,
            checkpoint_every: c.checkpoint_every,
            log_every: c.log_every,
            mask_mode: match c.mask_mode {
                MaskMode::Hard => "hard".into(),
                MaskMode::Soft => "soft".into(),
            },
            mask_ratio: c.mask_ratio,
            extractor_weights: c.extractor_weights.clone(),
            structure_cache: c.structure_cache.clone(),
        }
    }
}
