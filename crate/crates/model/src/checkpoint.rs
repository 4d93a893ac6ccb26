//! Checkpoints: one safetensors file holding generator and discriminator
//! parameters, power-iteration vectors and both optimizers' moments. The
//! header metadata carries the flat config, the step and the seed.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use candle_core::{Device, Tensor};

use crate::config::TrainConfig;
use crate::extractor::TextureNet;
use crate::generator::Generator;
use crate::train::{load_extractor, Trainer};
use crate::{ModelError, Result};

pub const FORMAT: &str = "textwipe-checkpoint-1";

fn err(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes `trainer` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, var) in trainer.generator().params().iter() {
        tensors.push((name.clone(), var.as_tensor().clone()));
    }
    for (name, var) in trainer.discriminator().params().iter() {
        tensors.push((name.clone(), var.as_tensor().clone()));
    }
    tensors.extend(trainer.discriminator().buffers());
    let (opt_g, opt_d) = trainer.optimizers();
    for (prefix, opt) in [("opt_g", opt_g), ("opt_d", opt_d)] {
        for (name, m, v) in opt.state() {
            tensors.push((format!("{prefix}/m/{name}"), m.clone()));
            tensors.push((format!("{prefix}/v/{name}"), v.clone()));
        }
    }
    let cfg = trainer.config();
    let meta = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("config".to_string(), serde_json::to_string(&crate::config::FlatConfig::from(cfg)).expect("config serializes")),
        ("step".to_string(), trainer.step().to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("opt_g_step".to_string(), opt_g.step_count().to_string()),
        ("opt_d_step".to_string(), opt_d.step_count().to_string()),
    ]);
    let bytes = safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(meta))
        .map_err(|e| err(path, e.to_string()))?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(&bytes).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

/// Header fields of a checkpoint.
#[derive(Debug, Clone)]
pub struct Header {
    pub config: TrainConfig,
    pub step: u64,
    pub seed: u64,
    opt_steps: (u64, u64),
}

fn read(path: &Path) -> Result<(Header, HashMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| err(path, e.to_string()))?;
    let meta = meta.metadata().clone().ok_or_else(|| err(path, "missing header metadata"))?;
    let field = |k: &str| meta.get(k).ok_or_else(|| err(path, format!("header lacks {k}")));
    if field("format")? != FORMAT {
        return Err(err(path, format!("unsupported format {}", field("format")?)));
    }
    let num = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|_| err(path, format!("bad {k}"))) };
    let config = TrainConfig::from_json(field("config")?).map_err(|e| err(path, e))?;
    let header = Header {
        step: num("step")?,
        seed: num("seed")?,
        opt_steps: (num("opt_g_step")?, num("opt_d_step")?),
        config,
    };
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok((header, tensors))
}

pub fn read_header(path: &Path) -> Result<Header> {
    Ok(read(path)?.0)
}

fn take(path: &Path, tensors: &HashMap<String, Tensor>, name: &str, like: &Tensor) -> Result<Tensor> {
    let t = tensors.get(name).ok_or_else(|| err(path, format!("missing tensor {name}")))?;
    if t.dims() != like.dims() || t.dtype() != like.dtype() {
        return Err(err(path, format!("tensor {name} has shape {:?}, expected {:?}", t.dims(), like.dims())));
    }
    Ok(t.clone())
}

fn restore_params(path: &Path, ps: &crate::nn::ParamStore, tensors: &HashMap<String, Tensor>) -> Result<()> {
    for (name, var) in ps.iter() {
        var.set(&take(path, tensors, name, var.as_tensor())?)?;
    }
    Ok(())
}

/// Rebuilds a trainer that continues exactly where the saved one stopped.
/// `extractor` overrides the weights named in the stored config.
pub fn load_trainer(path: &Path, extractor: Option<Arc<TextureNet>>, device: &Device) -> Result<Trainer> {
    let (header, tensors) = read(path)?;
    let extractor = match extractor {
        Some(e) => e,
        None => load_extractor(&header.config, device)?,
    };
    let mut trainer = Trainer::new(header.config.clone(), extractor, device)?;
    restore_params(path, trainer.generator().params(), &tensors)?;
    restore_params(path, trainer.discriminator().params(), &tensors)?;
    let (disc, opt_g, opt_d, step) = trainer.parts_mut();
    disc.restore_buffers(|n| tensors.get(n).cloned())?;
    for (prefix, opt, n) in [("opt_g", opt_g, header.opt_steps.0), ("opt_d", opt_d, header.opt_steps.1)] {
        opt.restore(n, |name| {
            let m = tensors.get(&format!("{prefix}/m/{name}"))?;
            let v = tensors.get(&format!("{prefix}/v/{name}"))?;
            Some((m.clone(), v.clone()))
        })?;
    }
    *step = header.step;
    Ok(trainer)
}

/// Loads only the generator, for inference.
pub fn load_generator(path: &Path, device: &Device) -> Result<(Generator, TrainConfig)> {
    let (header, tensors) = read(path)?;
    let cfg = header.config;
    let extractor = load_extractor(&cfg, device)?;
    let gen = Generator::new(cfg.net, cfg.ablation, cfg.seed, extractor, device)?;
    restore_params(path, gen.params(), &tensors)?;
    Ok((gen, cfg))
}
