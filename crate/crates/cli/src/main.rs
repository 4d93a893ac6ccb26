use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use textwipe_core::data::{load_dataset, prepare_samples, save_dataset, synth_sample, AnnotationFile, StructureCache, SynthConfig};
use textwipe_core::geometry::render_soft_mask_with;
use textwipe_core::metrics::{evaluate_pairs, frechet_distance, SsimMode};
use textwipe_core::rtv::rtv_smooth_with;
use textwipe_core::{Exec, Image, SoftMask};
use textwipe_model::checkpoint;
use textwipe_model::extractor::{pretrain, PretrainConfig, TextureNet};
use textwipe_model::train::{infer, load_extractor};
use textwipe_model::{TrainConfig, Trainer};

use candle_core::Device;

#[derive(Parser)]
#[command(name = "textwipe", version, about = "Scene text removal with context guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SsimArg {
    Single,
    Multiscale,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset (input/, gt/, ann/).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Directory of photos to use as additional backgrounds.
        #[arg(long)]
        photos: Option<PathBuf>,
    },
    /// Smooth an image into its structure image.
    Structure {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config file to read the rtv_* keys from.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; its stored config wins over --config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Erase the annotated text from one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Annotation JSON; omit for an empty polygon list.
        #[arg(long)]
        ann: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Soft masks (8-bit grayscale PNGs named like the predictions).
        #[arg(long)]
        mask_dir: Option<PathBuf>,
        /// Original inputs, needed for --composite.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Paste unmasked pixels back from the inputs before scoring.
        #[arg(long)]
        composite: bool,
        #[arg(long, value_enum, default_value = "multiscale")]
        ssim: SsimArg,
        /// Skip the Fréchet feature distance.
        #[arg(long)]
        no_fdist: bool,
        /// Extractor weights for the Fréchet distance (default: bundled).
        #[arg(long)]
        extractor: Option<PathBuf>,
    },
    /// Pretrain the frozen feature extractor and write its weights.
    PretrainExtractor {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = PretrainConfig::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = PretrainConfig::default().steps)]
        steps: usize,
    },
    /// Print the default config as JSON.
    Config,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { out, n, seed, size, photos } => gen_data(&out, n, seed, size, photos.as_deref()),
        Command::Structure { image, out, config } => structure(&image, &out, config.as_deref()),
        Command::Train { config, data, out, resume } => train(config.as_deref(), &data, &out, resume.as_deref()),
        Command::Infer { ckpt, image, ann, out } => run_infer(&ckpt, &image, ann.as_deref(), &out),
        Command::Eval {
            pred,
            gt,
            mask_dir,
            input,
            composite,
            ssim,
            no_fdist,
            extractor,
        } => eval(EvalArgs {
            pred: &pred,
            gt: &gt,
            mask_dir: mask_dir.as_deref(),
            input: input.as_deref(),
            composite,
            ssim: match ssim {
                SsimArg::Single => SsimMode::Single,
                SsimArg::Multiscale => SsimMode::Multiscale,
            },
            fdist: !no_fdist,
            extractor: extractor.as_deref(),
        }),
        Command::PretrainExtractor { out, seed, steps } => pretrain_extractor(&out, seed, steps),
        Command::Config => {
            println!("{}", TrainConfig::default().to_json());
            Ok(())
        }
    }
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_json(&text).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))
        }
        None => Ok(TrainConfig::default()),
    }
}

fn gen_data(out: &Path, n: usize, seed: u64, size: usize, photos: Option<&Path>) -> Result<()> {
    let mut cfg = SynthConfig {
        image_size: size,
        seed,
        ..SynthConfig::default()
    };
    if let Some(dir) = photos {
        cfg = cfg.with_photo_dir(dir)?;
    }
    let samples: Vec<_> = Exec::default().map_range(n, |i| synth_sample(&cfg, i as u64));
    save_dataset(&samples, out)?;
    log::info!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn structure(image: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = read_config(config)?;
    let img = Image::load(image)?;
    let s = rtv_smooth_with(Exec::default(), &img, &cfg.rtv)?;
    s.clamp01().save_png(out)?;
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let device = Device::Cpu;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut trainer = match resume {
        Some(ckpt) => checkpoint::load_trainer(ckpt, None, &device)?,
        None => {
            let cfg = read_config(config)?;
            let extractor = load_extractor(&cfg, &device)?;
            Trainer::new(cfg, extractor, &device)?
        }
    };
    let cfg = trainer.config().clone();
    fs::write(out.join("config.json"), cfg.to_json())?;

    let dataset = load_dataset(data)?;
    if dataset.is_empty() {
        bail!("no samples in {}", data.display());
    }
    let raw = dataset.load_all()?;
    for s in &raw {
        if s.i_in.height() != cfg.image_size || s.i_in.width() != cfg.image_size {
            bail!(
                "sample {} is {}x{}, config image_size is {}",
                s.id,
                s.i_in.height(),
                s.i_in.width(),
                cfg.image_size
            );
        }
    }
    let cache = cfg.structure_cache.as_ref().map(StructureCache::new).transpose()?;
    log::info!("preparing {} samples", raw.len());
    let samples = prepare_samples(Exec::default(), &raw, cfg.mask_ratio, cfg.mask_mode, &cfg.rtv, cache.as_ref())?;

    let remaining = (cfg.max_steps as u64).saturating_sub(trainer.step()) as usize;
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("train_log.jsonl"))?;
    let started = std::time::Instant::now();
    trainer.fit(&samples, remaining, |b, t| {
        let line = b.to_json_line();
        writeln!(log_file, "{line}").map_err(|e| textwipe_model::ModelError::Io {
            path: "train_log.jsonl".into(),
            source: e,
        })?;
        if b.step % cfg.log_every as u64 == 0 || b.step == 1 {
            println!("{line}");
        }
        if b.step % cfg.checkpoint_every as u64 == 0 {
            checkpoint::save(t, &out.join(format!("ckpt_{:06}.safetensors", b.step)))?;
        }
        Ok(true)
    })?;
    checkpoint::save(&trainer, &out.join("final.safetensors"))?;
    log::info!(
        "finished at step {} in {:.1}s",
        trainer.step(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn run_infer(ckpt: &Path, image: &Path, ann: Option<&Path>, out: &Path) -> Result<()> {
    let device = Device::Cpu;
    let (gen, cfg) = checkpoint::load_generator(ckpt, &device)?;
    let img = Image::load(image)?;
    let polygons = match ann {
        Some(p) => AnnotationFile::read(p)?.to_polygons(&p.display().to_string())?,
        None => Vec::new(),
    };
    let (h, w, _) = img.shape();
    let exec = Exec::default();
    let mask = render_soft_mask_with(exec, &polygons, h, w, cfg.mask_ratio, cfg.mask_mode)?;
    let res = infer(&gen, exec, &img, &mask, &cfg.rtv)?;
    fs::create_dir_all(out)?;
    res.i_out.save_png(out.join("i_out.png"))?;
    res.i_com.save_png(out.join("i_com.png"))?;
    res.s_in.save_png(out.join("s_in.png"))?;
    if let Some(s) = &res.s_out {
        s.save_png(out.join("s_out.png"))?;
    }
    mask.to_image().save_png(out.join("mask.png"))?;
    log::info!("wrote results to {}", out.display());
    Ok(())
}

struct EvalArgs<'a> {
    pred: &'a Path,
    gt: &'a Path,
    mask_dir: Option<&'a Path>,
    input: Option<&'a Path>,
    composite: bool,
    ssim: SsimMode,
    fdist: bool,
    extractor: Option<&'a Path>,
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

fn paste_back(input: &Image, pred: &Image, mask: &SoftMask) -> Result<Image> {
    let (h, w, c) = pred.shape();
    if input.shape() != pred.shape() || (mask.height(), mask.width()) != (h, w) {
        bail!("composite inputs disagree in size");
    }
    Ok(Image::from_fn(h, w, c, |y, x, ch| {
        let m = mask.get(y, x);
        input.get(y, x, ch) * (1.0 - m) + pred.get(y, x, ch) * m
    }))
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.composite && (a.mask_dir.is_none() || a.input.is_none()) {
        bail!("--composite needs --mask-dir and --input");
    }
    let names = png_names(a.pred)?;
    if names.is_empty() {
        bail!("no PNG predictions in {}", a.pred.display());
    }
    let mut preds = Vec::with_capacity(names.len());
    let mut gts = Vec::with_capacity(names.len());
    for name in &names {
        let mut pred = Image::load(a.pred.join(name))?;
        let gt = Image::load(a.gt.join(name)).with_context(|| format!("ground truth for {name}"))?;
        if a.composite {
            let mask_img = Image::load(a.mask_dir.expect("checked").join(name))?;
            let mask = SoftMask::from_image(&mask_img).with_context(|| format!("mask {name} is not single-channel"))?;
            let input = Image::load(a.input.expect("checked").join(name))?;
            pred = paste_back(&input, &pred, &mask)?;
        }
        preds.push(pred);
        gts.push(gt);
    }
    let mut report = evaluate_pairs(Exec::default(), &preds, &gts, a.ssim)?;
    if a.fdist {
        if preds.len() < 2 {
            log::warn!("fdist needs at least two images; skipping");
        } else {
            let device = Device::Cpu;
            let net = match a.extractor {
                Some(p) => TextureNet::load(p, &device)?,
                None => TextureNet::bundled(&device)?,
            };
            let fa = net.feature_vectors(&preds, &device)?;
            let fb = net.feature_vectors(&gts, &device)?;
            report.fdist = Some(frechet_distance(&fa, &fb)?);
        }
    }
    println!("{}", serde_json::to_string(&report)?);
    println!("{report}");
    Ok(())
}

fn pretrain_extractor(out: &Path, seed: u64, steps: usize) -> Result<()> {
    let cfg = PretrainConfig {
        seed,
        steps,
        ..PretrainConfig::default()
    };
    let (net, report) = pretrain(&cfg, &Device::Cpu)?;
    net.save(out)?;
    println!(
        "{}",
        serde_json::json!({"final_loss": report.final_loss, "accuracy": report.accuracy, "out": out.display().to_string()})
    );
    Ok(())
}
