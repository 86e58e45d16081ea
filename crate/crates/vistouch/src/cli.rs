//! Command-line surface: configuration with file + flag overrides, a
//! canonical config hash, and the subcommand pipelines binding data,
//! contrastive pretraining, diffusion training, sampling, and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::CheckpointArchive;
use crate::codec::CodecSpec;
use crate::cvtp::{
    fuse_tactile, fuse_visual, ClipEncoder, CvtpModel, CvtpTrainConfig, EncoderConfig,
};
use crate::data::{
    load_manifest, save_dataset, save_image_pm1, OracleClassifier, PairSample, ReflectanceMap,
    SynthParams,
};
use crate::error::{Error, Result};
use crate::metrics::{cvtp_score, frechet_distance, material_consistency, psnr, ssim, FeatureSet, MetricReport};
use crate::rng::Stream;
use crate::scalar::Tensor;
use crate::tasks::{
    generate_with_reference, image_to_touch, shading_estimate, stylize, touch_to_image, Bundle,
    ConcatSource, Direction, TaskSpec, TaskTrainConfig, train_task,
};

/// Working scalar type for all CLI pipelines.
type F = f64;

/// One flat configuration for every command; unknown-to-a-command fields
/// are simply unused. Defaults follow the defaults documented per module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// contrastive checkpoint used to initialize the condition encoder
    pub cvtp: Option<PathBuf>,
    pub direction: Direction,
    pub hand_free: bool,
    pub concat: ConcatSource,
    /// stylization noise level; defaults to t_max / 2 when unset
    pub n_level: Option<usize>,
    pub guidance_scale: f64,
    pub t_max: usize,
    /// reverse-chain length at inference
    pub steps: usize,
    /// diffusion optimization steps
    pub train_steps: usize,
    pub tau: f64,
    pub bank: usize,
    pub window: usize,
    pub lr_diffusion: f64,
    pub lr_cvtp: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub codec: CodecSpec,
    pub threads: usize,
    // synthetic dataset parameters
    pub pairs: usize,
    pub num_classes: usize,
    pub size: usize,
    pub occluder: bool,
    /// dataset entry operated on by sample/stylize/shade
    pub index: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            out: None,
            checkpoint: None,
            cvtp: None,
            direction: Direction::TouchToImage,
            hand_free: false,
            concat: ConcatSource::None,
            n_level: None,
            guidance_scale: 7.5,
            t_max: crate::diffusion::DEFAULT_T,
            steps: crate::diffusion::DEFAULT_STEPS,
            train_steps: 2000,
            tau: crate::cvtp::DEFAULT_TAU,
            bank: crate::cvtp::DEFAULT_BANK_SIZE,
            window: 5,
            lr_diffusion: 2e-6,
            lr_cvtp: 0.1,
            batch: 8,
            epochs: 30,
            seed: 0,
            codec: CodecSpec::identity(),
            threads: 1,
            pairs: 32,
            num_classes: 3,
            size: 64,
            occluder: false,
            index: 0,
        }
    }
}

impl RunConfig {
    /// Parse a config file (JSON object), rejecting unknown keys.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn n_level_or_default(&self) -> usize {
        self.n_level.unwrap_or(self.t_max / 2)
    }

    fn dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("missing dataset directory (--dataset)".into()))
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("missing output directory (--out)".into()))
    }

    fn checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("missing model bundle (--checkpoint)".into()))
    }

    fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            direction: self.direction,
            hand_free: self.hand_free,
            concat: self.concat,
            n_level: self.n_level_or_default(),
            guidance_scale: self.guidance_scale,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::Config("window must be odd and >= 1".into()));
        }
        Ok(())
    }
}

/// Canonical content hash: the config is serialized with a fixed field
/// order, so files that differ only in key order or formatting hash the
/// same, and any field change alters the hash.
pub fn config_hash(cfg: &RunConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(&bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Parser)]
#[command(name = "vistouch", about = "visuo-tactile cross-modal generation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired visuo-tactile dataset
    SynthData(Flags),
    /// Contrastive pretraining of the visual and tactile encoders
    TrainCvtp(Flags),
    /// Train the conditional latent diffusion model
    TrainDiffusion(Flags),
    /// Generate from a dataset clip with a trained bundle
    Sample(Flags),
    /// Tactile-driven stylization of a dataset image
    Stylize(Flags),
    /// Tactile-driven shading estimation
    Shade(Flags),
    /// Generate over a dataset and write a metric report
    Evaluate(Flags),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::TrainCvtp(_) => "train-cvtp",
            Command::TrainDiffusion(_) => "train-diffusion",
            Command::Sample(_) => "sample",
            Command::Stylize(_) => "stylize",
            Command::Shade(_) => "shade",
            Command::Evaluate(_) => "evaluate",
        }
    }

    fn flags(&self) -> &Flags {
        match self {
            Command::SynthData(f)
            | Command::TrainCvtp(f)
            | Command::TrainDiffusion(f)
            | Command::Sample(f)
            | Command::Stylize(f)
            | Command::Shade(f)
            | Command::Evaluate(f) => f,
        }
    }
}

/// Flag overrides; every field mirrors `RunConfig` and wins over the file.
#[derive(Debug, Default, Args)]
pub struct Flags {
    /// configuration file (JSON)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub cvtp: Option<PathBuf>,
    #[arg(long)]
    pub direction: Option<String>,
    #[arg(long)]
    pub hand_free: bool,
    #[arg(long)]
    pub concat: Option<String>,
    #[arg(long)]
    pub n_level: Option<usize>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub train_steps: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub bank: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub lr_diffusion: Option<f64>,
    #[arg(long)]
    pub lr_cvtp: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub occluder: bool,
    #[arg(long)]
    pub index: Option<usize>,
}

fn kebab<T: serde::de::DeserializeOwned>(field: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| Error::Config(format!("invalid {field} value: {v}")))
}

/// File config (when given) overlaid with flags; flags win.
pub fn resolve_config(flags: &Flags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = &flags.$f { cfg.$f = Some(v.clone()); } )* };
    }
    macro_rules! copy {
        ($($f:ident),*) => { $( if let Some(v) = flags.$f { cfg.$f = v; } )* };
    }
    set!(dataset, out, checkpoint, cvtp);
    copy!(guidance_scale, t_max, steps, train_steps, tau, bank, window, lr_diffusion, lr_cvtp, batch, epochs, seed, threads, pairs, num_classes, size, index);
    if let Some(v) = flags.n_level {
        cfg.n_level = Some(v);
    }
    if let Some(d) = &flags.direction {
        cfg.direction = kebab("direction", d)?;
    }
    if let Some(c) = &flags.concat {
        cfg.concat = kebab("concat", c)?;
    }
    if flags.hand_free {
        cfg.hand_free = true;
    }
    if flags.occluder {
        cfg.occluder = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    command: String,
    seed: u64,
    config_hash: String,
    config: RunConfig,
}

fn write_sidecar(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sidecar = Sidecar {
        command: command.to_string(),
        seed: cfg.seed,
        config_hash: config_hash(cfg),
        config: cfg.clone(),
    };
    let path = dir.join("sidecar.json");
    let text = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_dataset(cfg: &RunConfig) -> Result<Vec<PairSample<F>>> {
    let manifest = cfg.dataset()?.join("manifest.json");
    let c = (cfg.window - 1) / 2;
    load_manifest::<F>(&manifest, c)?.collect()
}

fn entry<'a>(data: &'a [PairSample<F>], index: usize) -> Result<&'a PairSample<F>> {
    data.get(index).ok_or_else(|| {
        Error::validation(format!("index {index} out of range ({} entries)", data.len()))
    })
}

/// Entry point used by the binary: dispatch, then write artifacts plus a
/// sidecar describing how to reproduce them.
pub fn run(command: &Command) -> Result<()> {
    let cfg = resolve_config(command.flags())?;
    match command {
        Command::SynthData(_) => synth_data(&cfg)?,
        Command::TrainCvtp(_) => cmd_train_cvtp(&cfg)?,
        Command::TrainDiffusion(_) => cmd_train_diffusion(&cfg)?,
        Command::Sample(_) => cmd_sample(&cfg)?,
        Command::Stylize(_) => cmd_stylize(&cfg)?,
        Command::Shade(_) => cmd_shade(&cfg)?,
        Command::Evaluate(_) => cmd_evaluate(&cfg)?,
    }
    write_sidecar(cfg.out()?, command.name(), &cfg)
}

fn synth_data(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out()?;
    let mut samples = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let params = SynthParams {
            roughness_class: i % cfg.num_classes,
            num_classes: cfg.num_classes,
            size: cfg.size,
            window: cfg.window,
            occluder: cfg.occluder,
            seed: Stream::new(cfg.seed, "synth-data", i as u64).next_u64(),
            ..SynthParams::default()
        };
        samples.push((format!("pair{i:04}"), crate::data::synth_pair::<F>(&params)));
    }
    save_dataset(out, &samples)
}

fn encoder_config(cfg: &RunConfig) -> EncoderConfig {
    EncoderConfig {
        tau: cfg.tau,
        ..EncoderConfig::desk(cfg.window)
    }
}

fn cmd_train_cvtp(cfg: &RunConfig) -> Result<()> {
    let data = load_dataset(cfg)?;
    let pairs: Vec<(Tensor<F>, Tensor<F>)> = data
        .iter()
        .map(|s| (fuse_visual(&s.visual), fuse_tactile(&s.tactile)))
        .collect();
    let mut model = CvtpModel::<F>::new(encoder_config(cfg), cfg.seed)?;
    let train = CvtpTrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch,
        lr: cfg.lr_cvtp,
        bank_size: cfg.bank,
        seed: cfg.seed,
        ..CvtpTrainConfig::default()
    };
    let losses = crate::cvtp::train_cvtp(&mut model, &pairs, &train)?;
    let out = cfg.out()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut archive = CheckpointArchive::new(serde_json::json!({
        "kind": "cvtp",
        "encoder": model.visual.cfg,
        "steps": losses.len(),
    }));
    archive.put_params("visual", &model.visual.params);
    archive.put_params("tactile", &model.tactile.params);
    archive.save(&out.join("cvtp.ckpt"))?;
    write_json(&out.join("losses.json"), &losses)
}

/// Condition encoder for a task: warm-started from a contrastive
/// checkpoint when one is given, freshly initialized otherwise.
fn condition_encoder(cfg: &RunConfig) -> Result<ClipEncoder<F>> {
    let side = match cfg.direction {
        Direction::TouchToImage => "tactile",
        Direction::ImageToTouch => "visual",
    };
    let mut enc = ClipEncoder::<F>::new(encoder_config(cfg), cfg.seed.wrapping_add(1))?;
    if let Some(path) = &cfg.cvtp {
        let archive = CheckpointArchive::load(path)?;
        archive.load_params(side, &mut enc.params)?;
    }
    Ok(enc)
}

fn cmd_train_diffusion(cfg: &RunConfig) -> Result<()> {
    let data = load_dataset(cfg)?;
    let spec = cfg.task_spec();
    let encoder = condition_encoder(cfg)?;
    let train = TaskTrainConfig {
        steps: cfg.train_steps,
        batch: cfg.batch,
        lr: cfg.lr_diffusion,
        seed: cfg.seed,
        codec: cfg.codec.clone(),
        t_max: cfg.t_max,
        ..TaskTrainConfig::default()
    };
    let (bundle, report) = train_task(&spec, &data, encoder, &train)?;
    let out = cfg.out()?;
    bundle.save(out)?;
    write_json(&out.join("losses.json"), &report.losses)
}

fn cmd_sample(cfg: &RunConfig) -> Result<()> {
    let bundle = Bundle::<F>::load(cfg.checkpoint()?)?;
    let data = load_dataset(cfg)?;
    let s = entry(&data, cfg.index)?;
    let mut rng = Stream::new(cfg.seed, "cli-sample", cfg.index as u64);
    let img = match (bundle.spec.direction, bundle.spec.concat) {
        (Direction::TouchToImage, ConcatSource::ReferenceImage) => {
            let reference = s.reference.as_ref().ok_or_else(|| {
                Error::Config("bundle needs a reference image; dataset entry has none".into())
            })?;
            generate_with_reference(&s.tactile, reference, &bundle, cfg.steps, &mut rng)?
        }
        (Direction::TouchToImage, ConcatSource::Reflectance) => {
            return Err(Error::Config(
                "reflectance-conditioned bundles are sampled with the shade command".into(),
            ))
        }
        (Direction::TouchToImage, ConcatSource::None) => {
            touch_to_image(&s.tactile, &bundle, cfg.steps, &mut rng)?
        }
        (Direction::ImageToTouch, _) => image_to_touch(&s.visual, &bundle, cfg.steps, &mut rng)?,
    };
    let out = cfg.out()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_image_pm1(&img, &out.join("sample.png"))
}

fn cmd_stylize(cfg: &RunConfig) -> Result<()> {
    let bundle = Bundle::<F>::load(cfg.checkpoint()?)?;
    let data = load_dataset(cfg)?;
    let s = entry(&data, cfg.index)?;
    let mut rng = Stream::new(cfg.seed, "cli-stylize", cfg.index as u64);
    let n = cfg.n_level.unwrap_or(bundle.schedule.t_max / 2);
    let img = stylize(s.visual.center(), &s.tactile, n, &bundle, cfg.steps, &mut rng)?;
    let out = cfg.out()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_image_pm1(&img, &out.join("stylized.png"))
}

fn cmd_shade(cfg: &RunConfig) -> Result<()> {
    let bundle = Bundle::<F>::load(cfg.checkpoint()?)?;
    let data = load_dataset(cfg)?;
    let s = entry(&data, cfg.index)?;
    let reflectance = s.reflectance.as_ref().ok_or_else(|| {
        Error::Config("shade requires a dataset with reflectance maps".into())
    })?;
    let mut rng = Stream::new(cfg.seed, "cli-shade", cfg.index as u64);
    let (img, shading) = shading_estimate(reflectance, &s.tactile, &bundle, cfg.steps, &mut rng)?;
    let out = cfg.out()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_image_pm1(&img, &out.join("sample.png"))?;
    // shading is a nonnegative ratio; clamp to [0,1] for the 8-bit file
    let clamped = ReflectanceMap::new(shading.mapv(|v| v.clamp(0.0, 1.0)))?;
    crate::data::save_reflectance(&clamped, &out.join("shading.png"))
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let bundle = Bundle::<F>::load(cfg.checkpoint()?)?;
    let data = load_dataset(cfg)?;
    if data.is_empty() {
        return Err(Error::validation("evaluate: dataset is empty"));
    }
    let mut generated = Vec::with_capacity(data.len());
    let mut reference = Vec::with_capacity(data.len());
    for (i, s) in data.iter().enumerate() {
        let mut rng = Stream::new(cfg.seed, "cli-evaluate", i as u64);
        let (img, target) = match bundle.spec.direction {
            Direction::TouchToImage => (
                touch_to_image(&s.tactile, &bundle, cfg.steps, &mut rng)?,
                s.visual.center().clone(),
            ),
            Direction::ImageToTouch => (
                image_to_touch(&s.visual, &bundle, cfg.steps, &mut rng)?,
                s.tactile.center().clone(),
            ),
        };
        generated.push(img);
        reference.push(target);
    }

    let mut ssim_acc = 0.0;
    let mut psnr_acc = 0.0;
    for (g, r) in generated.iter().zip(&reference) {
        ssim_acc += ssim(g, r)?;
        psnr_acc += psnr(g, r)?;
    }
    let n = generated.len() as f64;

    let extract = |imgs: &[crate::data::ImageFrame<F>]| -> Result<FeatureSet<F>> {
        let rows: Vec<Tensor<F>> = imgs
            .iter()
            .map(|img| {
                let frames: Vec<_> = (0..cfg.window).map(|_| img.clone()).collect();
                let fused = crate::cvtp::fuse_frames(&frames);
                let s = fused.shape().to_vec();
                let b = fused
                    .into_shape(ndarray::IxDyn(&[1, s[0], s[1], s[2]]))
                    .unwrap();
                bundle.encoder.features(&b)
            })
            .collect::<Result<_>>()?;
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        FeatureSet::new(
            ndarray::concatenate(ndarray::Axis(0), &views).unwrap(),
            "clip-trunk",
        )
    };
    let frechet = frechet_distance(&extract(&generated)?, &extract(&reference)?)?;

    let touches: Vec<_> = data.iter().map(|s| s.tactile.clone()).collect();
    let cvtp = cvtp_score(&generated, &touches, &bundle.encoder, &bundle.encoder)?;

    let classifier = OracleClassifier::calibrate(
        &SynthParams {
            num_classes: cfg.num_classes,
            size: cfg.size,
            window: cfg.window,
            seed: cfg.seed,
            ..SynthParams::default()
        },
        8,
    );
    let material = material_consistency(&generated, &reference, |f| classifier.classify(f))?;

    let mut values = BTreeMap::new();
    values.insert("ssim".to_string(), ssim_acc / n);
    values.insert("psnr".to_string(), psnr_acc / n);
    values.insert("frechet".to_string(), frechet);
    values.insert("cvtp".to_string(), cvtp);
    values.insert("material_consistency".to_string(), material);
    let report = MetricReport {
        values,
        sample_count: generated.len(),
        extractor_id: "clip-trunk".to_string(),
        classifier_id: classifier.id.clone(),
        config_hash: config_hash(cfg),
    };
    let out = cfg.out()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("report.json"), &report)
}
