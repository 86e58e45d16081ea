//! Task-level pipelines composing codec, contrastive encoders, and the
//! latent denoiser: touch->image, image->touch, hand-free training,
//! tactile-driven stylization, reference-conditioned generation, and
//! tactile-driven shading estimation.

use std::path::Path;

use ndarray::{Axis, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::CheckpointArchive;
use crate::codec::{Codec, CodecKind, CodecSpec, LearnedWeights};
use crate::cvtp::{encode_tactile_clip, encode_visual_clip, ClipEncoder, EncoderConfig};
use crate::data::{downsample_mask, ImageFrame, PairSample, ReflectanceMap, TactileClip, VisualClip};
use crate::diffusion::{
    BETA_START, BETA_END,
    eps_loss, EpsLossOpts, NoiseSchedule, SampleOpts, UNet, UNetConfig, sample, sdedit_sample,
};
use crate::error::{Error, Result};
use crate::nn::{Adam, Bound, Tape};
use crate::rng::Stream;
use crate::scalar::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    TouchToImage,
    ImageToTouch,
}

/// Source of extra channels concatenated to the noisy latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConcatSource {
    None,
    Reflectance,
    ReferenceImage,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub direction: Direction,
    pub hand_free: bool,
    pub concat: ConcatSource,
    /// stylization noise level, in [0, T]
    pub n_level: usize,
    pub guidance_scale: f64,
}

impl TaskSpec {
    pub fn touch_to_image() -> Self {
        TaskSpec {
            direction: Direction::TouchToImage,
            hand_free: false,
            concat: ConcatSource::None,
            n_level: crate::diffusion::DEFAULT_T / 2,
            guidance_scale: 7.5,
        }
    }

    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.concat == ConcatSource::Reflectance && self.direction != Direction::TouchToImage {
            return Err(Error::validation(
                "reflectance concatenation is only valid for touch->image",
            ));
        }
        if self.n_level > t_max {
            return Err(Error::validation(format!(
                "stylization level {} exceeds T={t_max}",
                self.n_level
            )));
        }
        Ok(())
    }

    /// Latent channels seen by the denoiser (3 plus any concatenated map).
    pub fn denoiser_in_channels(&self) -> usize {
        match self.concat {
            ConcatSource::None => 3,
            ConcatSource::Reflectance | ConcatSource::ReferenceImage => 6,
        }
    }
}

/// A trained, self-describing model: codec, schedule, condition encoder,
/// denoiser, task spec, and a fixed-seed sample fingerprint.
pub struct Bundle<F: Scalar> {
    pub spec: TaskSpec,
    pub codec: Codec<F>,
    pub schedule: NoiseSchedule,
    pub denoiser: UNet<F>,
    pub encoder: ClipEncoder<F>,
    /// side length of the generated (output-domain) square image
    pub out_size: usize,
    /// hex sha-256 of the fixed-seed fingerprint sample
    pub fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    spec: TaskSpec,
    codec: CodecSpec,
    t_max: usize,
    unet: UNetConfig,
    encoder: EncoderConfig,
    out_size: usize,
    fingerprint: String,
}

const MANIFEST_FILE: &str = "bundle.json";
const WEIGHTS_FILE: &str = "model.ckpt";
/// reverse-chain length used for the reproducibility fingerprint
const FINGERPRINT_STEPS: usize = 25;

impl<F: Scalar> Bundle<F> {
    /// Latent grid of the output domain.
    pub fn latent_dims(&self) -> (usize, usize) {
        self.codec.latent_dims(self.out_size, self.out_size)
    }

    /// Deterministic sample digest: one unconditional reverse chain from a
    /// fixed stream, hashed over the little-endian latent bytes.
    pub fn compute_fingerprint(&self) -> Result<String> {
        let (h, w) = self.latent_dims();
        let concat_zeros;
        let concat = if self.spec.denoiser_in_channels() > 3 {
            concat_zeros = Tensor::<F>::zeros(IxDyn(&[1, 3, h, w]));
            Some(&concat_zeros)
        } else {
            None
        };
        let opts = SampleOpts {
            cond: None,
            concat,
            guidance_scale: 0.0,
        };
        let steps = FINGERPRINT_STEPS.min(self.schedule.t_max);
        let mut rng = Stream::new(0, "bundle-fingerprint", 0);
        let z = sample(&self.denoiser, &self.schedule, &[1, 3, h, w], steps, &opts, &mut rng)?;
        let mut hasher = Sha256::new();
        for v in z.iter() {
            hasher.update(v.to_f64_().to_le_bytes());
        }
        Ok(hex_string(&hasher.finalize()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = BundleManifest {
            spec: self.spec.clone(),
            codec: self.codec.spec.clone(),
            t_max: self.schedule.t_max,
            unet: self.denoiser.cfg.clone(),
            encoder: self.encoder.cfg.clone(),
            out_size: self.out_size,
            fingerprint: self.fingerprint.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

        let mut archive = CheckpointArchive::new(serde_json::json!({ "kind": "bundle" }));
        archive.put_params("denoiser", &self.denoiser.params);
        archive.put_params("encoder", &self.encoder.params);
        if let Some(w) = &self.codec.learned {
            archive.put("codec.enc_weight", &w.enc_weight);
            archive.put("codec.enc_bias", &w.enc_bias);
            archive.put("codec.dec_weight", &w.dec_weight);
            archive.put("codec.dec_bias", &w.dec_bias);
        }
        archive.save(&dir.join(WEIGHTS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: BundleManifest = serde_json::from_str(&text)?;
        let archive = CheckpointArchive::load(&dir.join(WEIGHTS_FILE))?;

        let mut denoiser = UNet::<F>::new(manifest.unet, 0)?;
        archive.load_params("denoiser", &mut denoiser.params)?;
        let mut encoder = ClipEncoder::<F>::new(manifest.encoder, 0)?;
        archive.load_params("encoder", &mut encoder.params)?;
        let codec = if manifest.codec.kind == CodecKind::Learned {
            Codec::learned(
                manifest.codec.factor,
                LearnedWeights {
                    enc_weight: archive.get("codec.enc_weight")?,
                    enc_bias: archive.get("codec.enc_bias")?,
                    dec_weight: archive.get("codec.dec_weight")?,
                    dec_bias: archive.get("codec.dec_bias")?,
                },
            )?
        } else {
            Codec::analytic(manifest.codec)?
        };
        Ok(Bundle {
            spec: manifest.spec,
            codec,
            schedule: NoiseSchedule::linear(manifest.t_max, BETA_START, BETA_END)?,
            denoiser,
            encoder,
            out_size: manifest.out_size,
            fingerprint: manifest.fingerprint,
        })
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn batch_of_one<F: Scalar>(z: Tensor<F>) -> Tensor<F> {
    let mut shape = vec![1];
    shape.extend_from_slice(z.shape());
    z.into_shape(IxDyn(&shape)).unwrap()
}

fn unbatch<F: Scalar>(z: &Tensor<F>) -> Tensor<F> {
    z.index_axis(Axis(0), 0).to_owned()
}

/// Block-mean downsample of a [3,H,W] map to [3,h,w], remapped from [0,1]
/// to the latent's [-1,1] range.
fn downsample_map_pm1<F: Scalar>(pix: &Tensor<F>, h: usize, w: usize) -> Result<Tensor<F>> {
    let (hh, ww) = (pix.shape()[1], pix.shape()[2]);
    if h == 0 || w == 0 || hh % h != 0 || ww % w != 0 {
        return Err(Error::validation("map dims not divisible by latent dims"));
    }
    let (fy, fx) = (hh / h, ww / w);
    let mut out = Tensor::<F>::zeros(IxDyn(&[3, h, w]));
    let inv = 1.0 / (fy * fx) as f64;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in 0..fy {
                    for dx in 0..fx {
                        s += pix[[c, y * fy + dy, x * fx + dx]].to_f64_();
                    }
                }
                out[[c, y, x]] = F::of(2.0 * s * inv - 1.0);
            }
        }
    }
    Ok(out)
}

fn require_direction<F: Scalar>(bundle: &Bundle<F>, want: Direction) -> Result<()> {
    if bundle.spec.direction != want {
        return Err(Error::Config(format!(
            "bundle direction {:?} does not support this pipeline",
            bundle.spec.direction
        )));
    }
    Ok(())
}

/// Concatenated-conditioning channels for inference, resolved against the
/// bundle's spec. `extra` carries the reflectance or reference image when
/// the spec requires one.
fn resolve_concat<F: Scalar>(
    bundle: &Bundle<F>,
    extra: Option<&Tensor<F>>,
) -> Result<Option<Tensor<F>>> {
    match bundle.spec.concat {
        ConcatSource::None => Ok(None),
        _ => {
            let (h, w) = bundle.latent_dims();
            let m = extra.ok_or_else(|| {
                Error::Config("bundle requires a concatenated conditioning map".into())
            })?;
            Ok(Some(batch_of_one(downsample_map_pm1(m, h, w)?)))
        }
    }
}

fn generate<F: Scalar>(
    bundle: &Bundle<F>,
    cond: &Tensor<F>,
    concat: Option<&Tensor<F>>,
    steps: usize,
    rng: &mut Stream,
) -> Result<ImageFrame<F>> {
    let (h, w) = bundle.latent_dims();
    let opts = SampleOpts {
        cond: Some(cond),
        concat,
        guidance_scale: bundle.spec.guidance_scale,
    };
    let z = sample(&bundle.denoiser, &bundle.schedule, &[1, 3, h, w], steps, &opts, rng)?;
    bundle.codec.decode(&unbatch(&z))
}

/// Generate an image conditioned on a tactile clip.
pub fn touch_to_image<F: Scalar>(
    clip: &TactileClip<F>,
    bundle: &Bundle<F>,
    steps: usize,
    rng: &mut Stream,
) -> Result<ImageFrame<F>> {
    require_direction(bundle, Direction::TouchToImage)?;
    if bundle.spec.concat != ConcatSource::None {
        return Err(Error::Config(
            "bundle requires a conditioning map; use shading_estimate or generate_with_reference".into(),
        ));
    }
    let cond = encode_tactile_clip(&bundle.encoder, clip)?;
    generate(bundle, &cond, None, steps, rng)
}

/// Generate a tactile frame conditioned on a visual clip.
pub fn image_to_touch<F: Scalar>(
    clip: &VisualClip<F>,
    bundle: &Bundle<F>,
    steps: usize,
    rng: &mut Stream,
) -> Result<ImageFrame<F>> {
    require_direction(bundle, Direction::ImageToTouch)?;
    let cond = encode_visual_clip(&bundle.encoder, clip)?;
    generate(bundle, &cond, None, steps, rng)
}

/// Touch->image generation with a reference image concatenated in latent
/// space, sharing the reflectance-concatenation code path.
pub fn generate_with_reference<F: Scalar>(
    clip: &TactileClip<F>,
    reference: &ImageFrame<F>,
    bundle: &Bundle<F>,
    steps: usize,
    rng: &mut Stream,
) -> Result<ImageFrame<F>> {
    require_direction(bundle, Direction::TouchToImage)?;
    if bundle.spec.concat != ConcatSource::ReferenceImage {
        return Err(Error::Config(
            "bundle was not trained with reference-image concatenation".into(),
        ));
    }
    // references are stored in [-1,1]; the shared downsampler expects [0,1]
    let unit = reference.pixels.mapv(|v| F::of(0.5 * (v.to_f64_() + 1.0)));
    let concat = resolve_concat(bundle, Some(&unit))?;
    let cond = encode_tactile_clip(&bundle.encoder, clip)?;
    generate(bundle, &cond, concat.as_ref(), steps, rng)
}

/// Partially re-noise an image and denoise it under tactile conditioning,
/// so the result "feels" like the target touch. n = 0 is the codec
/// roundtrip; n = T discards the input entirely.
pub fn stylize<F: Scalar>(
    image: &ImageFrame<F>,
    target_touch: &TactileClip<F>,
    n_level: usize,
    bundle: &Bundle<F>,
    steps: usize,
    rng: &mut Stream,
) -> Result<ImageFrame<F>> {
    require_direction(bundle, Direction::TouchToImage)?;
    if n_level > bundle.schedule.t_max {
        return Err(Error::validation(format!(
            "noise level {n_level} exceeds T={}",
            bundle.schedule.t_max
        )));
    }
    let z0 = batch_of_one(bundle.codec.encode(image)?);
    let cond = encode_tactile_clip(&bundle.encoder, target_touch)?;
    let opts = SampleOpts {
        cond: Some(&cond),
        concat: None,
        guidance_scale: bundle.spec.guidance_scale,
    };
    let z = sdedit_sample(&bundle.denoiser, &bundle.schedule, &z0, n_level, steps, &opts, rng)?;
    bundle.codec.decode(&unbatch(&z))
}

/// Generate an image under tactile conditioning with the reflectance
/// concatenated in latent space, and report the implied shading
/// `image / reflectance` (unit range, eps-guarded denominator).
pub fn shading_estimate<F: Scalar>(
    reflectance: &ReflectanceMap<F>,
    clip: &TactileClip<F>,
    bundle: &Bundle<F>,
    steps: usize,
    rng: &mut Stream,
) -> Result<(ImageFrame<F>, Tensor<F>)> {
    require_direction(bundle, Direction::TouchToImage)?;
    if bundle.spec.concat != ConcatSource::Reflectance {
        return Err(Error::Config(
            "bundle was not trained with reflectance concatenation".into(),
        ));
    }
    let concat = resolve_concat(bundle, Some(&reflectance.pixels))?;
    let cond = encode_tactile_clip(&bundle.encoder, clip)?;
    let img = generate(bundle, &cond, concat.as_ref(), steps, rng)?;
    let mut shading = Tensor::<F>::zeros(IxDyn(img.pixels.shape()));
    for (o, (x, r)) in shading
        .iter_mut()
        .zip(img.pixels.iter().zip(reflectance.pixels.iter()))
    {
        let unit = 0.5 * (x.to_f64_() + 1.0);
        *o = F::of(unit / (r.to_f64_() + 1e-3));
    }
    Ok((img, shading))
}

#[derive(Debug, Clone)]
pub struct TaskTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// probability of dropping the condition for a whole step (trains the
    /// null-condition branch used by guidance)
    pub drop_prob: f64,
    pub seed: u64,
    pub codec: CodecSpec,
    pub t_max: usize,
}

impl Default for TaskTrainConfig {
    fn default() -> Self {
        TaskTrainConfig {
            steps: 2000,
            batch: 4,
            lr: 2e-6,
            drop_prob: 0.1,
            seed: 0,
            codec: CodecSpec::identity(),
            t_max: crate::diffusion::DEFAULT_T,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// eps loss per optimization step
    pub losses: Vec<f64>,
}

struct TrainItem<F: Scalar> {
    z0: Tensor<F>,
    fused_cond: Tensor<F>,
    mask: Option<Tensor<F>>,
    concat: Option<Tensor<F>>,
}

/// Pre-flight check and per-sample preprocessing: encode targets to the
/// latent grid, fuse conditioning clips, and downsample masks/maps.
fn prepare_items<F: Scalar>(
    spec: &TaskSpec,
    dataset: &[PairSample<F>],
    codec: &Codec<F>,
) -> Result<(Vec<TrainItem<F>>, usize)> {
    if dataset.is_empty() {
        return Err(Error::validation("training dataset is empty"));
    }
    for s in dataset {
        if spec.hand_free && s.mask.is_none() {
            return Err(Error::validation(format!(
                "hand-free training requires masks; sample {} has none",
                s.id
            )));
        }
        if spec.concat == ConcatSource::Reflectance && s.reflectance.is_none() {
            return Err(Error::validation(format!(
                "reflectance conditioning requires reflectance maps; sample {} has none",
                s.id
            )));
        }
        if spec.concat == ConcatSource::ReferenceImage && s.reference.is_none() {
            return Err(Error::validation(format!(
                "reference conditioning requires reference images; sample {} has none",
                s.id
            )));
        }
    }
    let mut items = Vec::with_capacity(dataset.len());
    let mut out_size = 0;
    for s in dataset {
        let (target, fused_cond) = match spec.direction {
            Direction::TouchToImage => (s.visual.center(), crate::cvtp::fuse_tactile(&s.tactile)),
            Direction::ImageToTouch => (s.tactile.center(), crate::cvtp::fuse_visual(&s.visual)),
        };
        out_size = target.height();
        let (h, w) = codec.latent_dims(target.height(), target.width());
        let z0 = batch_of_one(codec.encode(target)?);
        let mask = match (spec.hand_free, &s.mask) {
            (true, Some(m)) => Some(downsample_mask(m, h, w)?),
            _ => None,
        };
        let concat = match spec.concat {
            ConcatSource::None => None,
            ConcatSource::Reflectance => {
                let r = &s.reflectance.as_ref().unwrap().pixels;
                Some(batch_of_one(downsample_map_pm1(r, h, w)?))
            }
            ConcatSource::ReferenceImage => {
                let px = &s.reference.as_ref().unwrap().pixels;
                let unit = px.mapv(|v| F::of(0.5 * (v.to_f64_() + 1.0)));
                Some(batch_of_one(downsample_map_pm1(&unit, h, w)?))
            }
        };
        items.push(TrainItem {
            z0,
            fused_cond: batch_of_one(fused_cond),
            mask,
            concat,
        });
    }
    Ok((items, out_size))
}

/// Jointly train the denoiser and the condition encoder on the eps
/// objective. The encoder starts from the given (typically contrastively
/// pretrained) weights and is fine-tuned.
pub fn train_task<F: Scalar>(
    spec: &TaskSpec,
    dataset: &[PairSample<F>],
    encoder: ClipEncoder<F>,
    cfg: &TaskTrainConfig,
) -> Result<(Bundle<F>, TrainReport)> {
    spec.validate(cfg.t_max)?;
    let codec = Codec::analytic(cfg.codec.clone())?;
    let (items, out_size) = prepare_items(spec, dataset, &codec)?;
    let schedule = NoiseSchedule::linear(cfg.t_max, BETA_START, BETA_END)?;
    let unet_cfg = UNetConfig::desk(spec.denoiser_in_channels(), 3, encoder.cfg.embed_dim);
    let mut denoiser = UNet::<F>::new(unet_cfg, cfg.seed)?;
    let mut encoder = encoder;

    let mut opt_d = Adam::new(cfg.lr);
    let mut opt_e = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch_rng = Stream::new(cfg.seed, "task-batch", step as u64);
        let mut noise_rng = Stream::new(cfg.seed, "task-noise", step as u64);
        let drop_cond = batch_rng.next_f64() < cfg.drop_prob;

        let mut tape = Tape::new();
        let bound_d = Bound::new(&mut tape, &denoiser.params);
        let bound_e = Bound::new(&mut tape, &encoder.params);
        let mut total = None;
        for _ in 0..cfg.batch {
            let item = &items[batch_rng.next_below(items.len() as u64) as usize];
            let cond_var = if drop_cond {
                None
            } else {
                let fused = tape.leaf(item.fused_cond.clone());
                Some(encoder.forward(&mut tape, &bound_e, fused)?)
            };
            let opts = EpsLossOpts {
                mask: item.mask.as_ref(),
                concat: item.concat.as_ref(),
            };
            let li = eps_loss(
                &mut tape,
                &item.z0,
                &opts,
                &schedule,
                &mut noise_rng,
                |tape, z_in, t| denoiser.forward(tape, &bound_d, z_in, t, cond_var),
            )?;
            total = Some(match total {
                None => li,
                Some(acc) => tape.add(acc, li),
            });
        }
        let total = total.unwrap();
        let loss = tape.scale(total, F::of(1.0 / cfg.batch as f64));
        losses.push(tape.value(loss).iter().next().unwrap().to_f64_());
        let grads = tape.backward(loss);
        opt_d.step(&mut denoiser.params, &bound_d.grads(&grads));
        if !drop_cond {
            opt_e.step(&mut encoder.params, &bound_e.grads(&grads));
        }
    }

    let mut bundle = Bundle {
        spec: spec.clone(),
        codec,
        schedule,
        denoiser,
        encoder,
        out_size,
        fingerprint: String::new(),
    };
    bundle.fingerprint = bundle.compute_fingerprint()?;
    Ok((bundle, TrainReport { losses }))
}
