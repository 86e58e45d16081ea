//! Dataset types, manifest ingest, and the procedural visuo-tactile
//! generator used for desk-scale verification.

mod io;
mod synth;

pub use io::{
    load_manifest, save_dataset, save_image_pm1, save_mask, save_reflectance, Manifest,
    ManifestEntry, PairSample,
};
pub use synth::{
    contact_area, synth_pair, GradientOracle, OracleClassifier, SynthParams, SynthSample,
};

use crate::error::{Error, Result};
use crate::scalar::{Scalar, Tensor};
use ndarray::IxDyn;

/// RGB image with values in [-1, 1], stored channel-first as [3, H, W].
#[derive(Debug, Clone)]
pub struct ImageFrame<F: Scalar> {
    pub pixels: Tensor<F>,
}

impl<F: Scalar> ImageFrame<F> {
    pub fn new(pixels: Tensor<F>) -> Result<Self> {
        if pixels.ndim() != 3 || pixels.shape()[0] != 3 {
            return Err(Error::validation(format!(
                "image must be [3,H,W], got {:?}",
                pixels.shape()
            )));
        }
        let lo = F::of(-1.0 - 1e-6);
        let hi = F::of(1.0 + 1e-6);
        if pixels.iter().any(|v| *v < lo || *v > hi || !v.is_finite()) {
            return Err(Error::Validation("image values outside [-1,1]".into()));
        }
        Ok(ImageFrame { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Temporal window of tactile sensor frames centered on the contact frame.
#[derive(Debug, Clone)]
pub struct TactileClip<F: Scalar> {
    pub frames: Vec<ImageFrame<F>>,
}

/// Temporal window of visual frames, same convention as [`TactileClip`].
#[derive(Debug, Clone)]
pub struct VisualClip<F: Scalar> {
    pub frames: Vec<ImageFrame<F>>,
}

fn validate_clip<F: Scalar>(frames: &[ImageFrame<F>]) -> Result<()> {
    if frames.is_empty() || frames.len() % 2 == 0 {
        return Err(Error::validation(format!(
            "clip length must be odd, got {}",
            frames.len()
        )));
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    if frames.iter().any(|f| f.height() != h || f.width() != w) {
        return Err(Error::Validation("clip frames differ in size".into()));
    }
    Ok(())
}

impl<F: Scalar> TactileClip<F> {
    pub fn new(frames: Vec<ImageFrame<F>>) -> Result<Self> {
        validate_clip(&frames)?;
        Ok(TactileClip { frames })
    }

    pub fn center(&self) -> &ImageFrame<F> {
        &self.frames[self.frames.len() / 2]
    }

    pub fn window(&self) -> usize {
        self.frames.len()
    }
}

impl<F: Scalar> VisualClip<F> {
    pub fn new(frames: Vec<ImageFrame<F>>) -> Result<Self> {
        validate_clip(&frames)?;
        Ok(VisualClip { frames })
    }

    pub fn center(&self) -> &ImageFrame<F> {
        &self.frames[self.frames.len() / 2]
    }

    pub fn window(&self) -> usize {
        self.frames.len()
    }
}

/// Binary segmentation mask [H, W]: 0 = hand/sensor pixel (excluded from
/// loss), 1 = scene pixel.
#[derive(Debug, Clone)]
pub struct SegMask<F: Scalar> {
    pub mask: Tensor<F>,
}

impl<F: Scalar> SegMask<F> {
    pub fn new(mask: Tensor<F>) -> Result<Self> {
        if mask.ndim() != 2 {
            return Err(Error::validation("mask must be [H,W]"));
        }
        if mask.iter().any(|v| *v != F::zero() && *v != F::one()) {
            return Err(Error::Validation("mask values must be exactly 0 or 1".into()));
        }
        Ok(SegMask { mask })
    }
}

/// Per-pixel albedo [3, H, W] with values in [0, 1].
#[derive(Debug, Clone)]
pub struct ReflectanceMap<F: Scalar> {
    pub pixels: Tensor<F>,
}

impl<F: Scalar> ReflectanceMap<F> {
    pub fn new(pixels: Tensor<F>) -> Result<Self> {
        if pixels.ndim() != 3 || pixels.shape()[0] != 3 {
            return Err(Error::validation("reflectance must be [3,H,W]"));
        }
        if pixels.iter().any(|v| *v < F::zero() || *v > F::one()) {
            return Err(Error::Validation("reflectance values outside [0,1]".into()));
        }
        Ok(ReflectanceMap { pixels })
    }
}

/// Conservative block-minimum downsampling of a segmentation mask to the
/// latent grid: a latent cell is kept only if every source pixel in its
/// block is kept.
pub fn downsample_mask<F: Scalar>(mask: &SegMask<F>, h: usize, w_lat: usize) -> Result<Tensor<F>> {
    let (hh, ww) = (mask.mask.shape()[0], mask.mask.shape()[1]);
    if h == 0 || w_lat == 0 || hh % h != 0 || ww % w_lat != 0 {
        return Err(Error::validation(format!(
            "mask {hh}x{ww} not divisible into {h}x{w_lat} cells"
        )));
    }
    let (bh, bw) = (hh / h, ww / w_lat);
    let mut out = Tensor::ones(IxDyn(&[h, w_lat]));
    for i in 0..h {
        for j in 0..w_lat {
            let mut m = F::one();
            for di in 0..bh {
                for dj in 0..bw {
                    let v = mask.mask[IxDyn(&[i * bh + di, j * bw + dj])];
                    if v < m {
                        m = v;
                    }
                }
            }
            out[IxDyn(&[i, j])] = m;
        }
    }
    Ok(out)
}
