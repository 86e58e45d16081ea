//! Latent codec: maps images into the space where diffusion operates and
//! back. The default desk-scale configuration is the identity codec at
//! reduced resolution; a pool codec and a pluggable learned codec sit
//! behind the same interface.

use crate::data::ImageFrame;
use crate::error::{Error, Result};
use crate::scalar::{Scalar, Tensor};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecKind {
    /// Diffusion runs directly in pixel space: factor 1.
    Identity,
    /// Block-mean encode, nearest-neighbor decode.
    Pool,
    /// Per-block affine codec with externally supplied weights.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub kind: CodecKind,
    pub factor: usize,
}

impl CodecSpec {
    pub fn identity() -> Self {
        CodecSpec {
            kind: CodecKind::Identity,
            factor: 1,
        }
    }

    pub fn pool(factor: usize) -> Self {
        CodecSpec {
            kind: CodecKind::Pool,
            factor,
        }
    }
}

/// Optional weights for the `Learned` kind: per-block affine encode and
/// decode matrices over flattened f*f*3 blocks.
#[derive(Debug, Clone)]
pub struct LearnedWeights<F: Scalar> {
    /// [3*f*f, 3] block -> latent channels
    pub enc_weight: Tensor<F>,
    pub enc_bias: Tensor<F>,
    /// [3, 3*f*f] latent channels -> block
    pub dec_weight: Tensor<F>,
    pub dec_bias: Tensor<F>,
}

/// A codec instance; `Learned` requires weights, the analytic kinds do not.
pub struct Codec<F: Scalar> {
    pub spec: CodecSpec,
    pub learned: Option<LearnedWeights<F>>,
}

impl<F: Scalar> Codec<F> {
    pub fn analytic(spec: CodecSpec) -> Result<Self> {
        if spec.kind == CodecKind::Learned {
            return Err(Error::Config(
                "learned codec requires a weight archive".into(),
            ));
        }
        if spec.factor == 0 {
            return Err(Error::validation("codec factor must be >= 1"));
        }
        Ok(Codec {
            spec,
            learned: None,
        })
    }

    pub fn learned(factor: usize, weights: LearnedWeights<F>) -> Result<Self> {
        let d = 3 * factor * factor;
        if weights.enc_weight.shape() != [d, 3]
            || weights.dec_weight.shape() != [3, d]
            || weights.enc_bias.shape() != [3]
            || weights.dec_bias.shape() != [d]
        {
            return Err(Error::Checkpoint("learned codec weight shapes".into()));
        }
        Ok(Codec {
            spec: CodecSpec {
                kind: CodecKind::Learned,
                factor,
            },
            learned: Some(weights),
        })
    }

    /// Image [3,H,W] -> latent [3, H/f, W/f].
    pub fn encode(&self, x: &ImageFrame<F>) -> Result<Tensor<F>> {
        let f = self.spec.factor;
        let (h, w) = (x.height(), x.width());
        if h % f != 0 || w % f != 0 {
            return Err(Error::validation(format!(
                "image {h}x{w} not divisible by codec factor {f}"
            )));
        }
        match self.spec.kind {
            CodecKind::Identity => Ok(x.pixels.clone()),
            CodecKind::Pool => {
                let (hl, wl) = (h / f, w / f);
                let inv = F::of(1.0 / (f * f) as f64);
                let mut z = Tensor::zeros(IxDyn(&[3, hl, wl]));
                for c in 0..3 {
                    for i in 0..hl {
                        for j in 0..wl {
                            let mut s = F::zero();
                            for di in 0..f {
                                for dj in 0..f {
                                    s = s + x.pixels[IxDyn(&[c, i * f + di, j * f + dj])];
                                }
                            }
                            let v = (s * inv).max(-F::one()).min(F::one());
                            z[IxDyn(&[c, i, j])] = v;
                        }
                    }
                }
                Ok(z)
            }
            CodecKind::Learned => {
                let lw = self.learned.as_ref().expect("learned weights present");
                let (hl, wl) = (h / f, w / f);
                let d = 3 * f * f;
                let mut z = Tensor::zeros(IxDyn(&[3, hl, wl]));
                for i in 0..hl {
                    for j in 0..wl {
                        for c_out in 0..3 {
                            let mut acc = lw.enc_bias[IxDyn(&[c_out])];
                            for k in 0..d {
                                let (c, di, dj) = (k / (f * f), (k / f) % f, k % f);
                                acc = acc
                                    + lw.enc_weight[IxDyn(&[k, c_out])]
                                        * x.pixels[IxDyn(&[c, i * f + di, j * f + dj])];
                            }
                            z[IxDyn(&[c_out, i, j])] = acc;
                        }
                    }
                }
                Ok(z)
            }
        }
    }

    /// Latent [3,h,w] -> image [3, h*f, w*f], clamped to [-1,1].
    pub fn decode(&self, z: &Tensor<F>) -> Result<ImageFrame<F>> {
        if z.ndim() != 3 || z.shape()[0] != 3 {
            return Err(Error::validation(format!(
                "latent must be [3,h,w], got {:?}",
                z.shape()
            )));
        }
        let f = self.spec.factor;
        let (hl, wl) = (z.shape()[1], z.shape()[2]);
        let clamp = |v: F| v.max(-F::one()).min(F::one());
        match self.spec.kind {
            CodecKind::Identity => ImageFrame::new(z.mapv(clamp)),
            CodecKind::Pool => {
                let mut x = Tensor::zeros(IxDyn(&[3, hl * f, wl * f]));
                for c in 0..3 {
                    for i in 0..hl {
                        for j in 0..wl {
                            let v = clamp(z[IxDyn(&[c, i, j])]);
                            for di in 0..f {
                                for dj in 0..f {
                                    x[IxDyn(&[c, i * f + di, j * f + dj])] = v;
                                }
                            }
                        }
                    }
                }
                ImageFrame::new(x)
            }
            CodecKind::Learned => {
                let lw = self.learned.as_ref().expect("learned weights present");
                let d = 3 * f * f;
                let mut x = Tensor::zeros(IxDyn(&[3, hl * f, wl * f]));
                for i in 0..hl {
                    for j in 0..wl {
                        for k in 0..d {
                            let (c, di, dj) = (k / (f * f), (k / f) % f, k % f);
                            let mut acc = lw.dec_bias[IxDyn(&[k])];
                            for c_in in 0..3 {
                                acc = acc
                                    + lw.dec_weight[IxDyn(&[c_in, k])] * z[IxDyn(&[c_in, i, j])];
                            }
                            x[IxDyn(&[c, i * f + di, j * f + dj])] = clamp(acc);
                        }
                    }
                }
                ImageFrame::new(x)
            }
        }
    }

    /// Latent spatial dims for an image of the given size.
    pub fn latent_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.spec.factor, w / self.spec.factor)
    }
}
