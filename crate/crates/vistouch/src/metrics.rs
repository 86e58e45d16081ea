//! Evaluation metrics: SSIM, PSNR, Fréchet distance over pluggable
//! features, cross-modal cosine score, and material-classification
//! consistency.

use crate::cvtp::ClipEncoder;
use crate::data::{ImageFrame, TactileClip};
use crate::error::{Error, Result};
use crate::scalar::{Scalar, Tensor};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// n x d feature matrix with the id of the extractor that produced it.
#[derive(Debug, Clone)]
pub struct FeatureSet<F: Scalar> {
    pub features: Tensor<F>,
    pub extractor_id: String,
}

impl<F: Scalar> FeatureSet<F> {
    pub fn new(features: Tensor<F>, extractor_id: impl Into<String>) -> Result<Self> {
        if features.ndim() != 2 {
            return Err(Error::validation("feature set must be [n, d]"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature values".into()));
        }
        Ok(FeatureSet {
            features,
            extractor_id: extractor_id.into(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    pub sample_count: usize,
    pub extractor_id: String,
    pub classifier_id: String,
    pub config_hash: String,
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01; // (k1 L)^2, L = 1
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

fn to_unit<F: Scalar>(img: &ImageFrame<F>) -> Vec<Vec<Vec<f64>>> {
    let (h, w) = (img.height(), img.width());
    (0..3)
        .map(|c| {
            (0..h)
                .map(|i| {
                    (0..w)
                        .map(|j| (img.pixels[IxDyn(&[c, i, j])].to_f64_() + 1.0) / 2.0)
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Windowed SSIM with an 11x11 Gaussian window (sigma 1.5) over valid
/// positions, averaged across windows and channels. Inputs are remapped
/// from [-1,1] to unit dynamic range.
pub fn ssim<F: Scalar>(a: &ImageFrame<F>, b: &ImageFrame<F>) -> Result<f64> {
    let (h, w) = (a.height(), a.width());
    if b.height() != h || b.width() != w {
        return Err(Error::validation("ssim: dimension mismatch"));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::validation(format!(
            "ssim: image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_kernel();
    let au = to_unit(a);
    let bu = to_unit(b);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for i0 in 0..=(h - SSIM_WINDOW) {
            for j0 in 0..=(w - SSIM_WINDOW) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for di in 0..SSIM_WINDOW {
                    for dj in 0..SSIM_WINDOW {
                        let wgt = k[di] * k[dj];
                        let x = au[c][i0 + di][j0 + dj];
                        let y = bu[c][i0 + di][j0 + dj];
                        mu_a += wgt * x;
                        mu_b += wgt * y;
                        aa += wgt * x * x;
                        bb += wgt * y * y;
                        ab += wgt * x * y;
                    }
                }
                let va = aa - mu_a * mu_a;
                let vb = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (va + vb + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Peak signal-to-noise ratio over unit dynamic range; identical inputs
/// are reported as the 100 dB cap.
pub fn psnr<F: Scalar>(a: &ImageFrame<F>, b: &ImageFrame<F>) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::validation("psnr: dimension mismatch"));
    }
    let n = a.pixels.len() as f64;
    let mse: f64 = a
        .pixels
        .iter()
        .zip(b.pixels.iter())
        .map(|(x, y)| {
            let d = (x.to_f64_() - y.to_f64_()) / 2.0; // unit range
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

/// Jacobi eigendecomposition of a symmetric matrix (column-major order is
/// irrelevant for symmetric input). Returns (eigenvalues, eigenvectors as
/// columns).
fn jacobi_eigh(m: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| a[i][i]).collect();
    (eig, v)
}

fn matmul_sq(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// Symmetric positive-semidefinite square root via eigendecomposition,
/// clamping slightly negative eigenvalues to zero.
fn sym_sqrt(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let (eig, v) = jacobi_eigh(m);
    let mut out = vec![vec![0.0; n]; n];
    for (idx, &lam) in eig.iter().enumerate() {
        let root = lam.max(0.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                out[i][j] += root * v[i][idx] * v[j][idx];
            }
        }
    }
    out
}

fn mean_and_cov<F: Scalar>(x: &Tensor<F>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mu = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mu[j] += x[IxDyn(&[i, j])].to_f64_();
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for i in 0..n {
        for j in 0..d {
            let dj = x[IxDyn(&[i, j])].to_f64_() - mu[j];
            for k in j..d {
                cov[j][k] += dj * (x[IxDyn(&[i, k])].to_f64_() - mu[k]);
            }
        }
    }
    for j in 0..d {
        for k in j..d {
            cov[j][k] /= (n - 1) as f64;
            cov[k][j] = cov[j][k];
        }
    }
    (mu, cov)
}

const EIG_CLAMP_TOL: f64 = -1e-8;

/// Fréchet distance between Gaussian fits of two feature sets:
/// |mu_A - mu_B|^2 + tr(S_A + S_B - 2 (S_A S_B)^{1/2}).
pub fn frechet_distance<F: Scalar>(a: &FeatureSet<F>, b: &FeatureSet<F>) -> Result<f64> {
    let (na, da) = (a.features.shape()[0], a.features.shape()[1]);
    let (nb, db) = (b.features.shape()[0], b.features.shape()[1]);
    if da != db {
        return Err(Error::validation("frechet: feature dims differ"));
    }
    if na < 2 || nb < 2 {
        return Err(Error::validation("frechet: need at least 2 samples per set"));
    }
    let (mu_a, cov_a) = mean_and_cov(&a.features);
    let (mu_b, cov_b) = mean_and_cov(&b.features);
    let d = da;
    let mean_term: f64 = (0..d).map(|j| (mu_a[j] - mu_b[j]).powi(2)).sum();
    // tr((S_A S_B)^{1/2}) computed as the eigenvalue sum of the symmetric
    // product sqrt(S_A) S_B sqrt(S_A); eigenvalues below -1e-8 are numeric
    // noise and are clamped to zero.
    let sa_root = sym_sqrt(&cov_a);
    let inner = matmul_sq(&matmul_sq(&sa_root, &cov_b), &sa_root);
    let (eig, _) = jacobi_eigh(&inner);
    let scale = eig.iter().cloned().fold(1.0f64, f64::max);
    if eig.iter().any(|&lam| lam < EIG_CLAMP_TOL * scale) {
        return Err(Error::Numeric(
            "covariance product eigenvalue below clamping tolerance".into(),
        ));
    }
    let tr_sqrt: f64 = eig.iter().map(|&lam| lam.max(0.0).sqrt()).sum();
    let tr_a: f64 = (0..d).map(|j| cov_a[j][j]).sum();
    let tr_b: f64 = (0..d).map(|j| cov_b[j][j]).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean cosine similarity between visual and tactile embeddings over
/// pairs. The single image is replicated across the fusion window on the
/// visual side; the touch clip likewise uses only its center frame,
/// replicated, matching the single-frame convention.
pub fn cvtp_score<F: Scalar>(
    images: &[ImageFrame<F>],
    touches: &[TactileClip<F>],
    visual_enc: &ClipEncoder<F>,
    tactile_enc: &ClipEncoder<F>,
) -> Result<f64> {
    if images.len() != touches.len() {
        return Err(Error::validation("cvtp_score: list length mismatch"));
    }
    if images.is_empty() {
        return Err(Error::validation("cvtp_score: empty input"));
    }
    let w = visual_enc.cfg.window;
    let mut total = 0.0;
    for (img, touch) in images.iter().zip(touches) {
        let vis_frames: Vec<ImageFrame<F>> = (0..w).map(|_| img.clone()).collect();
        let tac_frames: Vec<ImageFrame<F>> = (0..w).map(|_| touch.center().clone()).collect();
        let ev = embed_frames(visual_enc, &vis_frames)?;
        let et = embed_frames(tactile_enc, &tac_frames)?;
        let av: Vec<f64> = ev.iter().map(|v| v.to_f64_()).collect();
        let at: Vec<f64> = et.iter().map(|v| v.to_f64_()).collect();
        total += cosine(&av, &at);
    }
    Ok(total / images.len() as f64)
}

fn embed_frames<F: Scalar>(enc: &ClipEncoder<F>, frames: &[ImageFrame<F>]) -> Result<Tensor<F>> {
    let fused = crate::cvtp::fuse_frames(frames);
    let s = fused.shape().to_vec();
    let b = fused.into_shape(IxDyn(&[1, s[0], s[1], s[2]])).unwrap();
    Ok(enc.embed(&b)?.index_axis(ndarray::Axis(0), 0).to_owned())
}

/// Fraction of pairs whose classifier labels agree.
pub fn material_consistency<F: Scalar>(
    generated: &[ImageFrame<F>],
    reference: &[ImageFrame<F>],
    classify: impl Fn(&ImageFrame<F>) -> usize,
) -> Result<f64> {
    if generated.len() != reference.len() {
        return Err(Error::validation("material_consistency: count mismatch"));
    }
    if generated.is_empty() {
        return Err(Error::validation("material_consistency: empty input"));
    }
    let agree = generated
        .iter()
        .zip(reference)
        .filter(|(g, r)| classify(g) == classify(r))
        .count();
    Ok(agree as f64 / generated.len() as f64)
}
