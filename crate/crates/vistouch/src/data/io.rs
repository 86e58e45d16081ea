//! Dataset layout on disk: a `manifest.json` index plus lossless 8-bit
//! image files. Pixels are normalized to [-1, 1] on load; masks are
//! single-channel files thresholded at 128 (0 = hand, 255 = keep);
//! reflectance maps to [0, 1].

use super::{ImageFrame, ReflectanceMap, SegMask, SynthSample, TactileClip, VisualClip};
use crate::error::{Error, Result};
use crate::scalar::{Scalar, Tensor};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub visual: Vec<PathBuf>,
    pub tactile: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflectance: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    pub label: u32,
    /// Index of the designated contact (center) frame within the entry.
    pub contact_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

/// One loaded dataset item.
#[derive(Debug)]
pub struct PairSample<F: Scalar> {
    pub id: String,
    pub visual: VisualClip<F>,
    pub tactile: TactileClip<F>,
    pub mask: Option<SegMask<F>>,
    pub reflectance: Option<ReflectanceMap<F>>,
    pub reference: Option<ImageFrame<F>>,
    pub label: usize,
}

fn read_rgb8(path: &Path) -> Result<image::RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

/// 8-bit RGB -> [3,H,W], affine map u -> 2u/255 - 1.
pub fn load_image_pm1<F: Scalar>(path: &Path) -> Result<ImageFrame<F>> {
    let img = read_rgb8(path)?;
    let (w, h) = img.dimensions();
    let mut t = Tensor::<F>::zeros(IxDyn(&[3, h as usize, w as usize]));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t[IxDyn(&[c, y as usize, x as usize])] = F::of(2.0 * p.0[c] as f64 / 255.0 - 1.0);
        }
    }
    ImageFrame::new(t)
}

pub fn load_reflectance<F: Scalar>(path: &Path) -> Result<ReflectanceMap<F>> {
    let img = read_rgb8(path)?;
    let (w, h) = img.dimensions();
    let mut t = Tensor::<F>::zeros(IxDyn(&[3, h as usize, w as usize]));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t[IxDyn(&[c, y as usize, x as usize])] = F::of(p.0[c] as f64 / 255.0);
        }
    }
    ReflectanceMap::new(t)
}

pub fn load_mask<F: Scalar>(path: &Path) -> Result<SegMask<F>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut t = Tensor::<F>::zeros(IxDyn(&[h as usize, w as usize]));
    for (x, y, p) in img.enumerate_pixels() {
        t[IxDyn(&[y as usize, x as usize])] = if p.0[0] >= 128 { F::one() } else { F::zero() };
    }
    SegMask::new(t)
}

/// [-1,1] image -> 8-bit RGB file (round-to-nearest quantization).
pub fn save_image_pm1<F: Scalar>(img: &ImageFrame<F>, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v01 = (img.pixels[IxDyn(&[c, i, j])].to_f64_() + 1.0) / 2.0;
                px[c] = (v01 * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_reflectance<F: Scalar>(map: &ReflectanceMap<F>, path: &Path) -> Result<()> {
    let (h, w) = (map.pixels.shape()[1], map.pixels.shape()[2]);
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = map.pixels[IxDyn(&[c, i, j])].to_f64_();
                px[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_mask<F: Scalar>(mask: &SegMask<F>, path: &Path) -> Result<()> {
    let (h, w) = (mask.mask.shape()[0], mask.mask.shape()[1]);
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let v = if mask.mask[IxDyn(&[i, j])] == F::one() { 255 } else { 0 };
            out.put_pixel(j as u32, i as u32, image::Luma([v]));
        }
    }
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Load a manifest and stream its entries as clips with window
/// half-size `c` centered on each entry's designated contact frame.
pub fn load_manifest<F: Scalar>(
    path: &Path,
    c: usize,
) -> Result<impl Iterator<Item = Result<PairSample<F>>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let root = path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(manifest
        .entries
        .into_iter()
        .map(move |entry| load_entry(&root, entry, c)))
}

fn load_entry<F: Scalar>(root: &Path, entry: ManifestEntry, c: usize) -> Result<PairSample<F>> {
    let w = 2 * c + 1;
    let id = entry.id.clone();
    let fail = |msg: String| Error::Dataset {
        entry: id.clone(),
        msg,
    };
    if entry.visual.len() != entry.tactile.len() {
        return Err(fail(format!(
            "visual/tactile frame counts differ ({} vs {})",
            entry.visual.len(),
            entry.tactile.len()
        )));
    }
    if entry.visual.len() < w {
        return Err(fail(format!(
            "needs at least {w} frames, has {}",
            entry.visual.len()
        )));
    }
    let center = entry.contact_index;
    if center < c || center + c >= entry.visual.len() {
        return Err(fail(format!(
            "contact index {center} leaves no room for window {w}"
        )));
    }
    let load_clip = |paths: &[PathBuf]| -> Result<Vec<ImageFrame<F>>> {
        paths[center - c..=center + c]
            .iter()
            .map(|p| {
                load_image_pm1(&root.join(p)).map_err(|e| Error::Dataset {
                    entry: id.clone(),
                    msg: e.to_string(),
                })
            })
            .collect()
    };
    let visual = VisualClip::new(load_clip(&entry.visual)?)?;
    let tactile = TactileClip::new(load_clip(&entry.tactile)?)?;
    let with_entry = |e: Error| Error::Dataset {
        entry: entry.id.clone(),
        msg: e.to_string(),
    };
    let mask = entry
        .mask
        .as_ref()
        .map(|p| load_mask(&root.join(p)).map_err(with_entry))
        .transpose()?;
    let reflectance = entry
        .reflectance
        .as_ref()
        .map(|p| load_reflectance(&root.join(p)).map_err(with_entry))
        .transpose()?;
    let reference = entry
        .reference
        .as_ref()
        .map(|p| load_image_pm1(&root.join(p)).map_err(with_entry))
        .transpose()?;
    Ok(PairSample {
        id: entry.id,
        visual,
        tactile,
        mask,
        reflectance,
        reference,
        label: entry.label as usize,
    })
}

/// Write synthesized samples as a dataset tree rooted at `root`.
pub fn save_dataset<F: Scalar>(root: &Path, samples: &[(String, SynthSample<F>)]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (id, s) in samples {
        let dir = root.join(id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut visual = Vec::new();
        let mut tactile = Vec::new();
        for (k, frame) in s.visual.frames.iter().enumerate() {
            let rel = PathBuf::from(id).join(format!("visual_{k}.png"));
            save_image_pm1(frame, &root.join(&rel))?;
            visual.push(rel);
        }
        for (k, frame) in s.tactile.frames.iter().enumerate() {
            let rel = PathBuf::from(id).join(format!("tactile_{k}.png"));
            save_image_pm1(frame, &root.join(&rel))?;
            tactile.push(rel);
        }
        let mask_rel = PathBuf::from(id).join("mask.png");
        save_mask(&s.mask, &root.join(&mask_rel))?;
        let refl_rel = PathBuf::from(id).join("reflectance.png");
        save_reflectance(&s.reflectance, &root.join(&refl_rel))?;
        let reference_rel = PathBuf::from(id).join("reference.png");
        save_image_pm1(s.visual.center(), &root.join(&reference_rel))?;
        entries.push(ManifestEntry {
            id: id.clone(),
            contact_index: s.visual.frames.len() / 2,
            visual,
            tactile,
            mask: Some(mask_rel),
            reflectance: Some(refl_rel),
            reference: Some(reference_rel),
            label: s.label as u32,
        });
    }
    let manifest = Manifest {
        version: 1,
        entries,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
