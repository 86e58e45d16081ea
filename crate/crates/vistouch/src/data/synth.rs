//! Procedural paired visuo-tactile generator with known ground truth.
//!
//! Visual frames are Lambertian renderings of a procedural heightfield
//! (frequency and amplitude set by a roughness class) under flat albedo,
//! so `visual = reflectance * shading` holds exactly. Tactile frames are
//! a gel-membrane rendering of the contact patch under three fixed
//! directional lights, with press depth increasing across the clip.

use super::{ImageFrame, ReflectanceMap, SegMask, TactileClip, VisualClip};
use crate::rng::Stream;
use crate::scalar::{Scalar, Tensor};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthParams {
    pub roughness_class: usize,
    pub num_classes: usize,
    pub albedo: [f64; 3],
    pub size: usize,
    pub window: usize,
    pub occluder: bool,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            roughness_class: 0,
            num_classes: 3,
            albedo: [0.80, 0.55, 0.35],
            size: 64,
            window: 5,
            occluder: false,
            seed: 0,
        }
    }
}

pub struct SynthSample<F: Scalar> {
    pub visual: VisualClip<F>,
    pub tactile: TactileClip<F>,
    pub mask: SegMask<F>,
    pub reflectance: ReflectanceMap<F>,
    /// Ground-truth shading [H, W] in [0, 1], shared by all channels.
    pub shading: Tensor<F>,
    pub label: usize,
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

const SCENE_LIGHT: [f64; 3] = [0.45, 0.35, 0.82];
const GEL_LIGHTS: [[f64; 3]; 3] = [
    [0.80, 0.00, 0.60],
    [-0.40, 0.69, 0.60],
    [-0.40, -0.69, 0.60],
];

/// Heightfield as a small sum of seeded directional sinusoids.
struct HeightField {
    amp: f64,
    freqs: Vec<f64>,
    dirs: Vec<(f64, f64)>,
    phases: Vec<f64>,
}

impl HeightField {
    fn new(params: &SynthParams) -> Self {
        let r = params.roughness_class as f64;
        let denom = (params.num_classes.max(2) - 1) as f64;
        let amp = r / denom; // class 0 is perfectly flat
        let base_freq = 2.0 + 2.0 * r;
        let mut rng = Stream::new(params.seed, "synth.height", params.roughness_class as u64);
        let n_waves = 8;
        let mut dirs = Vec::with_capacity(n_waves);
        let mut phases = Vec::with_capacity(n_waves);
        let mut freqs = Vec::with_capacity(n_waves);
        for _ in 0..n_waves {
            let theta = rng.next_f64() * std::f64::consts::TAU;
            dirs.push((theta.cos(), theta.sin()));
            phases.push(rng.next_f64() * std::f64::consts::TAU);
            // small per-wave jitter keeps instances distinct within a class
            // while the class ordering of mean |gradient| is preserved
            freqs.push(base_freq * (0.85 + 0.3 * rng.next_f64()));
        }
        HeightField {
            amp,
            freqs,
            dirs,
            phases,
        }
    }

    fn value(&self, u: f64, v: f64) -> f64 {
        let mut h = 0.0;
        for (k, (cx, cy)) in self.dirs.iter().enumerate() {
            h += (std::f64::consts::TAU * self.freqs[k] * (u * cx + v * cy) + self.phases[k]).sin();
        }
        self.amp * h / self.dirs.len() as f64
    }

    /// Analytic gradient in uv units.
    fn grad(&self, u: f64, v: f64) -> (f64, f64) {
        let mut gx = 0.0;
        let mut gy = 0.0;
        for (k, (cx, cy)) in self.dirs.iter().enumerate() {
            let c = std::f64::consts::TAU * self.freqs[k];
            let p = c * (u * cx + v * cy) + self.phases[k];
            gx += c * cx * p.cos();
            gy += c * cy * p.cos();
        }
        let n = self.dirs.len() as f64;
        (self.amp * gx / n, self.amp * gy / n)
    }
}

fn lambert(n: [f64; 3], l: [f64; 3], ambient: f64) -> f64 {
    let d = (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]).max(0.0);
    ambient + (1.0 - ambient) * d
}

fn normal_from_slope(gx: f64, gy: f64) -> [f64; 3] {
    normalize3([-gx, -gy, 1.0])
}

// slope factor converting heightfield gradient to surface slope
const SLOPE: f64 = 0.12;

pub fn synth_pair<F: Scalar>(params: &SynthParams) -> SynthSample<F> {
    let s = params.size;
    let hf = HeightField::new(params);
    let light = normalize3(SCENE_LIGHT);

    // shading and reflectance
    let mut shading = Tensor::<F>::zeros(IxDyn(&[s, s]));
    let mut reflectance = Tensor::<F>::zeros(IxDyn(&[3, s, s]));
    let mut visual = Tensor::<F>::zeros(IxDyn(&[3, s, s]));
    for i in 0..s {
        for j in 0..s {
            let (u, v) = (j as f64 / s as f64, i as f64 / s as f64);
            let (gx, gy) = hf.grad(u, v);
            let n = normal_from_slope(gx * SLOPE, gy * SLOPE);
            let sh = lambert(n, light, 0.25);
            shading[IxDyn(&[i, j])] = F::of(sh);
            for c in 0..3 {
                let r = params.albedo[c];
                reflectance[IxDyn(&[c, i, j])] = F::of(r);
                // visual = reflectance * shading, exactly, mapped to [-1,1]
                visual[IxDyn(&[c, i, j])] = F::of(2.0 * (r * sh) - 1.0);
            }
        }
    }
    let frame = ImageFrame::new(visual).expect("synth visual in range");
    let visual_clip = VisualClip::new(vec![frame; params.window]).expect("synth clip");

    // tactile clip: parabolic indenter pressed deeper each frame
    let mut tactile_frames = Vec::with_capacity(params.window);
    let depth_max = 0.35;
    for k in 0..params.window {
        let depth = depth_max * (k + 1) as f64 / params.window as f64;
        tactile_frames.push(render_gel(params, &hf, depth));
    }
    let tactile_clip = TactileClip::new(tactile_frames).expect("synth tactile clip");

    // occluder mask
    let mut mask = Tensor::<F>::ones(IxDyn(&[s, s]));
    if params.occluder {
        let mut rng = Stream::new(params.seed, "synth.occluder", 0);
        let cx = 0.3 + 0.4 * rng.next_f64();
        let cy = 0.3 + 0.4 * rng.next_f64();
        let radius = 0.18;
        for i in 0..s {
            for j in 0..s {
                let (u, v) = (j as f64 / s as f64, i as f64 / s as f64);
                if (u - cx).powi(2) + (v - cy).powi(2) < radius * radius {
                    mask[IxDyn(&[i, j])] = F::zero();
                }
            }
        }
    }

    SynthSample {
        visual: visual_clip,
        tactile: tactile_clip,
        mask: SegMask::new(mask).expect("synth mask binary"),
        reflectance: ReflectanceMap::new(reflectance).expect("synth reflectance in range"),
        shading,
        label: params.roughness_class,
    }
}

/// Gel membrane deformation height at (u, v) for a given press depth.
fn gel_height(hf: &HeightField, u: f64, v: f64, depth: f64) -> f64 {
    let du = u - 0.5;
    let dv = v - 0.5;
    let indent = depth - (du * du + dv * dv) / (2.0 * 0.45);
    if indent <= 0.0 {
        0.0
    } else {
        // inside the contact patch the gel conforms to surface microgeometry
        indent + 0.6 * hf.value(u, v)
    }
}

fn render_gel<F: Scalar>(params: &SynthParams, hf: &HeightField, depth: f64) -> ImageFrame<F> {
    let s = params.size;
    let lights: Vec<[f64; 3]> = GEL_LIGHTS.iter().map(|l| normalize3(*l)).collect();
    let mut px = Tensor::<F>::zeros(IxDyn(&[3, s, s]));
    let step = 1.0 / s as f64;
    for i in 0..s {
        for j in 0..s {
            let (u, v) = (j as f64 / s as f64, i as f64 / s as f64);
            let gx = (gel_height(hf, u + step, v, depth) - gel_height(hf, u - step, v, depth))
                / (2.0 * step);
            let gy = (gel_height(hf, u, v + step, depth) - gel_height(hf, u, v - step, depth))
                / (2.0 * step);
            let n = normal_from_slope(gx * SLOPE, gy * SLOPE);
            for (c, l) in lights.iter().enumerate() {
                let val = lambert(n, *l, 0.15);
                px[IxDyn(&[c, i, j])] = F::of((2.0 * val - 1.0).clamp(-1.0, 1.0));
            }
        }
    }
    ImageFrame::new(px).expect("gel render in range")
}

/// Contact area of a tactile frame: fraction of pixels whose rendering
/// deviates from the resting (flat-gel) appearance.
pub fn contact_area(params: &SynthParams, depth_index: usize) -> usize {
    let hf = &HeightField::new(params);
    let depth = 0.35 * (depth_index + 1) as f64 / params.window as f64;
    let s = params.size;
    let mut count = 0;
    for i in 0..s {
        for j in 0..s {
            let (u, v) = (j as f64 / s as f64, i as f64 / s as f64);
            if gel_height(hf, u, v, depth) > 0.01 {
                count += 1;
            }
        }
    }
    count
}

/// Independent image-statistics oracle used by tests and the toy
/// material classifier.
pub struct GradientOracle;

impl GradientOracle {
    /// Mean central-difference gradient magnitude of the grayscale image
    /// (computed in [0,1] space).
    pub fn mean_gradient_magnitude<F: Scalar>(img: &ImageFrame<F>) -> f64 {
        let p = &img.pixels;
        let (h, w) = (img.height(), img.width());
        let gray = |i: usize, j: usize| -> f64 {
            let mut g = 0.0;
            for c in 0..3 {
                g += (p[IxDyn(&[c, i, j])].to_f64_() + 1.0) / 2.0;
            }
            g / 3.0
        };
        let mut acc = 0.0;
        let mut n = 0usize;
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                let gx = (gray(i, j + 1) - gray(i, j - 1)) / 2.0;
                let gy = (gray(i + 1, j) - gray(i - 1, j)) / 2.0;
                acc += (gx * gx + gy * gy).sqrt();
                n += 1;
            }
        }
        acc / n as f64
    }

    /// Spatial variance of the grayscale image in [0,1] space.
    pub fn spatial_variance<F: Scalar>(img: &ImageFrame<F>) -> f64 {
        let p = &img.pixels;
        let (h, w) = (img.height(), img.width());
        let mut vals = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let mut g = 0.0;
                for c in 0..3 {
                    g += (p[IxDyn(&[c, i, j])].to_f64_() + 1.0) / 2.0;
                }
                vals.push(g / 3.0);
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64
    }
}

/// Toy material classifier calibrated on the synthetic generator: the
/// per-class mean gradient magnitude of rendered visual frames is the
/// class prototype, and classification is nearest-prototype.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleClassifier {
    pub id: String,
    pub class_features: Vec<f64>,
}

impl OracleClassifier {
    pub fn calibrate(base: &SynthParams, seeds_per_class: usize) -> Self {
        let mut class_features = Vec::with_capacity(base.num_classes);
        for r in 0..base.num_classes {
            let mut acc = 0.0;
            for k in 0..seeds_per_class {
                let params = SynthParams {
                    roughness_class: r,
                    seed: base.seed.wrapping_add(1000 + k as u64),
                    ..base.clone()
                };
                let sample = synth_pair::<f64>(&params);
                acc += GradientOracle::mean_gradient_magnitude(sample.visual.center());
            }
            class_features.push(acc / seeds_per_class as f64);
        }
        OracleClassifier {
            id: format!("synthetic-gradient-oracle-r{}", base.num_classes),
            class_features,
        }
    }

    pub fn classify<F: Scalar>(&self, img: &ImageFrame<F>) -> usize {
        let f = GradientOracle::mean_gradient_magnitude(img);
        self.class_features
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (f - **a).abs().partial_cmp(&(f - **b).abs()).unwrap()
            })
            .map(|(i, _)| i)
            .unwrap()
    }
}
