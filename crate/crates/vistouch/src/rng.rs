//! Counter-based deterministic random streams.
//!
//! Every stochastic operation draws from a stream keyed by
//! `(seed, purpose, step)`, so reproducibility holds regardless of which
//! order streams are consumed in (e.g. parallel data loading never
//! perturbs the sampling chain).

use crate::scalar::{Scalar, Tensor};
use ndarray::IxDyn;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_purpose(purpose: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in purpose.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A stateless-keyed, stateful-cursor random stream. Output `i` of a given
/// key is a pure function of `(key, i)`.
#[derive(Debug, Clone)]
pub struct Stream {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, purpose: &str, step: u64) -> Self {
        let key = mix(mix(seed ^ hash_purpose(purpose)).wrapping_add(step.wrapping_mul(GOLDEN)));
        Stream {
            key,
            counter: 0,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)).wrapping_add(GOLDEN));
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // modulo bias is negligible for n << 2^64
        self.next_u64() % n
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0,1] so ln is finite
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_tensor<F: Scalar>(&mut self, shape: &[usize]) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n).map(|_| F::of(self.next_normal())).collect();
        Tensor::from_shape_vec(IxDyn(shape), data).expect("shape/data mismatch")
    }

    /// Uniform tensor in [lo, hi).
    pub fn uniform_tensor<F: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| F::of(lo + (hi - lo) * self.next_f64()))
            .collect();
        Tensor::from_shape_vec(IxDyn(shape), data).expect("shape/data mismatch")
    }
}
