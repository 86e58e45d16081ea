//! Denoising-diffusion core: noise schedule, forward noising, training
//! losses (plain, masked, channel-concatenated), classifier-free guidance,
//! and the reverse DDPM chain with a partial-denoising entry point.

mod unet;

pub use unet::{UNet, UNetConfig};

use crate::error::{Error, Result};
use crate::nn::{Bound, Tape, Var};
use crate::rng::Stream;
use crate::scalar::{Scalar, Tensor};
use ndarray::{Axis, IxDyn};
use serde::{Deserialize, Serialize};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_STEPS: usize = 200;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Precomputed coefficients of a linear-beta DDPM schedule. Cumulative
/// products are carried in f64 regardless of the working scalar so the
/// tail of the schedule keeps full precision.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_max: usize,
    /// betas[t] for t in 1..=T; betas[0] is unused and set to 0.
    pub betas: Vec<f64>,
    /// alphas_bar[t] = prod_{s<=t} (1 - beta_s); alphas_bar[0] = 1.
    pub alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::validation("schedule needs at least one step"));
        }
        let mut betas = vec![0.0; t_max + 1];
        let mut alphas_bar = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                (t - 1) as f64 / (t_max - 1) as f64
            };
            let b = beta_start + (beta_end - beta_start) * frac;
            betas[t] = b;
            alphas_bar[t] = alphas_bar[t - 1] * (1.0 - b);
        }
        Ok(NoiseSchedule {
            t_max,
            betas,
            alphas_bar,
        })
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_T, BETA_START, BETA_END).expect("valid defaults")
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.t_max {
            return Err(Error::validation(format!(
                "timestep {t} outside {lo}..={}",
                self.t_max
            )));
        }
        Ok(())
    }

    /// Closed-form forward noising: z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps.
    pub fn q_sample<F: Scalar>(&self, z0: &Tensor<F>, t: usize, eps: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_t(t, 0)?;
        if z0.shape() != eps.shape() {
            return Err(Error::validation("q_sample: z0/eps shape mismatch"));
        }
        let ab = self.alpha_bar(t);
        let a = F::of(ab.sqrt());
        let b = F::of((1.0 - ab).sqrt());
        Ok(z0.mapv(|v| v * a) + &eps.mapv(|v| v * b))
    }

    /// One reverse DDPM step: posterior mean plus sigma_t * n; the draw is
    /// skipped entirely at t = 1.
    pub fn ddpm_step<F: Scalar>(
        &self,
        z_t: &Tensor<F>,
        t: usize,
        eps_hat: &Tensor<F>,
        rng: &mut Stream,
    ) -> Result<Tensor<F>> {
        self.check_t(t, 1)?;
        let beta = self.beta(t);
        let alpha = 1.0 - beta;
        let ab_t = self.alpha_bar(t);
        let inv_sqrt_alpha = F::of(1.0 / alpha.sqrt());
        let coef = F::of(beta / (1.0 - ab_t).sqrt());
        let mut z = z_t
            .iter()
            .zip(eps_hat.iter())
            .map(|(&z, &e)| (z - coef * e) * inv_sqrt_alpha)
            .collect::<Vec<F>>();
        let mut out = Tensor::from_shape_vec(IxDyn(z_t.shape()), std::mem::take(&mut z)).unwrap();
        if t > 1 {
            let ab_prev = self.alpha_bar(t - 1);
            let sigma = F::of((beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt());
            let n = rng.normal_tensor::<F>(z_t.shape());
            out = out + &n.mapv(|v| v * sigma);
        }
        Ok(out)
    }
}

/// Classifier-free guidance settings. The null condition is a zero-filled
/// embedding; `drop_prob` is the training-time rate at which the condition
/// is replaced by it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub drop_prob: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            scale: 7.5,
            drop_prob: 0.1,
        }
    }
}

/// Anything that can predict the added noise for a (possibly channel-
/// augmented) latent at timestep t, optionally conditioned on an embedding
/// batch [B,D]. `cond = None` means the zero-filled null condition.
pub trait NoisePredictor<F: Scalar> {
    fn predict(&self, z: &Tensor<F>, t: usize, cond: Option<&Tensor<F>>) -> Result<Tensor<F>>;
}

/// Guided prediction: eps_u + s (eps_c - eps_u). The s=0 and s=1 cases
/// return the respective branch untouched so they are bit-identical to it.
pub fn cfg_eps<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    predictor: &P,
    z: &Tensor<F>,
    t: usize,
    cond: &Tensor<F>,
    scale: f64,
) -> Result<Tensor<F>> {
    if scale == 0.0 {
        return predictor.predict(z, t, None);
    }
    let eps_c = predictor.predict(z, t, Some(cond))?;
    if scale == 1.0 {
        return Ok(eps_c);
    }
    let eps_u = predictor.predict(z, t, None)?;
    let s = F::of(scale);
    Ok(&eps_u + &(&eps_c - &eps_u).mapv(|v| v * s))
}

/// Evenly spaced descending timesteps from `hi` to 1, `steps` of them.
fn stride_timesteps(hi: usize, steps: usize) -> Vec<usize> {
    if steps == 1 {
        return vec![hi];
    }
    (0..steps)
        .map(|i| 1 + ((hi - 1) * (steps - 1 - i) + (steps - 1) / 2) / (steps - 1))
        .collect()
}

fn check_steps(sched: &NoiseSchedule, steps: usize) -> Result<()> {
    if steps < 1 || steps > sched.t_max {
        return Err(Error::validation(format!(
            "steps {steps} outside 1..={}",
            sched.t_max
        )));
    }
    Ok(())
}

/// Options shared by `sample` and `sdedit_sample`. `concat` is an extra
/// channel map appended to the latent at every denoiser call (reflectance
/// or reference-image conditioning).
pub struct SampleOpts<'a, F: Scalar> {
    pub cond: Option<&'a Tensor<F>>,
    pub concat: Option<&'a Tensor<F>>,
    pub guidance_scale: f64,
}

impl<'a, F: Scalar> SampleOpts<'a, F> {
    pub fn unconditional() -> Self {
        SampleOpts {
            cond: None,
            concat: None,
            guidance_scale: 0.0,
        }
    }
}

fn concat_channels<F: Scalar>(z: &Tensor<F>, extra: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    match extra {
        None => Ok(z.clone()),
        Some(e) => {
            if e.ndim() != z.ndim() || e.shape()[0] != z.shape()[0] {
                return Err(Error::validation("concat conditioning shape mismatch"));
            }
            ndarray::concatenate(Axis(1), &[z.view(), e.view()])
                .map_err(|_| Error::validation("concat conditioning spatial dims mismatch"))
        }
    }
}

fn predict_guided<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    predictor: &P,
    z: &Tensor<F>,
    t: usize,
    opts: &SampleOpts<'_, F>,
) -> Result<Tensor<F>> {
    let z_in = concat_channels(z, opts.concat)?;
    match opts.cond {
        Some(c) => cfg_eps(predictor, &z_in, t, c, opts.guidance_scale),
        None => predictor.predict(&z_in, t, None),
    }
}

fn denoise_chain<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    predictor: &P,
    sched: &NoiseSchedule,
    mut z: Tensor<F>,
    ts: &[usize],
    opts: &SampleOpts<'_, F>,
    rng: &mut Stream,
) -> Result<Tensor<F>> {
    for &t in ts {
        let eps = predict_guided(predictor, &z, t, opts)?;
        z = sched.ddpm_step(&z, t, &eps, rng)?;
    }
    Ok(z)
}

/// Full reverse chain from pure noise over an evenly spaced sub-sequence of
/// {T..1} of length `steps`.
pub fn sample<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    predictor: &P,
    sched: &NoiseSchedule,
    shape: &[usize],
    steps: usize,
    opts: &SampleOpts<'_, F>,
    rng: &mut Stream,
) -> Result<Tensor<F>> {
    check_steps(sched, steps)?;
    let z = rng.normal_tensor::<F>(shape);
    let ts = stride_timesteps(sched.t_max, steps);
    denoise_chain(predictor, sched, z, &ts, opts, rng)
}

/// Partial denoising: noise the input to level N, then run the reverse
/// chain N -> 0. N = 0 returns the input unchanged. N = T starts directly
/// from the drawn noise so that, under a shared rng, the trajectory is
/// bit-identical to `sample`.
pub fn sdedit_sample<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    predictor: &P,
    sched: &NoiseSchedule,
    z0: &Tensor<F>,
    n_level: usize,
    steps: usize,
    opts: &SampleOpts<'_, F>,
    rng: &mut Stream,
) -> Result<Tensor<F>> {
    if n_level > sched.t_max {
        return Err(Error::validation(format!(
            "noise level {n_level} exceeds T={}",
            sched.t_max
        )));
    }
    if n_level == 0 {
        return Ok(z0.clone());
    }
    check_steps(sched, steps)?;
    let eps = rng.normal_tensor::<F>(z0.shape());
    let z = if n_level == sched.t_max {
        eps
    } else {
        sched.q_sample(z0, n_level, &eps)?
    };
    // same stride rule as `sample`, truncated to the noised range
    let sub_steps = ((steps * n_level + sched.t_max / 2) / sched.t_max).max(1);
    let ts = stride_timesteps(n_level, sub_steps);
    denoise_chain(predictor, sched, z, &ts, opts, rng)
}

/// Training objective on the tape: draw t uniform in {1..T}, noise z0, and
/// score the denoiser's noise prediction with a (possibly masked) mean
/// squared error. `forward` runs the denoiser on the tape for the prepared
/// input; this keeps the loss independent of any one architecture.
pub struct EpsLossOpts<'a, F: Scalar> {
    /// latent-resolution keep mask [h,w]; 1 keeps, 0 drops
    pub mask: Option<&'a Tensor<F>>,
    /// channel map appended to the noisy latent, [B,C',h,w]
    pub concat: Option<&'a Tensor<F>>,
}

impl<'a, F: Scalar> EpsLossOpts<'a, F> {
    pub fn plain() -> Self {
        EpsLossOpts {
            mask: None,
            concat: None,
        }
    }
}

pub fn eps_loss<F: Scalar>(
    tape: &mut Tape<F>,
    z0: &Tensor<F>,
    opts: &EpsLossOpts<'_, F>,
    sched: &NoiseSchedule,
    rng: &mut Stream,
    forward: impl FnOnce(&mut Tape<F>, Var, usize) -> Result<Var>,
) -> Result<Var> {
    if z0.ndim() != 4 {
        return Err(Error::validation("eps_loss expects a [B,C,h,w] batch"));
    }
    let (h, w) = (z0.shape()[2], z0.shape()[3]);
    if let Some(m) = opts.mask {
        if m.shape() != [h, w] {
            return Err(Error::validation("mask does not match latent dims"));
        }
    }
    let t = 1 + rng.next_below(sched.t_max as u64) as usize;
    let eps = rng.normal_tensor::<F>(z0.shape());
    let z_t = sched.q_sample(z0, t, &eps)?;
    let z_in = concat_channels(&z_t, opts.concat)?;
    let z_var = tape.leaf(z_in);
    let pred = forward(tape, z_var, t)?;
    if tape.shape(pred) != z0.shape() {
        return Err(Error::validation("denoiser output shape mismatch"));
    }
    let eps_var = tape.leaf(eps);
    let resid = tape.sub(pred, eps_var);
    match opts.mask {
        None => Ok(tape.mean_all_sq(resid)),
        Some(m) => {
            let kept: f64 = m.iter().map(|v| v.to_f64_()).sum::<f64>() * (z0.shape()[0] * z0.shape()[1]) as f64;
            if kept == 0.0 {
                let zero = tape.scalar_leaf(F::zero());
                let _ = resid; // residual intentionally unused: loss defined as 0
                return Ok(zero);
            }
            let mb = m
                .clone()
                .into_shape(IxDyn(&[1, 1, h, w]))
                .unwrap()
                .broadcast(IxDyn(z0.shape()))
                .unwrap()
                .to_owned();
            let m_var = tape.leaf(mb);
            let masked = tape.mul(resid, m_var);
            let sq = tape.square(masked);
            let s = tape.sum_all(sq);
            Ok(tape.scale(s, F::of(1.0 / kept)))
        }
    }
}

impl<F: Scalar> Tape<F> {
    fn mean_all_sq(&mut self, resid: Var) -> Var {
        let sq = self.square(resid);
        self.mean_all(sq)
    }
}

/// Convenience wrapper: eps_loss through a UNet bound on the tape, with
/// optional cross-attention conditioning.
pub fn eps_loss_unet<F: Scalar>(
    tape: &mut Tape<F>,
    unet: &UNet<F>,
    bound: &Bound,
    z0: &Tensor<F>,
    cond: Option<&Tensor<F>>,
    opts: &EpsLossOpts<'_, F>,
    sched: &NoiseSchedule,
    rng: &mut Stream,
) -> Result<Var> {
    let cond_owned = cond.cloned();
    eps_loss(tape, z0, opts, sched, rng, |tape, z_in, t| {
        let cond_var = cond_owned.map(|c| tape.leaf(c));
        unet.forward(tape, bound, z_in, t, cond_var)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// ln-space Kahan-compensated recomputation: an independent oracle for
    /// the cumulative product.
    fn alpha_bar_oracle(t_max: usize, t: usize) -> f64 {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for s in 1..=t {
            let frac = (s - 1) as f64 / (t_max - 1) as f64;
            let b = BETA_START + (BETA_END - BETA_START) * frac;
            let term = (1.0 - b).ln();
            let y = term - comp;
            let acc = sum + y;
            comp = (acc - sum) - y;
            sum = acc;
        }
        sum.exp()
    }

    #[test]
    fn schedule_invariants_hold() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.t_max {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.beta(t) >= s.beta(t.saturating_sub(1)));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
        assert_eq!(s.beta(1), BETA_START);
        assert_eq!(s.beta(1000), BETA_END);
    }

    #[test]
    fn alpha_bar_tail_matches_high_precision_value() {
        let s = NoiseSchedule::default_linear();
        // exact rational cumulative product, evaluated once and frozen
        let expected = 4.0358297653756833e-5;
        let rel = (s.alpha_bar(1000) - expected).abs() / expected;
        assert!(rel < 1e-7, "rel err {rel}");
        // independent ln-space recomputation agrees too
        let oracle = alpha_bar_oracle(1000, 1000);
        let rel2 = (s.alpha_bar(1000) - oracle).abs() / oracle;
        assert!(rel2 < 1e-10, "rel err vs ln-sum oracle {rel2}");
    }

    #[test]
    fn schedule_rejects_zero_steps() {
        assert!(NoiseSchedule::linear(0, BETA_START, BETA_END).is_err());
    }

    #[test]
    fn q_sample_degenerate_cases() {
        let s = NoiseSchedule::default_linear();
        let z0 = Stream::new(1, "diff-test", 0).normal_tensor::<f64>(&[4, 4]);
        let eps = Stream::new(1, "diff-test", 1).normal_tensor::<f64>(&[4, 4]);
        // t = 0: identity
        let z = s.q_sample(&z0, 0, &eps).unwrap();
        assert_eq!(z, z0);
        // eps = 0: pure scaling
        let zero = Tensor::zeros(IxDyn(&[4, 4]));
        let z = s.q_sample(&z0, 700, &zero).unwrap();
        let a = s.alpha_bar(700).sqrt();
        for (v, v0) in z.iter().zip(z0.iter()) {
            assert!((v - v0 * a).abs() < 1e-15);
        }
        // out of range
        assert!(s.q_sample(&z0, 1001, &eps).is_err());
    }

    #[test]
    fn q_sample_monte_carlo_variance() {
        let s = NoiseSchedule::default_linear();
        let mut rng = Stream::new(42, "diff-mc", 0);
        for &t in &[100usize, 500, 900] {
            let ab = s.alpha_bar(t);
            // z0 scalar with unit variance across draws; eps standard normal
            let n = 100_000;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n {
                let z0 = Tensor::from_elem(IxDyn(&[1]), rng.next_normal());
                let eps = Tensor::from_elem(IxDyn(&[1]), rng.next_normal());
                let z = s.q_sample(&z0, t, &eps).unwrap()[IxDyn(&[0])];
                sum += z;
                sumsq += z * z;
            }
            let mean = sum / n as f64;
            let var = sumsq / n as f64 - mean * mean;
            let expected = ab * 1.0 + (1.0 - ab);
            assert!(
                (var - expected).abs() / expected < 0.02,
                "t={t}: var {var} vs {expected}"
            );
        }
    }

    #[test]
    fn ddpm_step_zero_eps_is_pure_rescale() {
        let s = NoiseSchedule::default_linear();
        let z = Stream::new(2, "diff-test", 2).normal_tensor::<f64>(&[8]);
        let eps = Tensor::zeros(IxDyn(&[8]));
        // t = 1: no noise drawn, so the result is exactly z / sqrt(alpha_1)
        let mut rng = Stream::new(3, "diff-test", 3);
        let out = s.ddpm_step(&z, 1, &eps, &mut rng).unwrap();
        let inv_a = 1.0 / (1.0 - s.beta(1)).sqrt();
        for (o, zi) in out.iter().zip(z.iter()) {
            assert_eq!(*o, zi * inv_a);
        }
        assert!(s.ddpm_step(&z, 0, &eps, &mut rng).is_err());
        assert!(s.ddpm_step(&z, 1001, &eps, &mut rng).is_err());
    }

    /// Denoiser that knows the single training point and returns the
    /// analytically optimal noise estimate.
    struct OptimalDenoiser {
        z0: Tensor<f64>,
        sched: NoiseSchedule,
    }

    impl NoisePredictor<f64> for OptimalDenoiser {
        fn predict(&self, z: &Tensor<f64>, t: usize, _cond: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
            let ab = self.sched.alpha_bar(t);
            let a = ab.sqrt();
            let b = (1.0 - ab).sqrt();
            let v: Vec<f64> = z
                .iter()
                .zip(self.z0.iter())
                .map(|(&zt, &z0)| (zt - a * z0) / b)
                .collect();
            Ok(Tensor::from_shape_vec(IxDyn(z.shape()), v).unwrap())
        }
    }

    #[test]
    fn optimal_denoiser_reverse_chain_recovers_datapoint() {
        let sched = NoiseSchedule::default_linear();
        let z0 = Stream::new(9, "diff-opt", 0).uniform_tensor::<f64>(&[64], -1.0, 1.0);
        let d = OptimalDenoiser {
            z0: z0.clone(),
            sched: sched.clone(),
        };
        let opts = SampleOpts::unconditional();
        let mut total = 0.0;
        let seeds = 16;
        for seed in 0..seeds {
            let mut rng = Stream::new(seed, "diff-opt-sample", 0);
            let out = sample(&d, &sched, &[64], 200, &opts, &mut rng).unwrap();
            let l2: f64 = out
                .iter()
                .zip(z0.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            total += l2;
        }
        let mean_l2 = total / seeds as f64;
        assert!(mean_l2 < 0.05, "mean L2 {mean_l2}");
    }

    struct ConstPredictor {
        cond_value: f64,
        uncond_value: f64,
    }

    impl NoisePredictor<f64> for ConstPredictor {
        fn predict(&self, z: &Tensor<f64>, _t: usize, cond: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
            let v = if cond.is_some() {
                self.cond_value
            } else {
                self.uncond_value
            };
            Ok(Tensor::from_elem(IxDyn(z.shape()), v))
        }
    }

    #[test]
    fn cfg_stub_arithmetic_and_identities() {
        let p = ConstPredictor {
            cond_value: 2.0,
            uncond_value: 1.0,
        };
        let z = Tensor::zeros(IxDyn(&[3, 2, 2]));
        let c = Tensor::zeros(IxDyn(&[1, 512]));
        let out = cfg_eps(&p, &z, 500, &c, 7.5).unwrap();
        assert!(out.iter().all(|v| *v == 8.5));
        // s=1 and s=0 are bit-identical to the raw branches
        let out1 = cfg_eps(&p, &z, 500, &c, 1.0).unwrap();
        assert!(out1.iter().all(|v| *v == 2.0));
        let out0 = cfg_eps(&p, &z, 500, &c, 0.0).unwrap();
        assert!(out0.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn sample_is_deterministic_and_shaped() {
        let p = ConstPredictor {
            cond_value: 0.0,
            uncond_value: 0.0,
        };
        let sched = NoiseSchedule::default_linear();
        let opts = SampleOpts::unconditional();
        let mut r1 = Stream::new(7, "sample", 0);
        let a = sample(&p, &sched, &[1, 3, 4, 4], 50, &opts, &mut r1).unwrap();
        let mut r2 = Stream::new(7, "sample", 0);
        let b = sample(&p, &sched, &[1, 3, 4, 4], 50, &opts, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 3, 4, 4]);
        assert!(sample(&p, &sched, &[4], 0, &opts, &mut r1).is_err());
        assert!(sample(&p, &sched, &[4], 1001, &opts, &mut r1).is_err());
    }

    #[test]
    fn cfg_collapses_when_branches_coincide() {
        let p = ConstPredictor {
            cond_value: 0.3,
            uncond_value: 0.3,
        };
        let sched = NoiseSchedule::default_linear();
        let c = Tensor::zeros(IxDyn(&[1, 8]));
        let guided = SampleOpts {
            cond: Some(&c),
            concat: None,
            guidance_scale: 7.5,
        };
        let plain = SampleOpts {
            cond: Some(&c),
            concat: None,
            guidance_scale: 0.0,
        };
        let mut r1 = Stream::new(11, "cfg-collapse", 0);
        let a = sample(&p, &sched, &[1, 3, 2, 2], 20, &guided, &mut r1).unwrap();
        let mut r2 = Stream::new(11, "cfg-collapse", 0);
        let b = sample(&p, &sched, &[1, 3, 2, 2], 20, &plain, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sdedit_identity_and_path_equivalence() {
        let p = ConstPredictor {
            cond_value: 0.0,
            uncond_value: 0.0,
        };
        let sched = NoiseSchedule::default_linear();
        let opts = SampleOpts::unconditional();
        let z0 = Stream::new(5, "sdedit", 0).uniform_tensor::<f64>(&[1, 3, 4, 4], -1.0, 1.0);
        // N = 0: exact identity
        let mut rng = Stream::new(5, "sdedit", 1);
        let out = sdedit_sample(&p, &sched, &z0, 0, 50, &opts, &mut rng).unwrap();
        assert_eq!(out, z0);
        // N = T: bit-identical to sample under a shared rng
        let mut r1 = Stream::new(5, "sdedit", 2);
        let a = sdedit_sample(&p, &sched, &z0, 1000, 50, &opts, &mut r1).unwrap();
        let mut r2 = Stream::new(5, "sdedit", 2);
        let b = sample(&p, &sched, &[1, 3, 4, 4], 50, &opts, &mut r2).unwrap();
        assert_eq!(a, b);
        assert!(sdedit_sample(&p, &sched, &z0, 1001, 50, &opts, &mut rng).is_err());
    }

    #[test]
    fn stride_covers_endpoints() {
        let ts = stride_timesteps(1000, 200);
        assert_eq!(ts.len(), 200);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 1);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        let full = stride_timesteps(1000, 1000);
        assert_eq!(full, (1..=1000).rev().collect::<Vec<_>>());
    }

    #[test]
    fn eps_loss_stub_cases() {
        let sched = NoiseSchedule::default_linear();
        let z0 = Stream::new(6, "eps", 0).uniform_tensor::<f64>(&[2, 3, 4, 4], -1.0, 1.0);
        // perfect prediction: loss exactly 0 (denoiser echoes the true eps)
        // realized by capturing eps: run twice with same rng state offsets
        let mut rng = Stream::new(6, "eps", 1);
        let mut probe = Stream::new(6, "eps", 1);
        let _t = 1 + probe.next_below(1000) as usize;
        let eps = probe.normal_tensor::<f64>(&[2, 3, 4, 4]);
        let mut tape = Tape::new();
        let loss = eps_loss(
            &mut tape,
            &z0,
            &EpsLossOpts::plain(),
            &sched,
            &mut rng,
            |tape, _z, _t| Ok(tape.leaf(eps.clone())),
        )
        .unwrap();
        assert_eq!(tape.value(loss)[IxDyn(&[])], 0.0);
    }

    #[test]
    fn eps_loss_zero_denoiser_monte_carlo() {
        // predictor 0: loss = mean eps^2, expectation 1
        let sched = NoiseSchedule::default_linear();
        let z0 = Tensor::<f64>::zeros(IxDyn(&[1, 1, 1, 1]));
        let mut rng = Stream::new(8, "eps-mc", 0);
        let trials = 10_000;
        let mut acc = 0.0;
        for _ in 0..trials {
            let mut tape = Tape::new();
            let loss = eps_loss(
                &mut tape,
                &z0,
                &EpsLossOpts::plain(),
                &sched,
                &mut rng,
                |tape, z, _t| Ok(tape.leaf(Tensor::zeros(IxDyn(tape.shape(z))))),
            )
            .unwrap();
            acc += tape.value(loss)[IxDyn(&[])];
        }
        let mean = acc / trials as f64;
        assert!((mean - 1.0).abs() < 0.03, "mean {mean}");
    }

    #[test]
    fn masked_eps_loss_zeroes_and_normalizes() {
        let sched = NoiseSchedule::default_linear();
        let z0 = Stream::new(10, "eps-mask", 0).uniform_tensor::<f64>(&[1, 3, 4, 4], -1.0, 1.0);
        // all-zero mask: loss 0 and zero gradient everywhere
        let mask0 = Tensor::zeros(IxDyn(&[4, 4]));
        let mut rng = Stream::new(10, "eps-mask", 1);
        let mut tape = Tape::new();
        let leaf_holder = std::cell::Cell::new(None);
        let loss = eps_loss(
            &mut tape,
            &z0,
            &EpsLossOpts {
                mask: Some(&mask0),
                concat: None,
            },
            &sched,
            &mut rng,
            |tape, z, _t| {
                let w = tape.leaf(Tensor::from_elem(IxDyn(tape.shape(z)), 0.1));
                leaf_holder.set(Some(w));
                Ok(tape.mul(z, w))
            },
        )
        .unwrap();
        assert_eq!(tape.value(loss)[IxDyn(&[])], 0.0);
        let grads = tape.backward(loss);
        // the denoiser weight leaf receives no gradient through the masked loss
        let w = leaf_holder.get().unwrap();
        match grads.get(w) {
            None => {}
            Some(g) => assert!(g.iter().all(|v| *v == 0.0)),
        }

        // half mask: gradient is exactly 0 on dropped positions, and the
        // loss equals sum over kept positions / kept count
        let mut mask = Tensor::zeros(IxDyn(&[4, 4]));
        for i in 0..4 {
            for j in 0..2 {
                mask[IxDyn(&[i, j])] = 1.0;
            }
        }
        let mut rng = Stream::new(10, "eps-mask", 2);
        let mut tape = Tape::new();
        let holder = std::cell::Cell::new(None);
        let loss = eps_loss(
            &mut tape,
            &z0,
            &EpsLossOpts {
                mask: Some(&mask),
                concat: None,
            },
            &sched,
            &mut rng,
            |tape, z, _t| {
                let w = tape.leaf(Tensor::zeros(IxDyn(tape.shape(z))));
                holder.set(Some(w));
                Ok(tape.add(z, w))
            },
        )
        .unwrap();
        let grads = tape.backward(loss);
        let gw = grads.get(holder.get().unwrap()).unwrap();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let g = gw[IxDyn(&[0, c, i, j])];
                    if j >= 2 {
                        assert_eq!(g, 0.0, "masked position leaked gradient");
                    }
                }
            }
        }
        // kept count = 1 batch * 3 channels * 8 positions
        assert!(tape.value(loss)[IxDyn(&[])].is_finite());
    }

    #[test]
    fn concat_conditioning_widens_input_channels() {
        let sched = NoiseSchedule::default_linear();
        let z0 = Stream::new(12, "eps-cat", 0).uniform_tensor::<f64>(&[1, 3, 4, 4], -1.0, 1.0);
        let extra = Stream::new(12, "eps-cat", 1).uniform_tensor::<f64>(&[1, 3, 4, 4], 0.0, 1.0);
        let mut rng = Stream::new(12, "eps-cat", 2);
        let mut tape = Tape::new();
        let seen = std::cell::Cell::new(0usize);
        let _ = eps_loss(
            &mut tape,
            &z0,
            &EpsLossOpts {
                mask: None,
                concat: Some(&extra),
            },
            &sched,
            &mut rng,
            |tape, z, _t| {
                seen.set(tape.shape(z)[1]);
                // denoiser drops the extra channels to produce the eps shape
                Ok(tape.narrow(z, 1, 0, 3))
            },
        )
        .unwrap();
        assert_eq!(seen.get(), 6);
    }
}
