//! Acceptance gate: one test per criterion, each printing a single
//! pass/fail line. Tolerances are pinned as constants next to each check.

use std::cell::Cell;

use ndarray::IxDyn;
use vistouch::cvtp::{infonce_loss, cvtp_loss, ClipEncoder, CvtpModel, CvtpTrainConfig, EncoderConfig, MemoryBank};
use vistouch::diffusion::{cfg_eps, eps_loss, EpsLossOpts, NoisePredictor, NoiseSchedule};
use vistouch::error::Result;
use vistouch::metrics::{frechet_distance, psnr, ssim, FeatureSet};
use vistouch::nn::{Bound, ParamStore, Tape, Var};
use vistouch::rng::Stream;
use vistouch::data::ImageFrame;
use vistouch::Tensor;

type T64 = Tensor<f64>;

fn report(id: u32, name: &str, ok: bool) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("criterion {id:02} {name}: {verdict}");
    assert!(ok, "criterion {id:02} {name}: FAIL");
}

// ---------------------------------------------------------------- 1

/// alpha_bar(1000) for the linear 1e-4..2e-2 schedule, frozen from an
/// arbitrary-precision rational evaluation.
const ALPHA_BAR_1000: f64 = 4.0358297653756833e-5;
const ALPHA_BAR_REL_TOL: f64 = 1e-7;
const QSAMPLE_VAR_REL_TOL: f64 = 0.02;
const QSAMPLE_DRAWS: usize = 100_000;

#[test]
fn criterion_01_schedule_and_forward_process() {
    let sched = NoiseSchedule::default_linear();
    let mut ok = sched.alphas_bar[0] == 1.0;
    ok &= sched
        .alphas_bar
        .windows(2)
        .all(|w| w[1] < w[0] && w[1] > 0.0);
    let got = sched.alphas_bar[1000];
    ok &= ((got - ALPHA_BAR_1000) / ALPHA_BAR_1000).abs() < ALPHA_BAR_REL_TOL;

    for (i, t) in [100usize, 500, 900].into_iter().enumerate() {
        let z0 = T64::zeros(IxDyn(&[QSAMPLE_DRAWS]));
        let eps = Stream::new(11, "acc-qsample", i as u64).normal_tensor::<f64>(&[QSAMPLE_DRAWS]);
        let zt = sched.q_sample(&z0, t, &eps).unwrap();
        let mean = zt.iter().sum::<f64>() / QSAMPLE_DRAWS as f64;
        let var = zt.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (QSAMPLE_DRAWS - 1) as f64;
        let want = 1.0 - sched.alphas_bar[t];
        ok &= ((var - want) / want).abs() < QSAMPLE_VAR_REL_TOL;
    }
    report(1, "schedule-and-forward-process", ok);
}

// ---------------------------------------------------------------- 2

struct TwoLevelStub;
impl NoisePredictor<f64> for TwoLevelStub {
    fn predict(&self, z: &T64, _t: usize, cond: Option<&T64>) -> Result<T64> {
        let v = if cond.is_some() { 2.0 } else { 1.0 };
        Ok(T64::from_elem(IxDyn(z.shape()), v))
    }
}

#[test]
fn criterion_02_cfg_identities() {
    let z = Stream::new(21, "acc-cfg", 0).normal_tensor::<f64>(&[2, 3, 4, 4]);
    let cond = Stream::new(21, "acc-cfg", 1).normal_tensor::<f64>(&[2, 8]);
    let stub = TwoLevelStub;
    // eps_u + s (eps_c - eps_u) with eps_u = 1, eps_c = 2, s = 7.5 -> 8.5
    let guided = cfg_eps(&stub, &z, 10, &cond, 7.5).unwrap();
    let mut ok = guided.iter().all(|v| *v == 8.5);
    let s1 = cfg_eps(&stub, &z, 10, &cond, 1.0).unwrap();
    ok &= s1 == stub.predict(&z, 10, Some(&cond)).unwrap();
    let s0 = cfg_eps(&stub, &z, 10, &cond, 0.0).unwrap();
    ok &= s0 == stub.predict(&z, 10, None).unwrap();
    report(2, "cfg-identities", ok);
}

// ---------------------------------------------------------------- 3

const MASK_TRIALS: usize = 20;

#[test]
fn criterion_03_masked_loss_gradients() {
    let sched = NoiseSchedule::linear(100, 1e-4, 2e-2).unwrap();
    let (h, w) = (6, 5);
    let mut ok = true;
    for trial in 0..MASK_TRIALS {
        let mut mrng = Stream::new(31, "acc-mask", trial as u64);
        let mut mask = T64::zeros(IxDyn(&[h, w]));
        loop {
            let mut kept = 0;
            for v in mask.iter_mut() {
                let bit = if mrng.next_f64() < 0.5 { 1.0 } else { 0.0 };
                kept += bit as usize;
                *v = bit;
            }
            // need both kinds of cell for the probe to be meaningful
            if kept > 0 && kept < h * w {
                break;
            }
        }
        let z0 = mrng.uniform_tensor::<f64>(&[2, 3, h, w], -1.0, 1.0);
        let pred = mrng.normal_tensor::<f64>(&[2, 3, h, w]);
        let mut loss_rng = Stream::new(31, "acc-mask-noise", trial as u64);
        let mut tape = Tape::new();
        let captured: Cell<Option<Var>> = Cell::new(None);
        let opts = EpsLossOpts {
            mask: Some(&mask),
            concat: None,
        };
        let loss = eps_loss(&mut tape, &z0, &opts, &sched, &mut loss_rng, |tape, _z, _t| {
            let out = tape.leaf(pred.clone());
            captured.set(Some(out));
            Ok(out)
        })
        .unwrap();
        let grads = tape.backward(loss);
        let g = grads.get(captured.get().unwrap()).unwrap();
        let mut nonzero_kept = false;
        for b in 0..2 {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let gv = g[[b, c, y, x]];
                        if mask[[y, x]] == 0.0 {
                            ok &= gv == 0.0;
                        } else if gv != 0.0 {
                            nonzero_kept = true;
                        }
                    }
                }
            }
        }
        ok &= nonzero_kept;
    }
    report(3, "masked-loss-gradients", ok);
}

// ---------------------------------------------------------------- 4

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_SEEDS: u64 = 5;

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1e-6)
}

/// eps_loss through a two-conv toy denoiser; returns (loss, grads) or the
/// loss alone when params are perturbed.
fn eps_toy_loss(params: &ParamStore<f64>, seed: u64, grad: bool) -> (f64, Option<(Vec<Option<T64>>, Bound)>) {
    let sched = NoiseSchedule::linear(50, 1e-4, 2e-2).unwrap();
    let z0 = Stream::new(seed, "acc-fd-z0", 0).uniform_tensor::<f64>(&[1, 3, 4, 4], -1.0, 1.0);
    let mut rng = Stream::new(seed, "acc-fd-noise", 0);
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let loss = eps_loss(
        &mut tape,
        &z0,
        &EpsLossOpts::plain(),
        &sched,
        &mut rng,
        |tape, z, _t| {
            let w1 = bound.var("c1");
            let b1 = bound.var("c1.bias");
            let h = tape.conv2d(z, w1, b1, 1, 1);
            let h = tape.silu(h);
            let w2 = bound.var("c2");
            let b2 = bound.var("c2.bias");
            Ok(tape.conv2d(h, w2, b2, 1, 1))
        },
    )
    .unwrap();
    let value = tape.value(loss).iter().next().copied().unwrap();
    if grad {
        let grads = tape.backward(loss);
        let gv = bound.grads(&grads);
        (value, Some((gv, bound)))
    } else {
        (value, None)
    }
}

/// Symmetric contrastive loss through toy linear projection heads.
fn cvtp_toy_loss(params: &ParamStore<f64>, seed: u64, banks: &(MemoryBank<f64>, MemoryBank<f64>), grad: bool) -> (f64, Option<Vec<Option<T64>>>) {
    let xv = Stream::new(seed, "acc-fd-xv", 0).uniform_tensor::<f64>(&[2, 6], -1.0, 1.0);
    let xt = Stream::new(seed, "acc-fd-xt", 0).uniform_tensor::<f64>(&[2, 6], -1.0, 1.0);
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let xvv = tape.leaf(xv);
    let xtv = tape.leaf(xt);
    let ev = tape.linear(xvv, bound.var("wv"), bound.var("wv.bias"));
    let ev = tape.l2_normalize_rows(ev);
    let et = tape.linear(xtv, bound.var("wt"), bound.var("wt.bias"));
    let et = tape.l2_normalize_rows(et);
    let loss = cvtp_loss(&mut tape, ev, et, &banks.0, &banks.1, &[0, 1], &[0, 1], 0.1).unwrap();
    let value = tape.value(loss).iter().next().copied().unwrap();
    if grad {
        let grads = tape.backward(loss);
        (value, Some(bound.grads(&grads)))
    } else {
        (value, None)
    }
}

#[test]
fn criterion_04_gradient_checks() {
    let mut worst: f64 = 0.0;
    for seed in 0..FD_SEEDS {
        // eps_loss toy network
        let mut params = ParamStore::<f64>::new();
        let mut prng = Stream::new(seed, "acc-fd-init", 0);
        params.init_conv("c1", 4, 3, 3, &mut prng);
        params.init_conv("c2", 3, 4, 3, &mut prng);
        let (_, aux) = eps_toy_loss(&params, seed, true);
        let (grads, _) = aux.unwrap();
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for (pi, name) in names.iter().enumerate() {
            let g = grads[pi].clone().expect("used parameter has a gradient");
            let n_el = params.get(name).len();
            // probe a spread of coordinates per tensor
            for k in 0..3.min(n_el) {
                let idx = k * (n_el / 3.min(n_el)).max(1) % n_el;
                let mut plus = params.clone();
                bump(&mut plus, name, idx, FD_STEP);
                let mut minus = params.clone();
                bump(&mut minus, name, idx, -FD_STEP);
                let fd = (eps_toy_loss(&plus, seed, false).0 - eps_toy_loss(&minus, seed, false).0)
                    / (2.0 * FD_STEP);
                let an = g.as_slice().unwrap()[idx];
                if fd.abs() > 1e-8 {
                    worst = worst.max(rel_err(an, fd));
                }
            }
        }

        // cvtp_loss toy heads with fixed banks
        let mut cparams = ParamStore::<f64>::new();
        let mut crng = Stream::new(seed, "acc-fd-cinit", 0);
        cparams.init_linear("wv", 6, 5, &mut crng);
        cparams.init_linear("wt", 6, 5, &mut crng);
        let mut bank_v = MemoryBank::<f64>::new(9, 5).unwrap();
        let mut bank_t = MemoryBank::<f64>::new(9, 5).unwrap();
        let mut brng = Stream::new(seed, "acc-fd-bank", 0);
        for _ in 0..9 {
            let e = brng.normal_tensor::<f64>(&[5]);
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            bank_v.push(&e.mapv(|v| v / n)).unwrap();
            let e2 = brng.normal_tensor::<f64>(&[5]);
            let n2 = e2.iter().map(|v| v * v).sum::<f64>().sqrt();
            bank_t.push(&e2.mapv(|v| v / n2)).unwrap();
        }
        let banks = (bank_v, bank_t);
        let (_, cg) = cvtp_toy_loss(&cparams, seed, &banks, true);
        let cgrads = cg.unwrap();
        let cnames: Vec<String> = cparams.iter().map(|(n, _)| n.to_string()).collect();
        for (pi, name) in cnames.iter().enumerate() {
            let g = cgrads[pi].clone().expect("used parameter has a gradient");
            let n_el = cparams.get(name).len();
            for k in 0..3.min(n_el) {
                let idx = k * (n_el / 3.min(n_el)).max(1) % n_el;
                let mut plus = cparams.clone();
                bump(&mut plus, name, idx, FD_STEP);
                let mut minus = cparams.clone();
                bump(&mut minus, name, idx, -FD_STEP);
                let fd = (cvtp_toy_loss(&plus, seed, &banks, false).0
                    - cvtp_toy_loss(&minus, seed, &banks, false).0)
                    / (2.0 * FD_STEP);
                let an = g.as_slice().unwrap()[idx];
                if fd.abs() > 1e-8 {
                    worst = worst.max(rel_err(an, fd));
                }
            }
        }
    }
    report(4, "gradient-checks", worst <= FD_REL_TOL);
}

fn bump(params: &mut ParamStore<f64>, name: &str, idx: usize, delta: f64) {
    let mut t = params.get(name).clone();
    t.as_slice_mut().unwrap()[idx] += delta;
    params.set(name, t);
}

// ---------------------------------------------------------------- 5

const REVERSE_L2_TOL: f64 = 0.05;
const REVERSE_SEEDS: u64 = 16;

/// Optimal denoiser for a single known clean point:
/// eps*(z_t, t) = (z_t - sqrt(abar_t) z0) / sqrt(1 - abar_t).
struct OptimalDenoiser {
    z0: T64,
    sched: NoiseSchedule,
}
impl NoisePredictor<f64> for OptimalDenoiser {
    fn predict(&self, z: &T64, t: usize, _c: Option<&T64>) -> Result<T64> {
        let ab = self.sched.alphas_bar[t];
        let num = z - &self.z0.mapv(|v| v * ab.sqrt());
        Ok(num.mapv(|v| v / (1.0 - ab).sqrt()))
    }
}

#[test]
fn criterion_05_analytic_reverse_chain() {
    let sched = NoiseSchedule::default_linear();
    let z0 = Stream::new(51, "acc-reverse", 0).normal_tensor::<f64>(&[64]);
    let denoiser = OptimalDenoiser {
        z0: z0.clone(),
        sched: sched.clone(),
    };
    let opts = vistouch::diffusion::SampleOpts::unconditional();
    let mut total = 0.0;
    for seed in 0..REVERSE_SEEDS {
        let mut rng = Stream::new(seed, "acc-reverse-chain", 0);
        let z = vistouch::diffusion::sample(&denoiser, &sched, &[64], 200, &opts, &mut rng).unwrap();
        total += (&z - &z0).iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let mean_l2 = total / REVERSE_SEEDS as f64;
    report(5, "analytic-reverse-chain", mean_l2 < REVERSE_L2_TOL);
}

// ---------------------------------------------------------------- 10

const SSIM_ORACLE_TOL: f64 = 1e-6;
const PSNR_20DB_TOL: f64 = 1e-12;
const FRECHET_CLOSED_FORM_TOL: f64 = 1e-6;
const FRECHET_IDENTITY_TOL: f64 = 1e-8;

/// Direct per-window SSIM evaluation (no separable filtering), kept
/// deliberately naive as an independent oracle.
fn ssim_direct(a: &ImageFrame<f64>, b: &ImageFrame<f64>) -> f64 {
    let win = 11usize;
    let sigma = 1.5f64;
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let half = win / 2;
    let mut kern = vec![0.0; win * win];
    let mut ksum = 0.0;
    for i in 0..win {
        for j in 0..win {
            let (di, dj) = (i as f64 - half as f64, j as f64 - half as f64);
            let v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            kern[i * win + j] = v;
            ksum += v;
        }
    }
    for v in &mut kern {
        *v /= ksum;
    }
    let (h, w) = (a.height(), a.width());
    let unit = |p: &T64, c: usize, i: usize, j: usize| (p[[c, i, j]] + 1.0) / 2.0;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for ci in half..h - half {
            for cj in half..w - half {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for oi in 0..win {
                    for oj in 0..win {
                        let k = kern[oi * win + oj];
                        let av = unit(&a.pixels, c, ci - half + oi, cj - half + oj);
                        let bv = unit(&b.pixels, c, ci - half + oi, cj - half + oj);
                        ma += k * av;
                        mb += k * bv;
                        saa += k * av * av;
                        sbb += k * bv * bv;
                        sab += k * av * bv;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn criterion_10_metric_kernels() {
    let ap = Stream::new(101, "acc-metrics", 0).uniform_tensor::<f64>(&[3, 32, 32], -1.0, 1.0);
    let a = ImageFrame::new(ap).unwrap();
    let mut ok = ssim(&a, &a).unwrap() == 1.0;
    let noise = Stream::new(101, "acc-metrics", 1).normal_tensor::<f64>(&[3, 32, 32]);
    let b = ImageFrame::new(
        (&a.pixels + &noise.mapv(|v| v * 0.15)).mapv(|v| v.clamp(-1.0, 1.0)),
    )
    .unwrap();
    ok &= (ssim(&a, &b).unwrap() - ssim_direct(&a, &b)).abs() <= SSIM_ORACLE_TOL;

    // constant 0.1 offset in unit range: MSE 0.01 -> exactly 20 dB
    let p = ImageFrame::new(T64::from_elem(IxDyn(&[3, 16, 16]), -0.5)).unwrap();
    let q = ImageFrame::new(T64::from_elem(IxDyn(&[3, 16, 16]), -0.3)).unwrap();
    ok &= (psnr(&p, &q).unwrap() - 20.0).abs() <= PSNR_20DB_TOL;

    // univariate sets with exact sample moments: mu 0/1, var 1/4 -> FD 2
    let pack = |pts: &[[f64; 1]]| {
        let mut m = T64::zeros(IxDyn(&[pts.len(), 1]));
        for (i, p) in pts.iter().enumerate() {
            m[[i, 0]] = p[0];
        }
        FeatureSet::new(m, "acc").unwrap()
    };
    let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
    let sa = pack(&[[inv_sqrt2], [-inv_sqrt2]]);
    let sb = pack(&[[1.0 + 2.0f64.sqrt()], [1.0 - 2.0f64.sqrt()]]);
    ok &= (frechet_distance(&sa, &sb).unwrap() - 2.0).abs() <= FRECHET_CLOSED_FORM_TOL;

    // 2-D diagonal case diag(1,2) vs diag(2,1): 2 (3 - 2 sqrt 2)
    let pack2 = |v1: f64, v2: f64| {
        let s1 = (v1 * 3.0 / 2.0).sqrt();
        let s2 = (v2 * 3.0 / 2.0).sqrt();
        let pts = [[s1, 0.0], [-s1, 0.0], [0.0, s2], [0.0, -s2]];
        let mut m = T64::zeros(IxDyn(&[4, 2]));
        for (i, p) in pts.iter().enumerate() {
            m[[i, 0]] = p[0];
            m[[i, 1]] = p[1];
        }
        FeatureSet::new(m, "acc").unwrap()
    };
    let da = pack2(1.0, 2.0);
    let db = pack2(2.0, 1.0);
    let want = 2.0 * (3.0 - 2.0 * 2.0f64.sqrt());
    ok &= (frechet_distance(&da, &db).unwrap() - want).abs() <= FRECHET_CLOSED_FORM_TOL;
    ok &= frechet_distance(&da, &da).unwrap() <= FRECHET_IDENTITY_TOL;
    report(10, "metric-kernels", ok);
}

// ---------------------------------------------------------------- 6

const RETRIEVAL_MIN: f64 = 0.90;
const LNK_TOL: f64 = 1e-9;
const RETRIEVAL_PAIRS: usize = 64;

#[test]
fn criterion_06_cvtp_retrieval() {
    use vistouch::cvtp::{fuse_tactile, fuse_visual, train_cvtp, retrieval_accuracy};
    use vistouch::data::{synth_pair, SynthParams};
    use ndarray::Axis;

    use vistouch::cvtp::NormKind;
    type T32 = Tensor<f32>;

    // 64 synthetic pairs at 64x64 fed raw (identity codec); classes with
    // non-degenerate microgeometry so instances are distinguishable.
    let pairs: Vec<(T32, T32)> = (0..RETRIEVAL_PAIRS)
        .map(|i| {
            let s = synth_pair::<f32>(&SynthParams {
                roughness_class: 1 + (i % 2),
                size: 64,
                window: 3,
                seed: 0x6_0000 + i as u64,
                ..SynthParams::default()
            });
            (fuse_visual(&s.visual), fuse_tactile(&s.tactile))
        })
        .collect();
    let cfg = EncoderConfig {
        window: 3,
        base_width: 8,
        stage_mults: vec![1, 2],
        embed_dim: 512,
        tau: 0.07,
        norm_groups: 4,
        in_stride: 4,
        head_spatial: 4,
        norm: NormKind::Batch,
    };
    let mut model = CvtpModel::<f32>::new(cfg, 61).unwrap();
    let train = CvtpTrainConfig {
        epochs: 130,
        batch_size: 8,
        bank_size: 65,
        lr: 0.001,
        seed: 61,
        ..CvtpTrainConfig::default()
    };
    train_cvtp(&mut model, &pairs, &train).unwrap();

    let embed_all = |enc: &ClipEncoder<f32>, which: usize| -> T32 {
        let rows: Vec<T32> = pairs
            .iter()
            .map(|p| {
                let fused = if which == 0 { &p.0 } else { &p.1 };
                let s = fused.shape().to_vec();
                let b = fused.clone().into_shape(IxDyn(&[1, s[0], s[1], s[2]])).unwrap();
                enc.embed(&b).unwrap().index_axis(Axis(0), 0).to_owned()
            })
            .collect();
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let d = rows[0].len();
        ndarray::stack(Axis(0), &views)
            .unwrap()
            .into_shape(IxDyn(&[rows.len(), d]))
            .unwrap()
    };
    let ev = embed_all(&model.visual, 0);
    let et = embed_all(&model.tactile, 1);
    let (vt, tv) = retrieval_accuracy(&ev, &et);
    let mut ok = vt >= RETRIEVAL_MIN && tv >= RETRIEVAL_MIN;

    // uniform InfoNCE: all K = 16385 logits equal -> loss = ln K
    let dim = 512usize;
    let mut anchor = T64::zeros(IxDyn(&[dim]));
    anchor[[0]] = 1.0;
    let mut pos = T64::zeros(IxDyn(&[dim]));
    pos[[1]] = 1.0;
    let negs = {
        let mut m = T64::zeros(IxDyn(&[16384, dim]));
        for i in 0..16384 {
            m[[i, 1]] = 1.0;
        }
        m
    };
    let mut tape = Tape::new();
    let a = tape.leaf(anchor);
    let p = tape.leaf(pos);
    let loss = infonce_loss(&mut tape, a, p, &negs, 0.07).unwrap();
    let got = tape.value(loss).iter().next().copied().unwrap();
    ok &= (got - (16385f64).ln()).abs() <= LNK_TOL;
    eprintln!("retrieval v->t {vt:.3} t->v {tv:.3}, lnK err {:.2e}", (got - (16385f64).ln()).abs());
    report(6, "cvtp-retrieval", ok);
}
