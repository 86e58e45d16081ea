//! Temporary tuning harness (not part of the suite).

use std::str::FromStr;
use std::time::Instant;

use vistouch::codec::CodecSpec;
use vistouch::cvtp::{ClipEncoder, EncoderConfig};
use vistouch::data::{synth_pair, OracleClassifier, PairSample, SynthParams, SynthSample};
use vistouch::rng::Stream;
use vistouch::tasks::{touch_to_image, train_task, ConcatSource, Direction, TaskSpec, TaskTrainConfig};

fn env<T: FromStr>(key: &str, default: T) -> T {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

#[test]
#[ignore]
fn exp_overfit_generation() {
    let steps: usize = env("EXP_STEPS", 800);
    let lr: f64 = env("EXP_LR", 1e-3);
    let t_max: usize = env("EXP_T", 200);
    let size: usize = env("EXP_SIZE", 16);
    let sample_steps: usize = env("EXP_SAMPLE", 40);
    let embed: usize = env("EXP_EMBED", 64);
    let batch: usize = env("EXP_BATCH", 4);

    let t0 = Instant::now();
    let base = SynthParams {
        size,
        window: 3,
        ..SynthParams::default()
    };
    let data: Vec<PairSample<f32>> = (0..32)
        .map(|i| {
            let s: SynthSample<f32> = synth_pair(&SynthParams {
                roughness_class: (i % 2) * 2,
                seed: 0x7_0000 + i as u64,
                ..base.clone()
            });
            PairSample {
                id: format!("p{i}"),
                visual: s.visual,
                tactile: s.tactile,
                mask: None,
                reflectance: Some(s.reflectance),
                reference: None,
                label: s.label,
            }
        })
        .collect();

    let spec = TaskSpec {
        direction: Direction::TouchToImage,
        hand_free: false,
        concat: ConcatSource::None,
        n_level: t_max / 2,
        guidance_scale: 1.0,
    };
    let enc_cfg = EncoderConfig {
        embed_dim: embed,
        ..EncoderConfig::desk(3)
    };
    let enc = ClipEncoder::<f32>::new(enc_cfg, 7).unwrap();
    let cfg = TaskTrainConfig {
        steps,
        batch,
        lr,
        drop_prob: 0.1,
        seed: 7,
        codec: CodecSpec::identity(),
        t_max,
    };
    let (bundle, report) = train_task(&spec, &data, enc, &cfg).unwrap();
    let k = 20.min(report.losses.len() / 2);
    let head: f64 = report.losses[..k].iter().sum::<f64>() / k as f64;
    let tail: f64 = report.losses[report.losses.len() - k..].iter().sum::<f64>() / k as f64;
    println!(
        "train: loss {head:.4} -> {tail:.4} (ratio {:.3}), t={:.1?}",
        tail / head,
        t0.elapsed()
    );

    // probe: does the trained denoiser use the condition at all?
    {
        use vistouch::diffusion::{eps_loss, EpsLossOpts};
        use vistouch::nn::{Bound, Tape};
        let codec = vistouch::codec::Codec::<f32>::analytic(CodecSpec::identity()).unwrap();
        let fused: Vec<_> = data
            .iter()
            .map(|p| {
                let f = vistouch::cvtp::fuse_tactile(&p.tactile);
                let s = f.shape().to_vec();
                f.into_shape(ndarray::IxDyn(&[1, s[0], s[1], s[2]])).unwrap()
            })
            .collect();
        let z0s: Vec<_> = data
            .iter()
            .map(|p| {
                let z = codec.encode(p.visual.center()).unwrap();
                let s = z.shape().to_vec();
                z.into_shape(ndarray::IxDyn(&[1, s[0], s[1], s[2]])).unwrap()
            })
            .collect();
        let mut eval = |shift: usize| -> f64 {
            let mut tot = 0.0;
            for (i, z0) in z0s.iter().enumerate() {
                let mut tape = Tape::new();
                let bd = Bound::new(&mut tape, &bundle.denoiser.params);
                let be = Bound::new(&mut tape, &bundle.encoder.params);
                let f = tape.leaf(fused[(i + shift) % 32].clone());
                let c = bundle.encoder.forward(&mut tape, &be, f).unwrap();
                let mut nrng = Stream::new(999, "probe", i as u64);
                let l = eps_loss(&mut tape, z0, &EpsLossOpts::plain(), &bundle.schedule, &mut nrng, |tape, z, t| {
                    bundle.denoiser.forward(tape, &bd, z, t, Some(c))
                })
                .unwrap();
                tot += *tape.value(l).iter().next().unwrap() as f64;
            }
            tot / 32.0
        };
        println!("probe: matched {:.4} mismatched {:.4}", eval(0), eval(1));
    }

    let t1 = Instant::now();
    let oracle = OracleClassifier::calibrate(&base, 16);
    let mut bundle = bundle;
    for scale in [1.0, 3.0, 6.0] {
        bundle.spec.guidance_scale = scale;
        let mut hits = 0;
        let mut consist = 0;
        let mut counts = [0usize; 3];
        let mut ref_ok = 0;
        for (i, p) in data.iter().enumerate() {
            let img = touch_to_image(&p.tactile, &bundle, sample_steps, &mut Stream::new(100 + i as u64, "exp7", 0)).unwrap();
            let got = oracle.classify(&img);
            let want = (i % 2) * 2;
            counts[got] += 1;
            if got == want {
                hits += 1;
            }
            let rc = oracle.classify(p.visual.center());
            if rc == want {
                ref_ok += 1;
            }
            if got == rc {
                consist += 1;
            }
        }
        println!(
            "scale {scale}: {hits}/32 to class, consistency {consist}/32, counts {counts:?}, refs {ref_ok}/32, t={:.1?}",
            t1.elapsed()
        );
    }
    println!("total t={:.1?}", t0.elapsed());
}
