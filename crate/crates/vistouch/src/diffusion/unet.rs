//! Config-driven U-Net noise predictor: residual blocks with timestep
//! embeddings, and spatial transformer blocks (self-attention plus a
//! single-token cross-attention over the condition embedding) at the
//! configured resolutions.

use super::NoisePredictor;
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore, Tape, Var};
use crate::rng::Stream;
use crate::scalar::{Scalar, Tensor};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    /// spatial side lengths at which transformer blocks run
    pub attn_resolutions: Vec<usize>,
    pub num_res_blocks: usize,
    pub head_channels: usize,
    /// cross-attention context dimension; 0 disables conditioning
    pub context_dim: usize,
    pub time_dim: usize,
    pub norm_groups: usize,
}

impl UNetConfig {
    /// Paper-scale layout: mults [1,2,3,5], attention at 8/4/2, two
    /// residual blocks per level, 32-wide heads, 512-d context.
    pub fn full(in_channels: usize, out_channels: usize, base_width: usize) -> Self {
        UNetConfig {
            in_channels,
            out_channels,
            base_width,
            channel_mults: vec![1, 2, 3, 5],
            attn_resolutions: vec![8, 4, 2],
            num_res_blocks: 2,
            head_channels: 32,
            context_dim: 512,
            time_dim: 64,
            norm_groups: 8,
        }
    }

    /// Small configuration for fast CPU training.
    pub fn desk(in_channels: usize, out_channels: usize, context_dim: usize) -> Self {
        UNetConfig {
            in_channels,
            out_channels,
            base_width: 16,
            channel_mults: vec![1, 2],
            attn_resolutions: vec![8],
            num_res_blocks: 1,
            head_channels: 8,
            context_dim,
            time_dim: 32,
            norm_groups: 4,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() {
            return Err(Error::Config("channel_mults must be non-empty".into()));
        }
        if self.base_width == 0 || self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("base_width > 0 and even time_dim >= 2 required".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width * self.channel_mults[level]
    }
}

pub struct UNet<F: Scalar> {
    pub cfg: UNetConfig,
    pub params: ParamStore<F>,
}

fn norm_groups(cfg: &UNetConfig, c: usize) -> usize {
    if c % cfg.norm_groups == 0 {
        cfg.norm_groups
    } else {
        1
    }
}

fn heads_for(cfg: &UNetConfig, c: usize) -> usize {
    if c % cfg.head_channels == 0 {
        c / cfg.head_channels
    } else {
        1
    }
}

impl<F: Scalar> UNet<F> {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let mut rng = Stream::new(seed, "unet-init", 0);
        let td = cfg.time_dim;
        p.init_linear("time.fc1", td, td, &mut rng);
        p.init_linear("time.fc2", td, td, &mut rng);
        p.init_conv("conv_in", cfg.base_width, cfg.in_channels, 3, &mut rng);

        let levels = cfg.channel_mults.len();
        let mut c_prev = cfg.base_width;
        for l in 0..levels {
            let c = cfg.width(l);
            for r in 0..cfg.num_res_blocks {
                let cin = if r == 0 { c_prev } else { c };
                init_resblock(&mut p, &cfg, &format!("down{l}.res{r}"), cin, c, &mut rng);
            }
            init_transformer(&mut p, &cfg, &format!("down{l}.attn"), c, &mut rng);
            if l + 1 < levels {
                p.init_conv(&format!("down{l}.down"), c, c, 3, &mut rng);
            }
            c_prev = c;
        }
        let c_mid = cfg.width(levels - 1);
        init_resblock(&mut p, &cfg, "mid.res0", c_mid, c_mid, &mut rng);
        init_transformer(&mut p, &cfg, "mid.attn", c_mid, &mut rng);
        init_resblock(&mut p, &cfg, "mid.res1", c_mid, c_mid, &mut rng);
        for l in (0..levels.saturating_sub(1)).rev() {
            let c = cfg.width(l);
            let c_up = cfg.width(l + 1);
            p.init_conv(&format!("up{l}.conv"), c, c_up, 3, &mut rng);
            for r in 0..cfg.num_res_blocks {
                let cin = if r == 0 { 2 * c } else { c };
                init_resblock(&mut p, &cfg, &format!("up{l}.res{r}"), cin, c, &mut rng);
            }
            init_transformer(&mut p, &cfg, &format!("up{l}.attn"), c, &mut rng);
        }
        p.init_norm("out.norm", cfg.base_width);
        p.init_conv_zero("out.conv", cfg.out_channels, cfg.base_width, 3);
        Ok(UNet { cfg, params: p })
    }

    /// Sinusoidal timestep features, shared by the whole batch.
    fn time_features(&self, t: usize, batch: usize) -> Tensor<F> {
        let d = self.cfg.time_dim;
        let half = d / 2;
        let mut v = Tensor::zeros(IxDyn(&[batch, d]));
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
            let ang = t as f64 * freq;
            for b in 0..batch {
                v[IxDyn(&[b, i])] = F::of(ang.sin());
                v[IxDyn(&[b, half + i])] = F::of(ang.cos());
            }
        }
        v
    }

    /// Forward pass on the tape. `cond` is a [B, context_dim] embedding
    /// batch; `None` uses the zero-filled null condition.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        z: Var,
        t: usize,
        cond: Option<Var>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let shape = tape.shape(z).to_vec();
        if shape.len() != 4 || shape[1] != cfg.in_channels {
            return Err(Error::validation(format!(
                "denoiser input must be [B,{},h,w], got {:?}",
                cfg.in_channels, shape
            )));
        }
        let (batch, mut res) = (shape[0], shape[2]);

        // condition token [B, 1, ctx]; zero-filled when absent
        let ctx = if cfg.context_dim > 0 {
            let c = match cond {
                Some(c) => c,
                None => tape.leaf(Tensor::zeros(IxDyn(&[batch, cfg.context_dim]))),
            };
            Some(tape.reshape(c, &[batch, 1, cfg.context_dim]))
        } else {
            None
        };

        // timestep embedding MLP
        let tf = tape.leaf(self.time_features(t, batch));
        let w1 = bound.var("time.fc1");
        let b1 = bound.var("time.fc1.bias");
        let temb = tape.linear(tf, w1, b1);
        let temb = tape.silu(temb);
        let w2 = bound.var("time.fc2");
        let b2 = bound.var("time.fc2.bias");
        let temb = tape.linear(temb, w2, b2);

        let wi = bound.var("conv_in");
        let bi = bound.var("conv_in.bias");
        let mut h = tape.conv2d(z, wi, bi, 1, 1);

        let levels = cfg.channel_mults.len();
        let mut skips = Vec::with_capacity(levels);
        let mut c_prev = cfg.base_width;
        for l in 0..levels {
            let c = cfg.width(l);
            for r in 0..cfg.num_res_blocks {
                let cin = if r == 0 { c_prev } else { c };
                h = self.resblock(tape, bound, &format!("down{l}.res{r}"), h, temb, cin, c)?;
            }
            if cfg.attn_resolutions.contains(&res) {
                h = self.transformer(tape, bound, &format!("down{l}.attn"), h, ctx, c)?;
            }
            skips.push(h);
            if l + 1 < levels {
                let w = bound.var(&format!("down{l}.down"));
                let b = bound.var(&format!("down{l}.down.bias"));
                h = tape.conv2d(h, w, b, 2, 1);
                res /= 2;
            }
            c_prev = c;
        }

        let c_mid = cfg.width(levels - 1);
        h = self.resblock(tape, bound, "mid.res0", h, temb, c_mid, c_mid)?;
        if cfg.attn_resolutions.contains(&res) {
            h = self.transformer(tape, bound, "mid.attn", h, ctx, c_mid)?;
        }
        h = self.resblock(tape, bound, "mid.res1", h, temb, c_mid, c_mid)?;

        for l in (0..levels.saturating_sub(1)).rev() {
            let c = cfg.width(l);
            h = tape.upsample_nearest2x(h);
            res *= 2;
            let w = bound.var(&format!("up{l}.conv"));
            let b = bound.var(&format!("up{l}.conv.bias"));
            h = tape.conv2d(h, w, b, 1, 1);
            h = tape.concat(1, &[h, skips[l]]);
            for r in 0..cfg.num_res_blocks {
                let cin = if r == 0 { 2 * c } else { c };
                h = self.resblock(tape, bound, &format!("up{l}.res{r}"), h, temb, cin, c)?;
            }
            if cfg.attn_resolutions.contains(&res) {
                h = self.transformer(tape, bound, &format!("up{l}.attn"), h, ctx, c)?;
            }
        }

        let g = bound.var("out.norm.gamma");
        let be = bound.var("out.norm.beta");
        let gn = norm_groups(cfg, cfg.base_width);
        h = tape.group_norm(h, g, be, gn, 1e-5);
        h = tape.silu(h);
        let w = bound.var("out.conv");
        let b = bound.var("out.conv.bias");
        Ok(tape.conv2d(h, w, b, 1, 1))
    }

    fn resblock(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        name: &str,
        x: Var,
        temb: Var,
        cin: usize,
        cout: usize,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let g1 = bound.var(&format!("{name}.gn1.gamma"));
        let b1 = bound.var(&format!("{name}.gn1.beta"));
        let mut h = tape.group_norm(x, g1, b1, norm_groups(cfg, cin), 1e-5);
        h = tape.silu(h);
        let w1 = bound.var(&format!("{name}.conv1"));
        let wb1 = bound.var(&format!("{name}.conv1.bias"));
        h = tape.conv2d(h, w1, wb1, 1, 1);
        // timestep injection as a per-channel bias
        let tw = bound.var(&format!("{name}.temb"));
        let tb = bound.var(&format!("{name}.temb.bias"));
        let tproj = tape.linear(temb, tw, tb);
        h = tape.add_channel_bias(h, tproj);
        let g2 = bound.var(&format!("{name}.gn2.gamma"));
        let b2 = bound.var(&format!("{name}.gn2.beta"));
        h = tape.group_norm(h, g2, b2, norm_groups(cfg, cout), 1e-5);
        h = tape.silu(h);
        let w2 = bound.var(&format!("{name}.conv2"));
        let wb2 = bound.var(&format!("{name}.conv2.bias"));
        h = tape.conv2d(h, w2, wb2, 1, 1);
        let skip = if cin != cout {
            let ws = bound.var(&format!("{name}.skip"));
            let bs = bound.var(&format!("{name}.skip.bias"));
            tape.conv2d(x, ws, bs, 1, 0)
        } else {
            x
        };
        Ok(tape.add(h, skip))
    }

    /// Multi-head scaled-dot-product attention over token sequences
    /// q:[B,N,C] against kv:[B,M,C].
    fn attention(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        name: &str,
        q_tokens: Var,
        kv_tokens: Var,
        c: usize,
        kv_dim: usize,
    ) -> Var {
        let heads = heads_for(&self.cfg, c);
        let dh = c / heads;
        let qs = tape.shape(q_tokens).to_vec();
        let ks = tape.shape(kv_tokens).to_vec();
        let (b, n, m) = (qs[0], qs[1], ks[1]);

        let project = |tape: &mut Tape<F>, tokens: Var, rows: usize, din: usize, which: &str| {
            let w = bound.var(&format!("{name}.{which}"));
            let bias = bound.var(&format!("{name}.{which}.bias"));
            let flat = tape.reshape(tokens, &[b * rows, din]);
            let y = tape.linear(flat, w, bias);
            // [B, rows, heads, dh] -> [B*heads, rows, dh]
            let y = tape.reshape(y, &[b, rows, heads, dh]);
            let y = tape.permute(y, &[0, 2, 1, 3]);
            tape.reshape(y, &[b * heads, rows, dh])
        };
        let q = project(tape, q_tokens, n, c, "q");
        let k = project(tape, kv_tokens, m, kv_dim, "k");
        let v = project(tape, kv_tokens, m, kv_dim, "v");

        let kt = tape.transpose_last2(k);
        let logits = tape.bmm(q, kt);
        let logits = tape.scale(logits, F::of(1.0 / (dh as f64).sqrt()));
        let attn = tape.softmax_last(logits);
        let out = tape.bmm(attn, v);
        let out = tape.reshape(out, &[b, heads, n, dh]);
        let out = tape.permute(out, &[0, 2, 1, 3]);
        let out = tape.reshape(out, &[b * n, c]);
        let wo = bound.var(&format!("{name}.out"));
        let bo = bound.var(&format!("{name}.out.bias"));
        let out = tape.linear(out, wo, bo);
        tape.reshape(out, &[b, n, c])
    }

    fn transformer(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        name: &str,
        x: Var,
        ctx: Option<Var>,
        c: usize,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let xs = tape.shape(x).to_vec();
        let (b, hgt, wid) = (xs[0], xs[2], xs[3]);
        let n = hgt * wid;
        let g = bound.var(&format!("{name}.norm.gamma"));
        let be = bound.var(&format!("{name}.norm.beta"));
        let h = tape.group_norm(x, g, be, norm_groups(cfg, c), 1e-5);
        let wpi = bound.var(&format!("{name}.proj_in"));
        let bpi = bound.var(&format!("{name}.proj_in.bias"));
        let h = tape.conv2d(h, wpi, bpi, 1, 0);
        // [B,C,H,W] -> [B,N,C]
        let h = tape.reshape(h, &[b, c, n]);
        let mut tok = tape.transpose_last2(h);

        let sa = self.attention(tape, bound, &format!("{name}.self"), tok, tok, c, c);
        tok = tape.add(tok, sa);
        if let Some(ctx) = ctx {
            let ca = self.attention(
                tape,
                bound,
                &format!("{name}.cross"),
                tok,
                ctx,
                c,
                cfg.context_dim,
            );
            tok = tape.add(tok, ca);
        }
        // feed-forward
        let flat = tape.reshape(tok, &[b * n, c]);
        let w1 = bound.var(&format!("{name}.ff1"));
        let b1 = bound.var(&format!("{name}.ff1.bias"));
        let f = tape.linear(flat, w1, b1);
        let f = tape.silu(f);
        let w2 = bound.var(&format!("{name}.ff2"));
        let b2 = bound.var(&format!("{name}.ff2.bias"));
        let f = tape.linear(f, w2, b2);
        let f = tape.reshape(f, &[b, n, c]);
        tok = tape.add(tok, f);

        // back to the map and the zero-initialized residual projection
        let h = tape.transpose_last2(tok);
        let h = tape.reshape(h, &[b, c, hgt, wid]);
        let wpo = bound.var(&format!("{name}.proj_out"));
        let bpo = bound.var(&format!("{name}.proj_out.bias"));
        let h = tape.conv2d(h, wpo, bpo, 1, 0);
        Ok(tape.add(x, h))
    }
}

fn init_resblock<F: Scalar>(
    p: &mut ParamStore<F>,
    cfg: &UNetConfig,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut Stream,
) {
    p.init_norm(&format!("{name}.gn1"), cin);
    p.init_conv(&format!("{name}.conv1"), cout, cin, 3, rng);
    p.init_linear(&format!("{name}.temb"), cfg.time_dim, cout, rng);
    p.init_norm(&format!("{name}.gn2"), cout);
    p.init_conv(&format!("{name}.conv2"), cout, cout, 3, rng);
    if cin != cout {
        p.init_conv(&format!("{name}.skip"), cout, cin, 1, rng);
    }
}

fn init_transformer<F: Scalar>(p: &mut ParamStore<F>, cfg: &UNetConfig, name: &str, c: usize, rng: &mut Stream) {
    p.init_norm(&format!("{name}.norm"), c);
    p.init_conv(&format!("{name}.proj_in"), c, c, 1, rng);
    for (attn, kv_dim) in [("self", c), ("cross", cfg.context_dim)] {
        if attn == "cross" && cfg.context_dim == 0 {
            continue;
        }
        p.init_linear(&format!("{name}.{attn}.q"), c, c, rng);
        p.init_linear(&format!("{name}.{attn}.k"), kv_dim, c, rng);
        p.init_linear(&format!("{name}.{attn}.v"), kv_dim, c, rng);
        p.init_linear(&format!("{name}.{attn}.out"), c, c, rng);
    }
    p.init_linear(&format!("{name}.ff1"), c, c, rng);
    p.init_linear(&format!("{name}.ff2"), c, c, rng);
    p.init_conv_zero(&format!("{name}.proj_out"), c, c, 1);
}

impl<F: Scalar> NoisePredictor<F> for UNet<F> {
    fn predict(&self, z: &Tensor<F>, t: usize, cond: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &self.params);
        let zv = tape.leaf(z.clone());
        let cv = cond.map(|c| tape.leaf(c.clone()));
        let out = self.forward(&mut tape, &bound, zv, t, cv)?;
        Ok(tape.value(out).clone())
    }
}
