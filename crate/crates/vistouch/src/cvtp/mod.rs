//! Contrastive visuo-tactile pretraining: temporal clip encoders with
//! channel-wise early fusion, a FIFO memory bank per modality, and the
//! symmetric InfoNCE objective.

use crate::data::{TactileClip, VisualClip};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore, Sgd, Tape, Var};
use crate::rng::Stream;
use crate::scalar::{Scalar, Tensor};
use ndarray::{IxDyn, Slice};
use serde::{Deserialize, Serialize};

pub const EMBED_DIM: usize = 512;
/// Per-layer (name, batch mean, batch variance) collected by a
/// training-mode forward pass through batch-norm layers.
pub type BnStats<F> = Vec<(String, Tensor<F>, Tensor<F>)>;
/// Exponential-moving-average momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_BANK_SIZE: usize = 16385;

/// Normalization used between encoder convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    /// per-sample group normalization (no state beyond gamma/beta)
    #[default]
    Group,
    /// batch normalization with running statistics for evaluation mode
    Batch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// clip length; input channels are 3 * window (early fusion)
    pub window: usize,
    pub base_width: usize,
    /// width multiplier per residual stage; each stage halves resolution
    pub stage_mults: Vec<usize>,
    pub embed_dim: usize,
    pub tau: f64,
    pub norm_groups: usize,
    /// stride of the stem convolution; values above 1 patchify the input
    /// before the residual stages (useful for large frames on small hosts)
    #[serde(default = "default_in_stride")]
    pub in_stride: usize,
    /// spatial size of the feature map fed to the projection head; 1 means
    /// global average pooling, larger values flatten a p*p map instead so
    /// the embedding keeps coarse spatial layout
    #[serde(default = "default_in_stride")]
    pub head_spatial: usize,
    #[serde(default)]
    pub norm: NormKind,
}

fn default_in_stride() -> usize {
    1
}

impl EncoderConfig {
    pub fn desk(window: usize) -> Self {
        EncoderConfig {
            window,
            base_width: 16,
            stage_mults: vec![1, 2, 4],
            embed_dim: EMBED_DIM,
            tau: DEFAULT_TAU,
            norm_groups: 4,
            in_stride: 1,
            head_spatial: 1,
            norm: NormKind::Group,
        }
    }

    pub fn in_channels(&self) -> usize {
        3 * self.window
    }

    /// Stem kernel size: widened when striding so no input pixel is skipped.
    pub fn stem_kernel(&self) -> usize {
        if self.in_stride > 1 {
            self.in_stride + 1
        } else {
            3
        }
    }

    fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::validation("temperature must be positive"));
        }
        if self.window == 0
            || self.base_width == 0
            || self.stage_mults.is_empty()
            || self.in_stride == 0
            || self.head_spatial == 0
        {
            return Err(Error::Config("degenerate encoder configuration".into()));
        }
        Ok(())
    }
}

/// Residual convolutional clip encoder; frames are fused channel-wise
/// before the first convolution, and the head is a linear projection to
/// the embedding dimension followed by L2 normalization.
pub struct ClipEncoder<F: Scalar> {
    pub cfg: EncoderConfig,
    pub params: ParamStore<F>,
}

fn groups_for(cfg: &EncoderConfig, c: usize) -> usize {
    if c % cfg.norm_groups == 0 {
        cfg.norm_groups
    } else {
        1
    }
}

impl<F: Scalar> ClipEncoder<F> {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let mut rng = Stream::new(seed, "cvtp-init", 0);
        p.init_conv("conv_in", cfg.base_width, cfg.in_channels(), cfg.stem_kernel(), &mut rng);
        let mut c_prev = cfg.base_width;
        let init_stats = |p: &mut ParamStore<F>, name: &str, c: usize| {
            p.insert(format!("{name}.mean"), Tensor::zeros(IxDyn(&[c])));
            p.insert(format!("{name}.var"), Tensor::ones(IxDyn(&[c])));
        };
        for (s, mult) in cfg.stage_mults.iter().enumerate() {
            let c = cfg.base_width * mult;
            p.init_norm(&format!("stage{s}.gn1"), c_prev);
            p.init_conv(&format!("stage{s}.conv1"), c, c_prev, 3, &mut rng);
            p.init_norm(&format!("stage{s}.gn2"), c);
            p.init_conv(&format!("stage{s}.conv2"), c, c, 3, &mut rng);
            if cfg.norm == NormKind::Batch {
                init_stats(&mut p, &format!("stage{s}.gn1"), c_prev);
                init_stats(&mut p, &format!("stage{s}.gn2"), c);
            }
            if c_prev != c {
                p.init_conv(&format!("stage{s}.skip"), c, c_prev, 1, &mut rng);
            }
            p.init_conv(&format!("stage{s}.down"), c, c, 3, &mut rng);
            c_prev = c;
        }
        p.init_linear(
            "head",
            c_prev * cfg.head_spatial * cfg.head_spatial,
            cfg.embed_dim,
            &mut rng,
        );
        if cfg.norm == NormKind::Batch {
            // normalizing the projection output across the batch keeps the
            // embedding cloud spread out instead of crowding one direction
            p.init_norm("head_bn", cfg.embed_dim);
            init_stats(&mut p, "head_bn", cfg.embed_dim);
        }
        Ok(ClipEncoder { cfg, params: p })
    }

    /// Batch forward on the tape: x [B, 3w, H, W] -> unit-norm [B, D].
    /// Evaluation mode: batch-norm layers use frozen running statistics.
    pub fn forward(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Result<Var> {
        self.forward_impl(tape, bound, x, &mut None)
    }

    /// Training-mode forward: batch-norm layers normalize by batch
    /// statistics and append (layer name, mean, var) to `stats` so the
    /// caller can update running statistics after the optimizer step.
    pub fn forward_train(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        stats: &mut BnStats<F>,
    ) -> Result<Var> {
        let mut s = Some(stats);
        self.forward_impl(tape, bound, x, &mut s)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        stats: &mut Option<&mut BnStats<F>>,
    ) -> Result<Var> {
        let map = self.trunk_map(tape, bound, x, stats)?;
        let p = self.cfg.head_spatial;
        let head_in = if p == 1 {
            tape.global_avg_pool(map)
        } else {
            let s = tape.shape(map).to_vec();
            if s[2] != p || s[3] != p {
                return Err(Error::Config(format!(
                    "encoder feature map is {}x{} but head expects {p}x{p}",
                    s[2], s[3]
                )));
            }
            tape.reshape(map, &[s[0], s[1] * p * p])
        };
        let wh = bound.var("head");
        let bh = bound.var("head.bias");
        let mut e = tape.linear(head_in, wh, bh);
        if self.cfg.norm == NormKind::Batch {
            let b = tape.shape(e)[0];
            let d = self.cfg.embed_dim;
            let e4 = tape.reshape(e, &[b, d, 1, 1]);
            let n4 = self.norm_layer(tape, bound, "head_bn", e4, d, stats);
            e = tape.reshape(n4, &[b, d]);
        }
        Ok(tape.l2_normalize_rows(e))
    }

    /// Convolutional trunk up to (and including) global average pooling:
    /// the pooled features used as a pluggable feature extractor.
    pub fn trunk(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Result<Var> {
        let map = self.trunk_map(tape, bound, x, &mut None)?;
        Ok(tape.global_avg_pool(map))
    }

    /// One normalization layer; dispatches on the configured kind.
    fn norm_layer(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        name: &str,
        h: Var,
        channels: usize,
        stats: &mut Option<&mut BnStats<F>>,
    ) -> Var {
        match self.cfg.norm {
            NormKind::Group => {
                let g = bound.var(&format!("{name}.gamma"));
                let b = bound.var(&format!("{name}.beta"));
                tape.group_norm(h, g, b, groups_for(&self.cfg, channels), 1e-5)
            }
            NormKind::Batch => {
                if let Some(st) = stats.as_deref_mut() {
                    let g = bound.var(&format!("{name}.gamma"));
                    let b = bound.var(&format!("{name}.beta"));
                    let (y, m, v) = tape.batch_norm(h, g, b, 1e-5);
                    st.push((name.to_string(), m, v));
                    y
                } else {
                    // evaluation: fold frozen running stats and gamma/beta
                    // into a fixed per-channel affine map
                    let gm = self.params.get(&format!("{name}.gamma"));
                    let bt = self.params.get(&format!("{name}.beta"));
                    let m = self.params.get(&format!("{name}.mean"));
                    let v = self.params.get(&format!("{name}.var"));
                    let mut scale = Tensor::zeros(IxDyn(&[channels]));
                    let mut shift = Tensor::zeros(IxDyn(&[channels]));
                    for c in 0..channels {
                        let istd = F::one() / (v[IxDyn(&[c])] + F::of(1e-5)).sqrt();
                        let s = gm[IxDyn(&[c])] * istd;
                        scale[IxDyn(&[c])] = s;
                        shift[IxDyn(&[c])] = bt[IxDyn(&[c])] - m[IxDyn(&[c])] * s;
                    }
                    let sv = tape.leaf(scale);
                    let tv = tape.leaf(shift);
                    tape.channel_affine(h, sv, tv)
                }
            }
        }
    }

    /// Convolutional trunk up to the final feature map [B, C, h', w'].
    fn trunk_map(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        stats: &mut Option<&mut BnStats<F>>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != cfg.in_channels() {
            return Err(Error::validation(format!(
                "encoder input must be [B,{},h,w], got {:?}",
                cfg.in_channels(),
                shape
            )));
        }
        let wi = bound.var("conv_in");
        let bi = bound.var("conv_in.bias");
        let mut h = tape.conv2d(x, wi, bi, cfg.in_stride, cfg.stem_kernel() / 2);
        let mut c_prev = cfg.base_width;
        for (s, mult) in cfg.stage_mults.iter().enumerate() {
            let c = cfg.base_width * mult;
            let mut r = self.norm_layer(tape, bound, &format!("stage{s}.gn1"), h, c_prev, stats);
            r = tape.silu(r);
            let w1 = bound.var(&format!("stage{s}.conv1"));
            let wb1 = bound.var(&format!("stage{s}.conv1.bias"));
            r = tape.conv2d(r, w1, wb1, 1, 1);
            r = self.norm_layer(tape, bound, &format!("stage{s}.gn2"), r, c, stats);
            r = tape.silu(r);
            let w2 = bound.var(&format!("stage{s}.conv2"));
            let wb2 = bound.var(&format!("stage{s}.conv2.bias"));
            r = tape.conv2d(r, w2, wb2, 1, 1);
            let skip = if c_prev != c {
                let ws = bound.var(&format!("stage{s}.skip"));
                let bs = bound.var(&format!("stage{s}.skip.bias"));
                tape.conv2d(h, ws, bs, 1, 0)
            } else {
                h
            };
            h = tape.add(r, skip);
            let wd = bound.var(&format!("stage{s}.down"));
            let bd = bound.var(&format!("stage{s}.down.bias"));
            h = tape.conv2d(h, wd, bd, 2, 1);
            c_prev = c;
        }
        let _ = c_prev;
        Ok(h)
    }

    /// Penultimate (pooled, pre-head) features of a fused batch; used as a
    /// pluggable feature extractor for distribution metrics.
    pub fn features(&self, fused: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &self.params);
        let x = tape.leaf(fused.clone());
        let f = self.trunk(&mut tape, &bound, x)?;
        Ok(tape.value(f).clone())
    }

    /// Evaluation-mode embedding of a batch of fused clips [B, 3w, H, W].
    pub fn embed(&self, fused: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &self.params);
        let x = tape.leaf(fused.clone());
        let e = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(e).clone())
    }
}

/// Stack a clip's frames channel-wise: w frames of [3,H,W] -> [3w,H,W].
pub fn fuse_frames<F: Scalar>(frames: &[crate::data::ImageFrame<F>]) -> Tensor<F> {
    let views: Vec<_> = frames.iter().map(|f| f.pixels.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
}

pub fn fuse_visual<F: Scalar>(clip: &VisualClip<F>) -> Tensor<F> {
    fuse_frames(&clip.frames)
}

pub fn fuse_tactile<F: Scalar>(clip: &TactileClip<F>) -> Tensor<F> {
    fuse_frames(&clip.frames)
}

/// Encode one clip; validates the clip length against the config.
pub fn encode_visual_clip<F: Scalar>(enc: &ClipEncoder<F>, clip: &VisualClip<F>) -> Result<Tensor<F>> {
    encode_fused(enc, fuse_visual(clip), clip.window())
}

pub fn encode_tactile_clip<F: Scalar>(enc: &ClipEncoder<F>, clip: &TactileClip<F>) -> Result<Tensor<F>> {
    encode_fused(enc, fuse_tactile(clip), clip.window())
}

fn encode_fused<F: Scalar>(enc: &ClipEncoder<F>, fused: Tensor<F>, len: usize) -> Result<Tensor<F>> {
    if len != enc.cfg.window {
        return Err(Error::validation(format!(
            "clip length {len} does not match configured window {}",
            enc.cfg.window
        )));
    }
    let shape = fused.shape().to_vec();
    let batched = fused
        .into_shape(IxDyn(&[1, shape[0], shape[1], shape[2]]))
        .unwrap();
    let e = enc.embed(&batched)?;
    Ok(e.index_axis(ndarray::Axis(0), 0).to_owned())
}

/// FIFO ring buffer of unit-norm embeddings for one modality.
#[derive(Debug, Clone)]
pub struct MemoryBank<F: Scalar> {
    data: Tensor<F>, // [K, dim]
    cursor: usize,
    filled: usize,
}

impl<F: Scalar> MemoryBank<F> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity < 2 {
            return Err(Error::validation("bank capacity must be at least 2"));
        }
        Ok(MemoryBank {
            data: Tensor::zeros(IxDyn(&[capacity, dim])),
            cursor: 0,
            filled: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.capacity()
    }

    /// Write `e` at the cursor and advance it (FIFO eviction). Returns the
    /// slot written.
    pub fn push(&mut self, e: &Tensor<F>) -> Result<usize> {
        if e.ndim() != 1 || e.shape()[0] != self.dim() {
            return Err(Error::validation("bank push: embedding dim mismatch"));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding".into()));
        }
        let norm = e.iter().map(|v| v.to_f64_().powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::validation(format!(
                "bank push: embedding norm {norm} not unit"
            )));
        }
        let slot = self.cursor;
        let row = e.clone().into_shape(IxDyn(&[1, self.dim()])).unwrap();
        self.data
            .slice_axis_mut(ndarray::Axis(0), Slice::from(slot..slot + 1))
            .assign(&row);
        self.cursor = (self.cursor + 1) % self.capacity();
        self.filled = (self.filled + 1).min(self.capacity());
        Ok(slot)
    }

    pub fn get(&self, slot: usize) -> Tensor<F> {
        self.data.index_axis(ndarray::Axis(0), slot).to_owned()
    }

    /// All entries except `exclude`, as a [K-1, dim] matrix.
    pub fn entries_excluding(&self, exclude: usize) -> Tensor<F> {
        let k = self.capacity();
        let before = self.data.slice_axis(ndarray::Axis(0), Slice::from(0..exclude));
        let after = self.data.slice_axis(ndarray::Axis(0), Slice::from(exclude + 1..k));
        ndarray::concatenate(ndarray::Axis(0), &[before, after])
            .unwrap()
            .into_dyn()
    }
}

/// One direction of the contrastive objective on the tape:
/// -log( exp(a.p/tau) / (exp(a.p/tau) + sum_j exp(a.n_j/tau)) ), where the
/// fresh positive supplies its own denominator term and `negatives` are the
/// remaining K-1 bank entries.
pub fn infonce_loss<F: Scalar>(
    tape: &mut Tape<F>,
    anchor: Var,
    positive: Var,
    negatives: &Tensor<F>,
    tau: f64,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::validation("temperature must be positive"));
    }
    let dim = tape.shape(anchor).iter().product::<usize>();
    if negatives.ndim() != 2 || negatives.shape()[1] != dim {
        return Err(Error::validation("negative matrix dim mismatch"));
    }
    if tape.value(anchor).iter().any(|v| !v.is_finite())
        || tape.value(positive).iter().any(|v| !v.is_finite())
    {
        return Err(Error::Numeric("non-finite embedding in loss".into()));
    }
    let a = tape.reshape(anchor, &[1, dim]);
    let p = tape.reshape(positive, &[1, dim]);
    let pt = tape.transpose_last2(p);
    let sim_pos = tape.matmul(a, pt); // [1,1]
    let negs = tape.leaf(negatives.clone());
    let nt = tape.transpose_last2(negs);
    let sim_neg = tape.matmul(a, nt); // [1, K-1]
    let logits = tape.concat(1, &[sim_pos, sim_neg]);
    let logits = tape.scale(logits, F::of(1.0 / tau));
    let sm = tape.softmax_last(logits);
    let p0 = tape.narrow(sm, 1, 0, 1);
    let lp = tape.ln(p0);
    let neg_lp = tape.neg(lp);
    Ok(tape.reshape(neg_lp, &[]))
}

/// Symmetric batch objective: for each pair, InfoNCE in both directions
/// with the opposite modality's bank, averaged over the batch. `slots`
/// give each positive's own slot in its bank so the stale copy is skipped.
#[allow(clippy::too_many_arguments)]
pub fn cvtp_loss<F: Scalar>(
    tape: &mut Tape<F>,
    vis_emb: Var, // [B, D]
    tac_emb: Var, // [B, D]
    bank_v: &MemoryBank<F>,
    bank_t: &MemoryBank<F>,
    slots_v: &[usize],
    slots_t: &[usize],
    tau: f64,
) -> Result<Var> {
    if !bank_v.is_full() || !bank_t.is_full() {
        return Err(Error::validation("memory banks must be full"));
    }
    let b = tape.shape(vis_emb)[0];
    if slots_v.len() != b || slots_t.len() != b {
        return Err(Error::validation("slot list does not match batch"));
    }
    let mut total: Option<Var> = None;
    for i in 0..b {
        let v_i = tape.narrow(vis_emb, 0, i, 1);
        let t_i = tape.narrow(tac_emb, 0, i, 1);
        let neg_t = bank_t.entries_excluding(slots_t[i]);
        let l_vt = infonce_loss(tape, v_i, t_i, &neg_t, tau)?;
        let neg_v = bank_v.entries_excluding(slots_v[i]);
        let l_tv = infonce_loss(tape, t_i, v_i, &neg_v, tau)?;
        let pair = tape.add(l_vt, l_tv);
        total = Some(match total {
            None => pair,
            Some(t) => tape.add(t, pair),
        });
    }
    let total = total.expect("non-empty batch");
    Ok(tape.scale(total, F::of(1.0 / b as f64)))
}

/// Hyperparameters of the pretraining loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvtpTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub bank_size: usize,
    pub seed: u64,
}

impl Default for CvtpTrainConfig {
    fn default() -> Self {
        CvtpTrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 0.1,
            weight_decay: 1e-4,
            bank_size: DEFAULT_BANK_SIZE,
            seed: 0,
        }
    }
}

pub struct CvtpModel<F: Scalar> {
    pub visual: ClipEncoder<F>,
    pub tactile: ClipEncoder<F>,
}

impl<F: Scalar> CvtpModel<F> {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        Ok(CvtpModel {
            visual: ClipEncoder::new(cfg.clone(), seed)?,
            tactile: ClipEncoder::new(cfg, seed.wrapping_add(1))?,
        })
    }
}

/// SGD training with cosine learning-rate decay over epochs. `pairs` are
/// fused clips (visual, tactile), each [3w, H, W]. Returns per-epoch mean
/// losses.
pub fn train_cvtp<F: Scalar>(
    model: &mut CvtpModel<F>,
    pairs: &[(Tensor<F>, Tensor<F>)],
    train: &CvtpTrainConfig,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    let tau = model.visual.cfg.tau;
    let dim = model.visual.cfg.embed_dim;
    let mut bank_v = MemoryBank::new(train.bank_size, dim)?;
    let mut bank_t = MemoryBank::new(train.bank_size, dim)?;

    // prefill both banks from the untrained encoders, cycling the dataset
    {
        let mut i = 0usize;
        while !bank_v.is_full() || !bank_t.is_full() {
            let (v, t) = &pairs[i % pairs.len()];
            let ev = single_embed(&model.visual, v)?;
            let et = single_embed(&model.tactile, t)?;
            bank_v.push(&ev)?;
            bank_t.push(&et)?;
            i += 1;
        }
    }

    let mut opt = Sgd::new(train.lr, train.weight_decay);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = Stream::new(train.seed, "cvtp-train", 0);
    let mut losses = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        opt.set_cosine_epoch(epoch, train.epochs);
        // deterministic shuffle
        for i in (1..order.len()).rev() {
            let j = rng.next_below((i + 1) as u64) as usize;
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(train.batch_size.max(1)) {
            let vis = stack_batch(pairs, chunk, 0);
            let tac = stack_batch(pairs, chunk, 1);

            let mut tape = Tape::new();
            let bound_v = Bound::new(&mut tape, &model.visual.params);
            let bound_t = Bound::new(&mut tape, &model.tactile.params);
            let xv = tape.leaf(vis);
            let xt = tape.leaf(tac);
            let mut stats_v = BnStats::new();
            let mut stats_t = BnStats::new();
            let ev = model.visual.forward_train(&mut tape, &bound_v, xv, &mut stats_v)?;
            let et = model.tactile.forward_train(&mut tape, &bound_t, xt, &mut stats_t)?;

            // push detached embeddings first so each positive has a slot
            let mut slots_v = Vec::with_capacity(chunk.len());
            let mut slots_t = Vec::with_capacity(chunk.len());
            for i in 0..chunk.len() {
                let ev_i = tape.value(ev).index_axis(ndarray::Axis(0), i).to_owned();
                let et_i = tape.value(et).index_axis(ndarray::Axis(0), i).to_owned();
                slots_v.push(bank_v.push(&ev_i)?);
                slots_t.push(bank_t.push(&et_i)?);
            }
            let loss = cvtp_loss(&mut tape, ev, et, &bank_v, &bank_t, &slots_v, &slots_t, tau)?;
            epoch_loss += tape.value(loss)[IxDyn(&[])].to_f64_();
            batches += 1;
            let grads = tape.backward(loss);
            let gv = bound_v.grads(&grads);
            let gt = bound_t.grads(&grads);
            opt.step(&mut model.visual.params, &gv);
            opt.step(&mut model.tactile.params, &gt);
            update_running_stats(&mut model.visual.params, &stats_v);
            update_running_stats(&mut model.tactile.params, &stats_t);
        }
        losses.push(epoch_loss / batches as f64);
    }
    Ok(losses)
}

/// EMA update of batch-norm running statistics after an optimizer step.
fn update_running_stats<F: Scalar>(store: &mut ParamStore<F>, stats: &BnStats<F>) {
    for (name, m, v) in stats {
        for (suffix, fresh) in [("mean", m), ("var", v)] {
            let key = format!("{name}.{suffix}");
            let mut cur = store.get(&key).clone();
            ndarray::Zip::from(&mut cur).and(fresh).for_each(|c, n| {
                *c = *c * F::of(1.0 - BN_MOMENTUM) + *n * F::of(BN_MOMENTUM);
            });
            store.set(&key, cur);
        }
    }
}

fn single_embed<F: Scalar>(enc: &ClipEncoder<F>, fused: &Tensor<F>) -> Result<Tensor<F>> {
    let s = fused.shape().to_vec();
    let b = fused
        .clone()
        .into_shape(IxDyn(&[1, s[0], s[1], s[2]]))
        .unwrap();
    Ok(enc.embed(&b)?.index_axis(ndarray::Axis(0), 0).to_owned())
}

fn stack_batch<F: Scalar>(pairs: &[(Tensor<F>, Tensor<F>)], idx: &[usize], which: usize) -> Tensor<F> {
    let views: Vec<_> = idx
        .iter()
        .map(|&i| {
            let t = if which == 0 { &pairs[i].0 } else { &pairs[i].1 };
            t.view().insert_axis(ndarray::Axis(0))
        })
        .collect();
    ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
}

/// Cross-modal top-1 retrieval accuracy by cosine similarity, both
/// directions averaged separately; embeddings are rows of [N, D].
pub fn retrieval_accuracy<F: Scalar>(vis: &Tensor<F>, tac: &Tensor<F>) -> (f64, f64) {
    let n = vis.shape()[0];
    let sim = |a: &Tensor<F>, i: usize, b: &Tensor<F>, j: usize| -> f64 {
        (0..a.shape()[1])
            .map(|d| (a[IxDyn(&[i, d])] * b[IxDyn(&[j, d])]).to_f64_())
            .sum()
    };
    let mut hit_vt = 0;
    let mut hit_tv = 0;
    for i in 0..n {
        let best_t = (0..n).max_by(|&a, &b| {
            sim(vis, i, tac, a).partial_cmp(&sim(vis, i, tac, b)).unwrap()
        });
        if best_t == Some(i) {
            hit_vt += 1;
        }
        let best_v = (0..n).max_by(|&a, &b| {
            sim(tac, i, vis, a).partial_cmp(&sim(tac, i, vis, b)).unwrap()
        });
        if best_v == Some(i) {
            hit_tv += 1;
        }
    }
    (hit_vt as f64 / n as f64, hit_tv as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageFrame;

    fn unit_vec(dim: usize, axis: usize, sign: f64) -> Tensor<f64> {
        let mut v = Tensor::zeros(IxDyn(&[dim]));
        v[IxDyn(&[axis])] = sign;
        v
    }

    fn filled_bank(entries: &[Tensor<f64>]) -> MemoryBank<f64> {
        let mut b = MemoryBank::new(entries.len(), entries[0].shape()[0]).unwrap();
        for e in entries {
            b.push(e).unwrap();
        }
        b
    }

    #[test]
    fn bank_is_fifo_ring() {
        let dim = 4;
        let mut b = MemoryBank::<f64>::new(3, dim).unwrap();
        assert!(!b.is_full());
        let e0 = unit_vec(dim, 0, 1.0);
        let e1 = unit_vec(dim, 1, 1.0);
        let e2 = unit_vec(dim, 2, 1.0);
        let e3 = unit_vec(dim, 3, 1.0);
        assert_eq!(b.push(&e0).unwrap(), 0);
        assert_eq!(b.push(&e1).unwrap(), 1);
        assert_eq!(b.push(&e2).unwrap(), 2);
        assert!(b.is_full());
        assert_eq!(b.get(1), e1);
        // capacity+1-th push evicts the first entry
        assert_eq!(b.push(&e3).unwrap(), 0);
        assert_eq!(b.get(0), e3);
        assert_eq!(b.get(1), e1);
        // non-unit and wrong-dim pushes rejected
        assert!(b.push(&Tensor::from_elem(IxDyn(&[dim]), 0.9)).is_err());
        assert!(b.push(&unit_vec(5, 0, 1.0)).is_err());
    }

    #[test]
    fn infonce_uniform_is_ln_k() {
        // all K similarities equal: 8 entries, every sim = 1
        let e = unit_vec(8, 0, 1.0);
        let negs = filled_bank(&vec![e.clone(); 8]).entries_excluding(0);
        let mut tape = Tape::new();
        let a = tape.leaf(e.clone());
        let p = tape.leaf(e.clone());
        let loss = infonce_loss(&mut tape, a, p, &negs, DEFAULT_TAU).unwrap();
        let v = tape.value(loss)[IxDyn(&[])];
        assert!((v - (8f64).ln()).abs() < 1e-12, "loss {v}");
    }

    #[test]
    fn infonce_separated_pair_is_tiny() {
        // a.p = 1, seven negatives at -1, tau = 0.07:
        // loss = ln(1 + 7 exp(-2/0.07)) < 1e-10
        let e = unit_vec(8, 0, 1.0);
        let mut mat = Tensor::zeros(IxDyn(&[7, 8]));
        for i in 0..7 {
            mat[IxDyn(&[i, 0])] = -1.0;
        }
        let mut tape = Tape::new();
        let a = tape.leaf(e.clone());
        let p = tape.leaf(e);
        let loss = infonce_loss(&mut tape, a, p, &mat, DEFAULT_TAU).unwrap();
        let v = tape.value(loss)[IxDyn(&[])];
        let oracle = (1.0 + 7.0 * (-2.0 / 0.07f64).exp()).ln();
        assert!(v < 1e-10, "loss {v}");
        assert!((v - oracle).abs() < 1e-14);
    }

    #[test]
    fn infonce_flat_softmax_limit() {
        // huge temperature flattens arbitrary sims to the uniform loss
        let mut rng = Stream::new(3, "cvtp-test", 0);
        let a_raw = rng.normal_tensor::<f64>(&[8]);
        let norm = a_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let a_t = a_raw.mapv(|v| v / norm);
        let mut negs = Tensor::zeros(IxDyn(&[7, 8]));
        for i in 0..7 {
            let r = rng.normal_tensor::<f64>(&[8]);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            for d in 0..8 {
                negs[IxDyn(&[i, d])] = r[IxDyn(&[d])] / n;
            }
        }
        let mut tape = Tape::new();
        let a = tape.leaf(a_t.clone());
        let p = tape.leaf(a_t);
        let loss = infonce_loss(&mut tape, a, p, &negs, 1e6).unwrap();
        let v = tape.value(loss)[IxDyn(&[])];
        assert!((v - (8f64).ln()).abs() < 1e-4, "loss {v}");
    }

    #[test]
    fn infonce_monotone_in_positive_similarity() {
        // raising a.p with negatives fixed strictly lowers the loss
        let negs = Tensor::zeros(IxDyn(&[7, 2]));
        let a_t = unit_vec(2, 0, 1.0);
        let mut last = f64::INFINITY;
        for k in 0..5 {
            let ang = 1.2 - 0.25 * k as f64;
            let p_t =
                Tensor::from_shape_vec(IxDyn(&[2]), vec![ang.cos(), ang.sin()]).unwrap();
            let mut tape = Tape::new();
            let a = tape.leaf(a_t.clone());
            let p = tape.leaf(p_t);
            let loss = infonce_loss(&mut tape, a, p, &negs, DEFAULT_TAU).unwrap();
            let v = tape.value(loss)[IxDyn(&[])];
            assert!(v < last, "not strictly decreasing: {v} vs {last}");
            last = v;
        }
    }

    #[test]
    fn infonce_rejects_bad_inputs() {
        let e = unit_vec(4, 0, 1.0);
        let negs = Tensor::zeros(IxDyn(&[3, 4]));
        let mut tape = Tape::new();
        let a = tape.leaf(e.clone());
        let p = tape.leaf(e.clone());
        assert!(infonce_loss(&mut tape, a, p, &negs, 0.0).is_err());
        assert!(infonce_loss(&mut tape, a, p, &negs, -1.0).is_err());
        let bad = tape.leaf(Tensor::from_elem(IxDyn(&[4]), f64::NAN));
        assert!(infonce_loss(&mut tape, bad, p, &negs, 0.07).is_err());
        let wrong = Tensor::zeros(IxDyn(&[3, 5]));
        assert!(infonce_loss(&mut tape, a, p, &wrong, 0.07).is_err());
    }

    fn dummy_banks(k: usize, dim: usize) -> (MemoryBank<f64>, MemoryBank<f64>) {
        let mut rng = Stream::new(7, "cvtp-banks", 0);
        let mut mk = || {
            let mut b = MemoryBank::new(k, dim).unwrap();
            while !b.is_full() {
                let r = rng.normal_tensor::<f64>(&[dim]);
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                b.push(&r.mapv(|v| v / n)).unwrap();
            }
            b
        };
        (mk(), mk())
    }

    #[test]
    fn cvtp_loss_is_symmetric_and_sums_directions() {
        let dim = 6;
        let (bank_v, bank_t) = dummy_banks(16, dim);
        let mut rng = Stream::new(9, "cvtp-sym", 0);
        let mut emb = |n: usize| {
            let mut m = Tensor::zeros(IxDyn(&[n, dim]));
            for i in 0..n {
                let r = rng.normal_tensor::<f64>(&[dim]);
                let nn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                for d in 0..dim {
                    m[IxDyn(&[i, d])] = r[IxDyn(&[d])] / nn;
                }
            }
            m
        };
        let ev = emb(3);
        let et = emb(3);
        let slots = [0, 1, 2];
        let mut tape = Tape::new();
        let v = tape.leaf(ev.clone());
        let t = tape.leaf(et.clone());
        let l = cvtp_loss(&mut tape, v, t, &bank_v, &bank_t, &slots, &slots, 0.07).unwrap();
        let l_val = tape.value(l)[IxDyn(&[])];
        // swap roles and banks: identical value
        let mut tape2 = Tape::new();
        let v2 = tape2.leaf(et);
        let t2 = tape2.leaf(ev);
        let l2 = cvtp_loss(&mut tape2, v2, t2, &bank_t, &bank_v, &slots, &slots, 0.07).unwrap();
        assert_eq!(l_val, tape2.value(l2)[IxDyn(&[])]);
    }

    #[test]
    fn cvtp_uniform_case_is_twice_ln_k() {
        let dim = 4;
        let k = 16;
        let e = unit_vec(dim, 0, 1.0);
        let mut bank = MemoryBank::new(k, dim).unwrap();
        for _ in 0..k {
            bank.push(&e).unwrap();
        }
        let emb = e.clone().into_shape(IxDyn(&[1, dim])).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(emb.clone());
        let t = tape.leaf(emb);
        let l = cvtp_loss(&mut tape, v, t, &bank.clone(), &bank, &[0], &[0], 0.07).unwrap();
        let got = tape.value(l)[IxDyn(&[])];
        assert!((got - 2.0 * (k as f64).ln()).abs() < 1e-12, "loss {got}");
    }

    #[test]
    fn cvtp_overfit_pair_is_tiny() {
        // positives at similarity 1, every bank entry orthogonal-or-opposed
        let dim = 4;
        let k = 16;
        let pos = unit_vec(dim, 0, 1.0);
        let far = unit_vec(dim, 0, -1.0); // sim -1 to anchor
        let mut bank = MemoryBank::new(k, dim).unwrap();
        bank.push(&pos).unwrap(); // slot 0 is "our" stale copy, excluded
        for _ in 1..k {
            bank.push(&far).unwrap();
        }
        let emb = pos.clone().into_shape(IxDyn(&[1, dim])).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(emb.clone());
        let t = tape.leaf(emb);
        let l = cvtp_loss(&mut tape, v, t, &bank.clone(), &bank, &[0], &[0], 0.07).unwrap();
        let got = tape.value(l)[IxDyn(&[])];
        assert!(got < 1e-6, "loss {got}");
    }

    fn tiny_encoder(seed: u64) -> ClipEncoder<f64> {
        ClipEncoder::new(
            EncoderConfig {
                window: 3,
                base_width: 4,
                stage_mults: vec![1, 2],
                embed_dim: 8,
                tau: DEFAULT_TAU,
                norm_groups: 2,
                in_stride: 1,
                head_spatial: 1,
                norm: NormKind::Group,
            },
            seed,
        )
        .unwrap()
    }

    fn frames(seed: u64, n: usize, size: usize) -> Vec<ImageFrame<f64>> {
        let mut rng = Stream::new(seed, "cvtp-frames", 0);
        (0..n)
            .map(|_| ImageFrame::new(rng.uniform_tensor(&[3, size, size], -1.0, 1.0)).unwrap())
            .collect()
    }

    #[test]
    fn encoder_outputs_unit_norm_and_is_deterministic() {
        let enc = tiny_encoder(1);
        let clip = VisualClip::new(frames(2, 3, 8)).unwrap();
        let e1 = encode_visual_clip(&enc, &clip).unwrap();
        let e2 = encode_visual_clip(&enc, &clip).unwrap();
        assert_eq!(e1, e2);
        let norm = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        // wrong clip length rejected
        let bad = VisualClip::new(frames(3, 5, 8)).unwrap();
        assert!(encode_visual_clip(&enc, &bad).is_err());
    }

    #[test]
    fn encoder_batch_is_permutation_equivariant() {
        let enc = tiny_encoder(2);
        let mut rng = Stream::new(4, "cvtp-perm", 0);
        let items: Vec<Tensor<f64>> = (0..4)
            .map(|_| rng.uniform_tensor(&[9, 8, 8], -1.0, 1.0))
            .collect();
        let batch = {
            let views: Vec<_> = items.iter().map(|t| t.view().insert_axis(ndarray::Axis(0))).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
        };
        let perm = [2usize, 0, 3, 1];
        let permuted = {
            let views: Vec<_> = perm.iter().map(|&i| items[i].view().insert_axis(ndarray::Axis(0))).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
        };
        let e = enc.embed(&batch).unwrap();
        let ep = enc.embed(&permuted).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            let a = ep.index_axis(ndarray::Axis(0), row);
            let b = e.index_axis(ndarray::Axis(0), src);
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cvtp_gradients_match_finite_differences() {
        // two-conv-scale encoder in double precision, five seeds
        for seed in 0..5u64 {
            let enc = ClipEncoder::<f64>::new(
                EncoderConfig {
                    window: 1,
                    base_width: 2,
                    stage_mults: vec![1],
                    embed_dim: 4,
                    tau: DEFAULT_TAU,
                    norm_groups: 1,
                    in_stride: 1,
                    head_spatial: 1,
                    norm: NormKind::Group,
                },
                seed,
            )
            .unwrap();
            let mut rng = Stream::new(seed, "cvtp-fd", 0);
            let x = rng.uniform_tensor::<f64>(&[1, 3, 4, 4], -1.0, 1.0);
            let (bank_v, bank_t) = dummy_banks(8, 4);

            let loss_at = |params: &ParamStore<f64>| -> f64 {
                let probe = ClipEncoder {
                    cfg: enc.cfg.clone(),
                    params: params.clone(),
                };
                let mut tape = Tape::new();
                let bound = Bound::new(&mut tape, &probe.params);
                let xv = tape.leaf(x.clone());
                let ev = probe.forward(&mut tape, &bound, xv).unwrap();
                // reuse the same embedding as both modalities: exercises the
                // full symmetric loss through one parameter set
                let l = cvtp_loss(&mut tape, ev, ev, &bank_v, &bank_t, &[0], &[0], 0.07).unwrap();
                tape.value(l)[IxDyn(&[])]
            };

            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, &enc.params);
            let xv = tape.leaf(x.clone());
            let ev = enc.forward(&mut tape, &bound, xv).unwrap();
            let l = cvtp_loss(&mut tape, ev, ev, &bank_v, &bank_t, &[0], &[0], 0.07).unwrap();
            let grads = tape.backward(l);
            let by_param = bound.grads(&grads);

            let h = 1e-6;
            let names: Vec<String> = enc.params.iter().map(|(n, _)| n.to_string()).collect();
            for (pi, name) in names.iter().enumerate() {
                let n_el = enc.params.get(name).len();
                for probe_idx in [0, n_el - 1] {
                    let mut plus = enc.params.clone();
                    let mut minus = enc.params.clone();
                    for (n, t) in plus.tensors_mut() {
                        if n == name {
                            t.as_slice_mut().unwrap()[probe_idx] += h;
                        }
                    }
                    for (n, t) in minus.tensors_mut() {
                        if n == name {
                            t.as_slice_mut().unwrap()[probe_idx] -= h;
                        }
                    }
                    let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    let an = by_param[pi]
                        .as_ref()
                        .map(|g| g.as_slice().unwrap()[probe_idx])
                        .unwrap_or(0.0);
                    let denom = an.abs().max(fd.abs()).max(1e-4);
                    assert!(
                        (an - fd).abs() / denom <= 1e-4,
                        "seed {seed} {name}[{probe_idx}]: analytic {an} vs fd {fd}"
                    );
                }
            }
        }
    }
}
