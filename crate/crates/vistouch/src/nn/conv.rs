//! Spatial ops: conv2d (im2col), nearest upsampling, pooling, and
//! per-channel broadcasts. All operate on [B, C, H, W] tensors.

use super::tape::{Tape, Var};
use crate::scalar::{Scalar, Tensor};
use ndarray::{Array2, Axis, IxDyn};

/// Unfold one sample [Cin,H,W] into [Cin*kh*kw, Ho*Wo].
fn unfold<F: Scalar>(
    x: &ndarray::ArrayView3<'_, F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (cin, h, w) = x.dim();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<F>::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[(row, oi * wo + oj)] = x[(c, ii as usize, jj as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of unfolded gradient columns back to [Cin,H,W].
fn fold_add<F: Scalar>(
    gcols: &Array2<F>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<F> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut gx = ndarray::Array3::<F>::zeros((cin, h, w));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        gx[(c, ii as usize, jj as usize)] =
                            gx[(c, ii as usize, jj as usize)] + gcols[(row, oi * wo + oj)];
                    }
                }
            }
        }
    }
    gx
}

impl<F: Scalar> Tape<F> {
    /// 2-d convolution: x [B,Cin,H,W], w [Cout,Cin,kh,kw], b [Cout].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input rank");
        assert_eq!(ws.len(), 4, "conv2d: weight rank");
        assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
        let (bsz, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;

        let wmat = self.value(w)
            .clone()
            .into_shape(IxDyn(&[cout, cin * kh * kw]))
            .unwrap()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let bias = self.value(b).clone();

        let mut out = Tensor::zeros(IxDyn(&[bsz, cout, ho, wo]));
        let mut cols_cache: Vec<Array2<F>> = Vec::with_capacity(bsz);
        for i in 0..bsz {
            let xi = self.value(x)
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            let cols = unfold(&xi, kh, kw, stride, pad);
            let mut y = wmat.dot(&cols); // [Cout, Ho*Wo]
            for (c, mut row) in y.rows_mut().into_iter().enumerate() {
                let bc = bias[IxDyn(&[c])];
                row.mapv_inplace(|v| v + bc);
            }
            out.index_axis_mut(Axis(0), i)
                .assign(&y.into_shape((cout, ho, wo)).unwrap());
            cols_cache.push(cols);
        }

        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let wmat = vals[w.0]
                    .clone()
                    .into_shape(IxDyn(&[cout, cin * kh * kw]))
                    .unwrap()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let mut gw = Array2::<F>::zeros((cout, cin * kh * kw));
                let mut gb = Tensor::zeros(IxDyn(&[cout]));
                let mut gx = Tensor::zeros(IxDyn(&[bsz, cin, h, wdt]));
                for i in 0..bsz {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .to_owned()
                        .into_shape((cout, ho * wo))
                        .unwrap();
                    gw = gw + gi.dot(&cols_cache[i].t());
                    for c in 0..cout {
                        gb[IxDyn(&[c])] = gb[IxDyn(&[c])] + gi.row(c).sum();
                    }
                    let gcols = wmat.t().dot(&gi);
                    let gxi = fold_add(&gcols, cin, h, wdt, kh, kw, stride, pad);
                    gx.index_axis_mut(Axis(0), i).assign(&gxi);
                }
                sink.accumulate(w, gw.into_shape(IxDyn(&[cout, cin, kh, kw])).unwrap().into_dyn());
                sink.accumulate(b, gb);
                sink.accumulate(x, gx);
            })),
        )
    }

    /// Nearest-neighbor 2x upsampling of [B,C,H,W].
    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = Tensor::zeros(IxDyn(&[bsz, c, 2 * h, 2 * w]));
        {
            let xv = self.value(x);
            for b in 0..bsz {
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let v = xv[IxDyn(&[b, ch, i, j])];
                            for di in 0..2 {
                                for dj in 0..2 {
                                    out[IxDyn(&[b, ch, 2 * i + di, 2 * j + dj])] = v;
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |_vals, g, sink| {
                let mut gx = Tensor::zeros(IxDyn(&[bsz, c, h, w]));
                for b in 0..bsz {
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                let mut s = F::zero();
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        s = s + g[IxDyn(&[b, ch, 2 * i + di, 2 * j + dj])];
                                    }
                                }
                                gx[IxDyn(&[b, ch, i, j])] = s;
                            }
                        }
                    }
                }
                sink.accumulate(x, gx);
            })),
        )
    }

    /// Spatial mean of [B,C,H,W] -> [B,C].
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let inv = F::of(1.0 / (h * w) as f64);
        let v = self.value(x)
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .mapv(|s| s * inv)
            .into_dyn();
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                let mut gx = Tensor::zeros(IxDyn(&[bsz, c, h, w]));
                for b in 0..bsz {
                    for ch in 0..c {
                        let gv = g[IxDyn(&[b, ch])] * inv;
                        for i in 0..h {
                            for j in 0..w {
                                gx[IxDyn(&[b, ch, i, j])] = gv;
                            }
                        }
                    }
                }
                sink.accumulate(x, gx);
            })),
        )
    }

    /// x [B,C,H,W] + v [B,C] broadcast over spatial positions.
    pub fn add_channel_bias(&mut self, x: Var, v: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(self.shape(v), &[xs[0], xs[1]], "add_channel_bias shape");
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = self.value(x).clone();
        {
            let vv = self.value(v);
            for b in 0..bsz {
                for ch in 0..c {
                    let add = vv[IxDyn(&[b, ch])];
                    for i in 0..h {
                        for j in 0..w {
                            out[IxDyn(&[b, ch, i, j])] = out[IxDyn(&[b, ch, i, j])] + add;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |_vals, g, sink| {
                sink.accumulate(x, g.clone());
                let gv = g.sum_axis(Axis(3)).sum_axis(Axis(2));
                sink.accumulate(v, gv.into_dyn());
            })),
        )
    }
}
