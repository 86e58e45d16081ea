//! Group and batch normalization with full backward.

use super::tape::{Tape, Var};
use crate::scalar::{Scalar, Tensor};
use ndarray::IxDyn;

impl<F: Scalar> Tape<F> {
    /// GroupNorm over [B,C,H,W] with affine params gamma/beta of shape [C].
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "group_norm: input rank");
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(c % groups == 0, "group_norm: C % groups != 0");
        let cg = c / groups;
        let n_group = cg * h * w;
        let eps = F::of(eps);

        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();

        let mut xhat = Tensor::zeros(IxDyn(&[bsz, c, h, w]));
        let mut inv_std = vec![F::zero(); bsz * groups];
        let mut y = Tensor::zeros(IxDyn(&[bsz, c, h, w]));
        for b in 0..bsz {
            for g in 0..groups {
                let mut mean = F::zero();
                for ch in g * cg..(g + 1) * cg {
                    for i in 0..h {
                        for j in 0..w {
                            mean = mean + xv[IxDyn(&[b, ch, i, j])];
                        }
                    }
                }
                mean = mean / F::of(n_group as f64);
                let mut var = F::zero();
                for ch in g * cg..(g + 1) * cg {
                    for i in 0..h {
                        for j in 0..w {
                            let d = xv[IxDyn(&[b, ch, i, j])] - mean;
                            var = var + d * d;
                        }
                    }
                }
                var = var / F::of(n_group as f64);
                let istd = F::one() / (var + eps).sqrt();
                inv_std[b * groups + g] = istd;
                for ch in g * cg..(g + 1) * cg {
                    let ga = gv[IxDyn(&[ch])];
                    let be = bv[IxDyn(&[ch])];
                    for i in 0..h {
                        for j in 0..w {
                            let xh = (xv[IxDyn(&[b, ch, i, j])] - mean) * istd;
                            xhat[IxDyn(&[b, ch, i, j])] = xh;
                            y[IxDyn(&[b, ch, i, j])] = ga * xh + be;
                        }
                    }
                }
            }
        }

        self.push(
            y,
            Some(Box::new(move |vals, g_out, sink| {
                let gv = vals[gamma.0].clone();
                let mut dgamma = Tensor::zeros(IxDyn(&[c]));
                let mut dbeta = Tensor::zeros(IxDyn(&[c]));
                let mut dx = Tensor::zeros(IxDyn(&[bsz, c, h, w]));
                for b in 0..bsz {
                    for g in 0..groups {
                        let istd = inv_std[b * groups + g];
                        // per-group reductions of dxhat and dxhat*xhat
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for ch in g * cg..(g + 1) * cg {
                            let ga = gv[IxDyn(&[ch])];
                            for i in 0..h {
                                for j in 0..w {
                                    let go = g_out[IxDyn(&[b, ch, i, j])];
                                    let xh = xhat[IxDyn(&[b, ch, i, j])];
                                    let dxh = go * ga;
                                    s1 = s1 + dxh;
                                    s2 = s2 + dxh * xh;
                                    dgamma[IxDyn(&[ch])] = dgamma[IxDyn(&[ch])] + go * xh;
                                    dbeta[IxDyn(&[ch])] = dbeta[IxDyn(&[ch])] + go;
                                }
                            }
                        }
                        let n = F::of(n_group as f64);
                        let m1 = s1 / n;
                        let m2 = s2 / n;
                        for ch in g * cg..(g + 1) * cg {
                            let ga = gv[IxDyn(&[ch])];
                            for i in 0..h {
                                for j in 0..w {
                                    let go = g_out[IxDyn(&[b, ch, i, j])];
                                    let xh = xhat[IxDyn(&[b, ch, i, j])];
                                    let dxh = go * ga;
                                    dx[IxDyn(&[b, ch, i, j])] = istd * (dxh - m1 - xh * m2);
                                }
                            }
                        }
                    }
                }
                sink.accumulate(x, dx);
                sink.accumulate(gamma, dgamma);
                sink.accumulate(beta, dbeta);
            })),
        )
    }

    /// Training-mode BatchNorm over [B,C,H,W]: each channel is normalized by
    /// its mean and (biased) variance across the batch and spatial axes, then
    /// scaled/shifted by gamma/beta of shape [C]. Also returns the per-channel
    /// batch mean and variance so callers can maintain running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Tensor<F>, Tensor<F>) {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "batch_norm: input rank");
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let n = bsz * h * w;
        let eps = F::of(eps);

        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();

        let mut mean_t = Tensor::zeros(IxDyn(&[c]));
        let mut var_t = Tensor::zeros(IxDyn(&[c]));
        let mut inv_std = vec![F::zero(); c];
        let mut xhat = Tensor::zeros(IxDyn(&[bsz, c, h, w]));
        let mut y = Tensor::zeros(IxDyn(&[bsz, c, h, w]));
        for ch in 0..c {
            let mut mean = F::zero();
            for b in 0..bsz {
                for i in 0..h {
                    for j in 0..w {
                        mean = mean + xv[IxDyn(&[b, ch, i, j])];
                    }
                }
            }
            mean = mean / F::of(n as f64);
            let mut var = F::zero();
            for b in 0..bsz {
                for i in 0..h {
                    for j in 0..w {
                        let d = xv[IxDyn(&[b, ch, i, j])] - mean;
                        var = var + d * d;
                    }
                }
            }
            var = var / F::of(n as f64);
            mean_t[IxDyn(&[ch])] = mean;
            var_t[IxDyn(&[ch])] = var;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[ch] = istd;
            let ga = gv[IxDyn(&[ch])];
            let be = bv[IxDyn(&[ch])];
            for b in 0..bsz {
                for i in 0..h {
                    for j in 0..w {
                        let xh = (xv[IxDyn(&[b, ch, i, j])] - mean) * istd;
                        xhat[IxDyn(&[b, ch, i, j])] = xh;
                        y[IxDyn(&[b, ch, i, j])] = ga * xh + be;
                    }
                }
            }
        }

        let out = self.push(
            y,
            Some(Box::new(move |vals, g_out, sink| {
                let gv = vals[gamma.0].clone();
                let mut dgamma = Tensor::zeros(IxDyn(&[c]));
                let mut dbeta = Tensor::zeros(IxDyn(&[c]));
                let mut dx = Tensor::zeros(IxDyn(&[bsz, c, h, w]));
                for ch in 0..c {
                    let istd = inv_std[ch];
                    let ga = gv[IxDyn(&[ch])];
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for b in 0..bsz {
                        for i in 0..h {
                            for j in 0..w {
                                let go = g_out[IxDyn(&[b, ch, i, j])];
                                let xh = xhat[IxDyn(&[b, ch, i, j])];
                                let dxh = go * ga;
                                s1 = s1 + dxh;
                                s2 = s2 + dxh * xh;
                                dgamma[IxDyn(&[ch])] = dgamma[IxDyn(&[ch])] + go * xh;
                                dbeta[IxDyn(&[ch])] = dbeta[IxDyn(&[ch])] + go;
                            }
                        }
                    }
                    let nn = F::of(n as f64);
                    let m1 = s1 / nn;
                    let m2 = s2 / nn;
                    for b in 0..bsz {
                        for i in 0..h {
                            for j in 0..w {
                                let go = g_out[IxDyn(&[b, ch, i, j])];
                                let xh = xhat[IxDyn(&[b, ch, i, j])];
                                let dxh = go * ga;
                                dx[IxDyn(&[b, ch, i, j])] = istd * (dxh - m1 - xh * m2);
                            }
                        }
                    }
                }
                sink.accumulate(x, dx);
                sink.accumulate(gamma, dgamma);
                sink.accumulate(beta, dbeta);
            })),
        );
        (out, mean_t, var_t)
    }

    /// Per-channel affine map y[b,c,i,j] = scale[c] * x[b,c,i,j] + shift[c];
    /// evaluation-mode normalization folds frozen statistics into this form.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "channel_affine: input rank");
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = self.value(x).clone();
        let sv = self.value(scale).clone();
        let tv = self.value(shift).clone();
        let mut y = Tensor::zeros(IxDyn(&[bsz, c, h, w]));
        for b in 0..bsz {
            for ch in 0..c {
                let s = sv[IxDyn(&[ch])];
                let t = tv[IxDyn(&[ch])];
                for i in 0..h {
                    for j in 0..w {
                        y[IxDyn(&[b, ch, i, j])] = s * xv[IxDyn(&[b, ch, i, j])] + t;
                    }
                }
            }
        }
        self.push(
            y,
            Some(Box::new(move |vals, g_out, sink| {
                let sv = vals[scale.0].clone();
                let xv = vals[x.0].clone();
                let mut dx = Tensor::zeros(IxDyn(&[bsz, c, h, w]));
                let mut ds = Tensor::zeros(IxDyn(&[c]));
                let mut dt = Tensor::zeros(IxDyn(&[c]));
                for b in 0..bsz {
                    for ch in 0..c {
                        let s = sv[IxDyn(&[ch])];
                        for i in 0..h {
                            for j in 0..w {
                                let go = g_out[IxDyn(&[b, ch, i, j])];
                                dx[IxDyn(&[b, ch, i, j])] = go * s;
                                ds[IxDyn(&[ch])] = ds[IxDyn(&[ch])] + go * xv[IxDyn(&[b, ch, i, j])];
                                dt[IxDyn(&[ch])] = dt[IxDyn(&[ch])] + go;
                            }
                        }
                    }
                }
                sink.accumulate(x, dx);
                sink.accumulate(scale, ds);
                sink.accumulate(shift, dt);
            })),
        )
    }
}
