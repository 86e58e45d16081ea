//! Reverse-mode autodiff over dynamic-rank tensors.
//!
//! A `Tape` records one forward computation; `backward` walks it in
//! reverse and accumulates gradients for every node. Single-threaded and
//! fully deterministic: identical inputs yield bit-identical gradients.

use crate::scalar::{Scalar, Tensor};
use ndarray::{Axis, IxDyn, Slice};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

pub struct GradSink<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> GradSink<F> {
    fn new(n: usize) -> Self {
        GradSink {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn accumulate(&mut self, v: Var, delta: Tensor<F>) {
        match &mut self.grads[v.0] {
            Some(g) => *g = &*g + &delta,
            slot => *slot = Some(delta),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }
}

type BackFn<F> = Box<dyn Fn(&[Tensor<F>], &Tensor<F>, &mut GradSink<F>)>;

pub struct Tape<F: Scalar> {
    values: Vec<Tensor<F>>,
    backs: Vec<Option<BackFn<F>>>,
}

/// Gradients of one backward pass, indexed by `Var`.
pub struct Gradients<F: Scalar> {
    sink: GradSink<F>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.sink.get(v)
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn push(&mut self, value: Tensor<F>, back: Option<BackFn<F>>) -> Var {
        self.values.push(value);
        self.backs.push(back);
        Var(self.values.len() - 1)
    }

    /// Leaf node: inputs, parameters, or constants. Gradients accumulate
    /// here but do not propagate further.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, None)
    }

    pub fn scalar_leaf(&mut self, x: F) -> Var {
        self.leaf(Tensor::from_elem(IxDyn(&[]), x))
    }

    /// Run reverse accumulation from `loss` (any shape; seeded with ones).
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let mut sink = GradSink::new(self.values.len());
        sink.accumulate(loss, Tensor::ones(self.values[loss.0].raw_dim()));
        for i in (0..=loss.0).rev() {
            if let Some(back) = &self.backs[i] {
                if let Some(g) = sink.get(Var(i)) {
                    let g = g.clone();
                    back(&self.values, &g, &mut sink);
                }
            }
        }
        Gradients { sink }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                sink.accumulate(a, g.clone());
                sink.accumulate(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                sink.accumulate(a, g.clone());
                sink.accumulate(b, -g.clone());
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.values[a.0] * &self.values[b.0];
        self.push(
            v,
            Some(Box::new(move |vals, g, sink| {
                sink.accumulate(a, g * &vals[b.0]);
                sink.accumulate(b, g * &vals[a.0]);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.values[a.0].mapv(|x| x * c);
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                sink.accumulate(a, g.mapv(|x| x * c));
            })),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x * sigmoid(x));
        self.push(
            v,
            Some(Box::new(move |vals, g, sink| {
                let dx = vals[a.0].mapv(|x| {
                    let s = sigmoid(x);
                    s * (F::one() + x * (F::one() - s))
                });
                sink.accumulate(a, g * &dx);
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.exp());
        let cached = v.clone();
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                sink.accumulate(a, g * &cached);
            })),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.ln());
        self.push(
            v,
            Some(Box::new(move |vals, g, sink| {
                sink.accumulate(a, g / &vals[a.0]);
            })),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.values[a.0].sum();
        let shape = self.values[a.0].raw_dim();
        self.push(
            Tensor::from_elem(IxDyn(&[]), s),
            Some(Box::new(move |_vals, g, sink| {
                let gv = g[IxDyn(&[])];
                sink.accumulate(a, Tensor::from_elem(shape.clone(), gv));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len();
        let s = self.sum_all(a);
        self.scale(s, F::of(1.0 / n as f64))
    }

    /// Dot product of two equally shaped tensors as a 0-d var.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_all(p)
    }

    // ---- shape manipulation ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old_shape: Vec<usize> = self.shape(a).to_vec();
        let v = self.values[a.0]
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape: incompatible shape");
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                let gr = g
                    .clone()
                    .into_shape(IxDyn(&old_shape))
                    .expect("reshape backward");
                sink.accumulate(a, gr);
            })),
        )
    }

    /// Swap the last two axes (tensor rank >= 2).
    pub fn transpose_last2(&mut self, a: Var) -> Var {
        let r = self.shape(a).len();
        assert!(r >= 2);
        let mut v = self.values[a.0].clone();
        v.swap_axes(r - 2, r - 1);
        let v = v.as_standard_layout().to_owned();
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                let mut gt = g.clone();
                gt.swap_axes(r - 2, r - 1);
                sink.accumulate(a, gt.as_standard_layout().to_owned());
            })),
        )
    }

    /// Reorder axes by `perm` (a permutation of 0..rank).
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let perm: Vec<usize> = perm.to_vec();
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let v = self.values[a.0]
            .clone()
            .permuted_axes(IxDyn(&perm))
            .as_standard_layout()
            .to_owned();
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                let gt = g
                    .clone()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                sink.accumulate(a, gt);
            })),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let full: Vec<usize> = self.shape(a).to_vec();
        let v = self.values[a.0]
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                let mut gx = Tensor::zeros(IxDyn(&full));
                gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                sink.accumulate(a, gx);
            })),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        let parts: Vec<Var> = parts.to_vec();
        let lens: Vec<usize> = parts.iter().map(|p| self.shape(*p)[axis]).collect();
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                let mut off = 0;
                for (p, len) in parts.iter().zip(&lens) {
                    let gp = g
                        .slice_axis(Axis(axis), Slice::from(off..off + len))
                        .to_owned();
                    sink.accumulate(*p, gp);
                    off += len;
                }
            })),
        )
    }

    // ---- linear algebra ----

    /// 2-d matrix product: [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.values[a.0]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul lhs rank");
        let bv = self.values[b.0]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul rhs rank");
        let v = av.dot(&bv).into_dyn();
        self.push(
            v,
            Some(Box::new(move |vals, g, sink| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let av = vals[a.0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let bv = vals[b.0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                sink.accumulate(a, g2.dot(&bv.t()).into_dyn());
                sink.accumulate(b, av.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// Batched matrix product: [B,m,k] x [B,k,n] -> [B,m,n].
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0], "bmm: batch mismatch");
        assert_eq!(sa[2], sb[1], "bmm: inner dim mismatch");
        let bsz = sa[0];
        let mut out = Tensor::zeros(IxDyn(&[bsz, sa[1], sb[2]]));
        for i in 0..bsz {
            let ai = self.values[a.0]
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            let bi = self.values[b.0]
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let mut ga = Tensor::zeros(IxDyn(&sa));
                let mut gb = Tensor::zeros(IxDyn(&sb));
                for i in 0..bsz {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned();
                    let ai = vals[a.0]
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned();
                    let bi = vals[b.0]
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned();
                    ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    gb.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                sink.accumulate(a, ga);
                sink.accumulate(b, gb);
            })),
        )
    }

    /// x [B,D] + bias [D] broadcast over rows.
    pub fn add_rowvec(&mut self, x: Var, bias: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        assert_eq!(self.shape(bias), &[d], "add_rowvec: bias shape");
        let bv = self.values[bias.0].clone().into_shape(IxDyn(&[d])).unwrap();
        let v = &self.values[x.0] + &bv.broadcast(IxDyn(&xs)).unwrap();
        let ndim = xs.len();
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                sink.accumulate(x, g.clone());
                let mut gb = g.clone();
                for _ in 0..ndim - 1 {
                    gb = gb.sum_axis(Axis(0));
                }
                sink.accumulate(bias, gb);
            })),
        )
    }

    /// Fully connected layer: x [B,Din] * w [Din,Dout] + b [Dout].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_rowvec(y, b)
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let shape: Vec<usize> = self.shape(a).to_vec();
        let last = shape.len() - 1;
        let x = &self.values[a.0];
        let mut y = x.clone();
        for mut row in y.lanes_mut(Axis(last)) {
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s: F = row.iter().cloned().sum();
            row.mapv_inplace(|v| v / s);
        }
        let cached = y.clone();
        self.push(
            y,
            Some(Box::new(move |_vals, g, sink| {
                let mut gx = g * &cached;
                for (mut gr, yr) in gx.lanes_mut(Axis(last)).into_iter().zip(cached.lanes(Axis(last))) {
                    let s: F = gr.iter().cloned().sum();
                    ndarray::Zip::from(&mut gr).and(&yr).for_each(|gv, yv| {
                        *gv = *gv - s * *yv;
                    });
                }
                sink.accumulate(a, gx);
            })),
        )
    }

    /// Row-wise L2 normalization of [B,D].
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        assert_eq!(x.ndim(), 2);
        let mut y = x.clone();
        let mut norms = Vec::with_capacity(x.shape()[0]);
        for mut row in y.rows_mut() {
            let n: F = row.iter().map(|v| *v * *v).sum::<F>().sqrt();
            norms.push(n);
            row.mapv_inplace(|v| v / n);
        }
        let cached = y.clone();
        self.push(
            y,
            Some(Box::new(move |_vals, g, sink| {
                let mut gx = g.clone();
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let y2 = cached.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                for (i, mut row) in gx
                    .view_mut()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .rows_mut()
                    .into_iter()
                    .enumerate()
                {
                    let gi = g2.row(i);
                    let yi = y2.row(i);
                    let dotp: F = gi.iter().zip(yi.iter()).map(|(a, b)| *a * *b).sum();
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = (gi[j] - yi[j] * dotp) / norms[i];
                    }
                }
                sink.accumulate(a, gx);
            })),
        )
    }
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}
