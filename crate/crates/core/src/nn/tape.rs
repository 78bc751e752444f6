//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; `backward` walks
//! the tape in reverse and accumulates gradients for the nodes that need them.
//! Shapes are checked by the module-level APIs before ops are recorded, so the
//! ops themselves treat mismatches as programming errors.

use std::collections::HashMap;

use super::kernels::{self, Interp, NormStats};
use super::params::{ParamId, ParamStore};
use super::spectral::{self, Band};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Down-sampling used to bring a full-resolution map onto a feature grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    /// `factor × factor` max pooling with stride `factor`.
    MaxPool,
    Nearest,
    Bilinear,
}

/// Threshold source for [`Tape::filtration`].
#[derive(Clone, Copy, Debug)]
pub enum Threshold<T> {
    Learnable(Var),
    Fixed(T),
}

/// Per-anchor classification target for [`Tape::focal_loss`].
pub const TARGET_IGNORE: i32 = -2;
pub const TARGET_BACKGROUND: i32 = -1;

#[derive(Clone, Copy, Debug)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: NormStats<T>,
    },
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        idx: Vec<u32>,
    },
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        idx: Vec<u32>,
    },
    Upsample2x(Var),
    Interp {
        x: Var,
        mode: Interp,
    },
    Concat(Vec<Var>),
    PixelDiff(Var, Var),
    Filter {
        x: Var,
        cutoff: f64,
        band: Band,
    },
    Filtration {
        d: Var,
        t: Option<Var>,
        soft: Tensor<T>,
        tau: T,
        resize: Resize,
        factor: usize,
        argmax: Vec<u32>,
    },
    Mse(Var, Var),
    Sum(Var),
    FocalLoss {
        logits: Var,
        targets: Vec<i32>,
        params: FocalParams,
        norm: T,
    },
    MaskedL1 {
        pred: Var,
        target: Vec<T>,
        mask: Vec<bool>,
        norm: T,
    },
    FlattenLevels {
        inputs: Vec<Var>,
        per_anchor: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to leaves and bound parameters.
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// `(parameter, gradient)` pairs for every bound parameter that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, v)| self.get(v).map(|g| (p, g)))
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast rank mismatch {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Flat index into a (possibly broadcast) operand for each output element.
fn broadcast_index(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let out_strides = strides(out_shape);
    let in_strides = strides(in_shape);
    let len: usize = out_shape.iter().product();
    (0..len)
        .map(|o| {
            let mut rem = o;
            let mut j = 0;
            for d in 0..out_shape.len() {
                let coord = rem / out_strides[d];
                rem %= out_strides[d];
                if in_shape[d] != 1 {
                    j += coord * in_strides[d];
                }
            }
            j
        })
        .collect()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Bind a stored parameter as a leaf; repeated calls return the same var.
    /// Non-trainable entries are bound as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let v = self.push(entry.value.clone(), Op::Leaf, entry.trainable);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let out = kernels::conv_transpose2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::ConvT2d { x, w, b, stride, pad }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Elementwise product with size-1 broadcasting on any axis.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape());
        let out = if va.shape() == vb.shape() {
            va.zip_map(vb, |x, y| x * y)
        } else {
            let ia = broadcast_index(&shape, va.shape());
            let ib = broadcast_index(&shape, vb.shape());
            Tensor::from_fn(&shape, |o| va.data()[ia[o]] * vb.data()[ib[o]])
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::lit(sigmoid(v.as_f64())));
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (out, stats) =
            kernels::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            ng,
        )
    }

    /// Batch normalization with batch statistics. Returns the output along
    /// with the batch mean and biased variance for running-average updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, Vec<T>, Vec<T>) {
        let (mean, var) = kernels::channel_moments(self.value(x));
        let eps = T::lit(kernels::NORM_EPS);
        let stats = NormStats {
            mean: mean.clone(),
            rstd: var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
        };
        let out = kernels::channel_norm_forward(self.value(x), self.value(gamma), self.value(beta), &stats);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            out,
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                stats,
                batch_stats: true,
            },
            ng,
        );
        (v, mean, var)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Var {
        let eps = T::lit(kernels::NORM_EPS);
        let stats = NormStats {
            mean: mean.to_vec(),
            rstd: var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
        };
        let out = kernels::channel_norm_forward(self.value(x), self.value(gamma), self.value(beta), &stats);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                stats,
                batch_stats: false,
            },
            ng,
        )
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize) -> Var {
        let (out, idx) = kernels::maxpool_forward(self.value(x), k, stride);
        let ng = self.ng(x);
        self.push(out, Op::MaxPool { x, idx }, ng)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = kernels::global_avg_forward(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::GlobalAvgPool(x), ng)
    }

    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let (out, idx) = kernels::global_max_forward(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::GlobalMaxPool { x, idx }, ng)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let out = kernels::upsample2x_forward(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::Upsample2x(x), ng)
    }

    /// Resample every plane to `oh × ow`.
    pub fn interp(&mut self, x: Var, oh: usize, ow: usize, mode: Interp) -> Var {
        let out = kernels::interp_forward(self.value(x), oh, ow, mode);
        let ng = self.ng(x);
        self.push(out, Op::Interp { x, mode }, ng)
    }

    /// Shrink every plane by an integer `factor` with the given method.
    pub fn resize_down(&mut self, x: Var, factor: usize, method: Resize) -> Var {
        let (_, _, h, w) = self.value(x).dims4();
        match method {
            Resize::MaxPool => self.max_pool(x, factor, factor),
            Resize::Nearest => self.interp(x, h / factor, w / factor, Interp::Nearest),
            Resize::Bilinear => self.interp(x, h / factor, w / factor, Interp::Bilinear),
        }
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let total_c: usize = xs.iter().map(|&v| self.value(v).dims4().1).sum();
        let mut data = Vec::with_capacity(n * total_c * h * w);
        for i in 0..n {
            for &v in xs {
                let t = self.value(v);
                assert_eq!((t.dims4().2, t.dims4().3), (h, w), "concat spatial mismatch");
                data.extend_from_slice(t.item(i));
            }
        }
        let out = Tensor::from_vec(&[n, total_c, h, w], data).expect("concat shape");
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(out, Op::Concat(xs.to_vec()), ng)
    }

    /// Channel mean of `|a − b|`: N×C×H×W → N×1×H×W.
    pub fn pixel_diff(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "pixel_diff shape mismatch");
        let (n, c, h, w) = va.dims4();
        let plane = h * w;
        let cf = T::lit(c as f64);
        let mut out = Tensor::zeros(&[n, 1, h, w]);
        for i in 0..n {
            let (xa, xb) = (va.item(i), vb.item(i));
            let dst = &mut out.data_mut()[i * plane..(i + 1) * plane];
            for ch in 0..c {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d += (xa[ch * plane + j] - xb[ch * plane + j]).abs();
                }
            }
            for d in dst.iter_mut() {
                *d = *d / cf;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::PixelDiff(a, b), ng)
    }

    /// Ideal radial frequency filter on every plane.
    pub fn frequency_filter(&mut self, x: Var, cutoff: f64, band: Band) -> Var {
        let mut out = self.value(x).clone();
        let (_, _, h, w) = out.dims4();
        spectral::filter_planes(out.data_mut(), h, w, cutoff, band);
        let ng = self.ng(x);
        self.push(out, Op::Filter { x, cutoff, band }, ng)
    }

    /// Thresholded difference map resized onto a feature grid, plus `offset`.
    ///
    /// With `hard = true` the forward value uses the binary map `[d > t]`;
    /// with `hard = false` it uses the logistic surrogate
    /// `sigmoid((d − t) / tau)`. The backward pass is always the exact
    /// gradient of the surrogate path.
    #[allow(clippy::too_many_arguments)]
    pub fn filtration(
        &mut self,
        d: Var,
        threshold: Threshold<T>,
        tau: T,
        factor: usize,
        resize: Resize,
        offset: T,
        hard: bool,
    ) -> Var {
        let (t_var, t) = match threshold {
            Threshold::Learnable(v) => (Some(v), self.scalar(v)),
            Threshold::Fixed(t) => (None, t),
        };
        let vd = self.value(d);
        let (n, c, h, w) = vd.dims4();
        let (oh, ow) = (h / factor, w / factor);
        let soft = vd.map(|x| T::lit(sigmoid(((x - t) / tau).as_f64())));
        let hard_map = vd.map(|x| if x > t { T::one() } else { T::zero() });
        let (resized, argmax) = match resize {
            Resize::MaxPool => {
                // Route through the argmax of the surrogate; on the hard map
                // this selects a pixel above threshold whenever one exists.
                let (soft_pooled, idx) = kernels::maxpool_forward(&soft, factor, factor);
                let out = if hard {
                    let mut out = Tensor::zeros(&[n, c, oh, ow]);
                    for (o, &j) in idx.iter().enumerate() {
                        let p = o / (oh * ow);
                        out.data_mut()[o] = hard_map.data()[p * h * w + j as usize];
                    }
                    out
                } else {
                    soft_pooled
                };
                (out, idx)
            }
            Resize::Nearest | Resize::Bilinear => {
                let mode = if resize == Resize::Nearest {
                    Interp::Nearest
                } else {
                    Interp::Bilinear
                };
                let src = if hard { &hard_map } else { &soft };
                (kernels::interp_forward(src, oh, ow, mode), Vec::new())
            }
        };
        let out = resized.map(|v| v + offset);
        let ng = self.ng(d) || t_var.is_some_and(|v| self.ng(v));
        self.push(
            out,
            Op::Filtration {
                d,
                t: t_var,
                soft,
                tau,
                resize,
                factor,
                argmax,
            },
            ng,
        )
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse shape mismatch");
        let s: T = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(s / T::lit(va.len() as f64));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mse(a, b), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    /// Sigmoid focal loss over `N × A × K` logits, summed over non-ignored
    /// anchors and divided by `norm`.
    pub fn focal_loss(&mut self, logits: Var, targets: Vec<i32>, params: FocalParams, norm: T) -> Var {
        let vl = self.value(logits);
        let k = *vl.shape().last().expect("rank ≥ 1");
        assert_eq!(targets.len() * k, vl.len(), "focal target count mismatch");
        let (alpha, gamma) = (params.alpha, params.gamma);
        let mut total = 0.0;
        for (a, &tgt) in targets.iter().enumerate() {
            if tgt == TARGET_IGNORE {
                continue;
            }
            for cls in 0..k {
                let x = vl.data()[a * k + cls].as_f64();
                let p = sigmoid(x);
                total += if tgt == cls as i32 {
                    alpha * (1.0 - p).powf(gamma) * softplus(-x)
                } else {
                    (1.0 - alpha) * p.powf(gamma) * softplus(x)
                };
            }
        }
        let out = Tensor::scalar(T::lit(total) / norm);
        let ng = self.ng(logits);
        self.push(
            out,
            Op::FocalLoss {
                logits,
                targets,
                params,
                norm,
            },
            ng,
        )
    }

    /// Sum of `|pred − target|` over masked rows of an `N × A × D` tensor,
    /// divided by `norm`.
    pub fn masked_l1(&mut self, pred: Var, target: Vec<T>, mask: Vec<bool>, norm: T) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.len(), target.len(), "l1 target length mismatch");
        let d = *vp.shape().last().expect("rank ≥ 1");
        assert_eq!(mask.len() * d, vp.len(), "l1 mask length mismatch");
        let mut s = T::zero();
        for (a, &m) in mask.iter().enumerate() {
            if m {
                for j in a * d..(a + 1) * d {
                    s += (vp.data()[j] - target[j]).abs();
                }
            }
        }
        let out = Tensor::scalar(s / norm);
        let ng = self.ng(pred);
        self.push(
            out,
            Op::MaskedL1 {
                pred,
                target,
                mask,
                norm,
            },
            ng,
        )
    }

    /// Gather per-location predictions from pyramid levels.
    ///
    /// Each input is `N × (A·D) × h × w`; the output is `N × Σ(h·w·A) × D`
    /// ordered by level, then row, column and anchor.
    pub fn flatten_levels(&mut self, inputs: &[Var], per_anchor: usize) -> Var {
        let n = self.value(inputs[0]).dims4().0;
        let total: usize = inputs
            .iter()
            .map(|&v| {
                let (_, c, h, w) = self.value(v).dims4();
                h * w * (c / per_anchor)
            })
            .sum();
        let mut out = Tensor::zeros(&[n, total, per_anchor]);
        for i in 0..n {
            let mut a0 = 0;
            for &v in inputs {
                let t = self.value(v);
                let (_, c, h, w) = t.dims4();
                let na = c / per_anchor;
                let src = t.item(i);
                for ch in 0..c {
                    let (a, dd) = (ch / per_anchor, ch % per_anchor);
                    for p in 0..h * w {
                        let row = i * total + a0 + p * na + a;
                        out.data_mut()[row * per_anchor + dd] = src[ch * h * w + p];
                    }
                }
                a0 += h * w * na;
            }
        }
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(
            out,
            Op::FlattenLevels {
                inputs: inputs.to_vec(),
                per_anchor,
            },
            ng,
        )
    }

    /// Gradients of the scalar `loss` with respect to every leaf that needs one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut leaves = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(i, g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients {
            leaves,
            params: self.params.iter().map(|(&p, &v)| (p, v)).collect(),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Conv2d { x, w, b, stride, pad } => {
                let cg = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.ng(*x),
                );
                if let Some(dx) = cg.dx {
                    acc(*x, dx);
                }
                acc(*w, cg.dw);
                if let Some(b) = b {
                    acc(*b, cg.db);
                }
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let cg = kernels::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.ng(*x),
                );
                if let Some(dx) = cg.dx {
                    acc(*x, dx);
                }
                acc(*w, cg.dw);
                if let Some(b) = b {
                    acc(*b, cg.db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Scale(a, s) => {
                let s = *s;
                acc(*a, g.map(|v| v * s));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let shape = g.shape().to_vec();
                if va.shape() == vb.shape() {
                    acc(*a, g.zip_map(vb, |x, y| x * y));
                    acc(*b, g.zip_map(va, |x, y| x * y));
                } else {
                    let ia = broadcast_index(&shape, va.shape());
                    let ib = broadcast_index(&shape, vb.shape());
                    let mut ga = Tensor::zeros(va.shape());
                    let mut gb = Tensor::zeros(vb.shape());
                    for (o, &gv) in g.data().iter().enumerate() {
                        ga.data_mut()[ia[o]] += gv * vb.data()[ib[o]];
                        gb.data_mut()[ib[o]] += gv * va.data()[ia[o]];
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                acc(*x, g.zip_map(vx, |gv, xv| if xv > T::zero() { gv } else { T::zero() }));
            }
            Op::Sigmoid(x) => {
                acc(*x, g.zip_map(&node.value, |gv, s| gv * s * (T::one() - s)));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (dx, dg, db) =
                    kernels::group_norm_backward(self.value(*x), self.value(*gamma), g, *groups, stats);
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                stats,
                batch_stats,
            } => {
                let (dx, dg, db) = kernels::channel_norm_backward(
                    self.value(*x),
                    self.value(*gamma),
                    g,
                    stats,
                    *batch_stats,
                );
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::MaxPool { x, idx } => {
                let vx = self.value(*x);
                let (_, _, h, w) = vx.dims4();
                let (_, _, oh, ow) = g.dims4();
                let mut dx = Tensor::zeros(vx.shape());
                kernels::scatter_argmax(g.data(), idx, oh * ow, h * w, dx.data_mut());
                acc(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let vx = self.value(*x);
                let (_, _, h, w) = vx.dims4();
                let plane = h * w;
                let inv = T::one() / T::lit(plane as f64);
                acc(*x, Tensor::from_fn(vx.shape(), |j| g.data()[j / plane] * inv));
            }
            Op::GlobalMaxPool { x, idx } => {
                let vx = self.value(*x);
                let (_, _, h, w) = vx.dims4();
                let mut dx = Tensor::zeros(vx.shape());
                kernels::scatter_argmax(g.data(), idx, 1, h * w, dx.data_mut());
                acc(*x, dx);
            }
            Op::Upsample2x(x) => acc(*x, kernels::upsample2x_backward(g)),
            Op::Interp { x, mode } => {
                let (_, _, h, w) = self.value(*x).dims4();
                acc(*x, kernels::interp_backward(g, h, w, *mode));
            }
            Op::Concat(xs) => {
                let (n, total_c, h, w) = g.dims4();
                let plane = h * w;
                let mut c0 = 0;
                for &v in xs {
                    let c = self.value(v).dims4().1;
                    let mut dv = Tensor::zeros(&[n, c, h, w]);
                    for i in 0..n {
                        let src = &g.data()[(i * total_c + c0) * plane..(i * total_c + c0 + c) * plane];
                        dv.data_mut()[i * c * plane..(i + 1) * c * plane].copy_from_slice(src);
                    }
                    acc(v, dv);
                    c0 += c;
                }
            }
            Op::PixelDiff(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, c, h, w) = va.dims4();
                let plane = h * w;
                let inv = T::one() / T::lit(c as f64);
                let mut ga = Tensor::zeros(va.shape());
                for i in 0..n {
                    for ch in 0..c {
                        for j in 0..plane {
                            let k = (i * c + ch) * plane + j;
                            let diff = va.data()[k] - vb.data()[k];
                            let s = if diff > T::zero() {
                                T::one()
                            } else if diff < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            ga.data_mut()[k] = g.data()[i * plane + j] * inv * s;
                        }
                    }
                }
                let gb = ga.map(|v| -v);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Filter { x, cutoff, band } => {
                let mut dx = g.clone();
                let (_, _, h, w) = dx.dims4();
                spectral::filter_planes(dx.data_mut(), h, w, *cutoff, *band);
                acc(*x, dx);
            }
            Op::Filtration {
                d,
                t,
                soft,
                tau,
                resize,
                factor,
                argmax,
            } => {
                let (_, _, h, w) = soft.dims4();
                let (_, _, oh, ow) = g.dims4();
                let gs = match resize {
                    Resize::MaxPool => {
                        let mut gs = Tensor::zeros(soft.shape());
                        kernels::scatter_argmax(g.data(), argmax, oh * ow, h * w, gs.data_mut());
                        gs
                    }
                    Resize::Nearest => kernels::interp_backward(g, h, w, Interp::Nearest),
                    Resize::Bilinear => kernels::interp_backward(g, h, w, Interp::Bilinear),
                };
                debug_assert_eq!(oh * factor, h);
                let tau = *tau;
                let gd = gs.zip_map(soft, |gv, s| gv * s * (T::one() - s) / tau);
                if let Some(t) = t {
                    acc(*t, Tensor::scalar(-gd.sum()));
                }
                acc(*d, gd);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = g.data()[0] * T::lit(2.0) / T::lit(va.len() as f64);
                let ga = va.zip_map(vb, |x, y| (x - y) * k);
                let gb = ga.map(|v| -v);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::FocalLoss {
                logits,
                targets,
                params,
                norm,
            } => {
                let vl = self.value(*logits);
                let k = *vl.shape().last().expect("rank ≥ 1");
                let scale = g.data()[0].as_f64() / norm.as_f64();
                let (alpha, gamma) = (params.alpha, params.gamma);
                let mut dl = Tensor::zeros(vl.shape());
                for (a, &tgt) in targets.iter().enumerate() {
                    if tgt == TARGET_IGNORE {
                        continue;
                    }
                    for cls in 0..k {
                        let x = vl.data()[a * k + cls].as_f64();
                        let p = sigmoid(x);
                        let d = if tgt == cls as i32 {
                            // d/dx of α(1−p)^γ·(−log p)
                            alpha * (1.0 - p).powf(gamma) * (gamma * p * (-softplus(-x)) - (1.0 - p))
                        } else {
                            // d/dx of (1−α)p^γ·(−log(1−p))
                            (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * (-softplus(x)))
                        };
                        dl.data_mut()[a * k + cls] = T::lit(d * scale);
                    }
                }
                acc(*logits, dl);
            }
            Op::MaskedL1 {
                pred,
                target,
                mask,
                norm,
            } => {
                let vp = self.value(*pred);
                let d = *vp.shape().last().expect("rank ≥ 1");
                let scale = g.data()[0] / *norm;
                let mut dp = Tensor::zeros(vp.shape());
                for (a, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for j in a * d..(a + 1) * d {
                        let diff = vp.data()[j] - target[j];
                        dp.data_mut()[j] = if diff > T::zero() {
                            scale
                        } else if diff < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        };
                    }
                }
                acc(*pred, dp);
            }
            Op::FlattenLevels { inputs, per_anchor } => {
                let (n, total, _) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                let mut a0 = 0;
                for &v in inputs {
                    let vt = self.value(v);
                    let (_, c, h, w) = vt.dims4();
                    let na = c / per_anchor;
                    let mut dv = Tensor::zeros(vt.shape());
                    for i in 0..n {
                        for ch in 0..c {
                            let (a, dd) = (ch / per_anchor, ch % per_anchor);
                            for p in 0..h * w {
                                let row = i * total + a0 + p * na + a;
                                dv.data_mut()[(i * c + ch) * h * w + p] = g.data()[row * per_anchor + dd];
                            }
                        }
                    }
                    acc(v, dv);
                    a0 += h * w * na;
                }
            }
        }
    }
}
