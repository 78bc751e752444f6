//! Forward and backward kernels on raw NCHW buffers.
//!
//! Convolutions lower to im2col + gemm per batch item. Batch items are
//! processed through [`crate::par`], and per-item weight gradients are summed
//! in index order, so results do not depend on scheduling.

use crate::par;
use crate::tensor::{Real, Tensor};

/// Spatial geometry of a convolution, seen from the larger ("image") side.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            channels,
            h,
            w,
            kh: k,
            kw: k,
            stride,
            pad,
            oh,
            ow,
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `lo..hi` whose kernel tap `kx` lands inside the input.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.w + self.pad > kx {
            ((self.w - 1 + self.pad - kx) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncol = g.cols();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (o, &v) in out[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of `cols` back onto the image; `x` must be zeroed by the caller
/// or hold values to accumulate into.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let ncol = g.cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = g.valid_cols(kx);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * g.stride + kx - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[ix0..].iter_mut().step_by(g.stride).zip(s) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

fn bias_grad<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dy.dims4();
    let plane = h * w;
    let mut db = vec![T::zero(); c];
    for i in 0..n {
        let item = dy.item(i);
        for (ch, acc) in db.iter_mut().enumerate() {
            *acc += item[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(&[c], db).expect("bias shape")
}

fn sum_ordered<T: Real>(parts: Vec<Vec<T>>, shape: &[usize]) -> Tensor<T> {
    let mut iter = parts.into_iter();
    let mut acc = iter.next().expect("at least one batch item");
    for p in iter {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    Tensor::from_vec(shape, acc).expect("weight grad shape")
}

/// `x`: N×Cin×H×W, `w`: Cout×Cin×k×k.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, k, _) = w.dims4();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let g = ConvGeom::new(cin, h, wd, k, stride, pad);
    let mut out = Tensor::zeros(&[n, cout, g.oh, g.ow]);
    let plane = g.cols();
    par::for_each_chunk(out.data_mut(), cout * plane, |i, y| {
        let xi = x.item(i);
        let mut buf;
        let cols: &[T] = if g.is_pointwise() {
            xi
        } else {
            buf = vec![T::zero(); g.rows() * plane];
            im2col(xi, &g, &mut buf);
            &buf
        };
        T::gemm(
            cout,
            g.rows(),
            plane,
            T::one(),
            w.data(),
            g.rows() as isize,
            1,
            cols,
            plane as isize,
            1,
            T::zero(),
            y,
            plane as isize,
            1,
        );
        if let Some(b) = b {
            add_bias(y, b.data(), plane);
        }
    });
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> ConvGrads<T> {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = w.dims4();
    let g = ConvGeom::new(cin, h, wd, k, stride, pad);
    let plane = g.cols();
    let rows = g.rows();
    let parts = par::map_range(n, |i| {
        let xi = x.item(i);
        let dyi = dy.item(i);
        let mut buf;
        let cols: &[T] = if g.is_pointwise() {
            xi
        } else {
            buf = vec![T::zero(); rows * plane];
            im2col(xi, &g, &mut buf);
            &buf
        };
        // dW = dY · colsᵀ
        let mut dw = vec![T::zero(); cout * rows];
        T::gemm(
            cout,
            plane,
            rows,
            T::one(),
            dyi,
            plane as isize,
            1,
            cols,
            1,
            plane as isize,
            T::zero(),
            &mut dw,
            rows as isize,
            1,
        );
        let dx = need_dx.then(|| {
            let mut dcols = vec![T::zero(); rows * plane];
            T::gemm(
                rows,
                cout,
                plane,
                T::one(),
                w.data(),
                1,
                rows as isize,
                dyi,
                plane as isize,
                1,
                T::zero(),
                &mut dcols,
                plane as isize,
                1,
            );
            if g.is_pointwise() {
                dcols
            } else {
                let mut dx = vec![T::zero(); cin * h * wd];
                col2im(&dcols, &g, &mut dx);
                dx
            }
        });
        (dx, dw)
    });
    let mut dws = Vec::with_capacity(n);
    let mut dxs = Vec::with_capacity(n);
    for (dx, dw) in parts {
        dws.push(dw);
        if let Some(dx) = dx {
            dxs.extend(dx);
        }
    }
    ConvGrads {
        dx: need_dx.then(|| Tensor::from_vec(x.shape(), dxs).expect("dx shape")),
        dw: sum_ordered(dws, w.shape()),
        db: bias_grad(dy),
    }
}

/// Output spatial size of a transpose convolution.
pub fn conv_transpose_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size - 1) * stride + k - 2 * pad
}

/// `x`: N×Cin×h×w, `w`: Cin×Cout×k×k.
pub fn conv_transpose2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, cin, h, wd) = x.dims4();
    let (wcin, cout, k, _) = w.dims4();
    assert_eq!(cin, wcin, "conv_transpose2d channel mismatch");
    let oh = conv_transpose_out(h, k, stride, pad);
    let ow = conv_transpose_out(wd, k, stride, pad);
    let g = ConvGeom::new(cout, oh, ow, k, stride, pad);
    debug_assert_eq!((g.oh, g.ow), (h, wd));
    let rows = g.rows();
    let plane_in = h * wd;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    par::for_each_chunk(out.data_mut(), cout * oh * ow, |i, y| {
        let mut cols = vec![T::zero(); rows * plane_in];
        // cols = Wᵀ · x, W viewed as Cin × (Cout·k·k)
        T::gemm(
            rows,
            cin,
            plane_in,
            T::one(),
            w.data(),
            1,
            rows as isize,
            x.item(i),
            plane_in as isize,
            1,
            T::zero(),
            &mut cols,
            plane_in as isize,
            1,
        );
        col2im(&cols, &g, y);
        if let Some(b) = b {
            add_bias(y, b.data(), oh * ow);
        }
    });
    out
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> ConvGrads<T> {
    let (n, cin, h, wd) = x.dims4();
    let (_, cout, k, _) = w.dims4();
    let (_, _, oh, ow) = dy.dims4();
    let g = ConvGeom::new(cout, oh, ow, k, stride, pad);
    let rows = g.rows();
    let plane_in = h * wd;
    let parts = par::map_range(n, |i| {
        let mut dcols = vec![T::zero(); rows * plane_in];
        im2col(dy.item(i), &g, &mut dcols);
        // dW = x · dcolsᵀ  (Cin × rows)
        let mut dw = vec![T::zero(); cin * rows];
        T::gemm(
            cin,
            plane_in,
            rows,
            T::one(),
            x.item(i),
            plane_in as isize,
            1,
            &dcols,
            1,
            plane_in as isize,
            T::zero(),
            &mut dw,
            rows as isize,
            1,
        );
        let dx = need_dx.then(|| {
            let mut dx = vec![T::zero(); cin * plane_in];
            T::gemm(
                cin,
                rows,
                plane_in,
                T::one(),
                w.data(),
                rows as isize,
                1,
                &dcols,
                plane_in as isize,
                1,
                T::zero(),
                &mut dx,
                plane_in as isize,
                1,
            );
            dx
        });
        (dx, dw)
    });
    let mut dws = Vec::with_capacity(n);
    let mut dxs = Vec::with_capacity(if need_dx { x.len() } else { 0 });
    for (dx, dw) in parts {
        dws.push(dw);
        if let Some(dx) = dx {
            dxs.extend(dx);
        }
    }
    ConvGrads {
        dx: need_dx.then(|| Tensor::from_vec(x.shape(), dxs).expect("dx shape")),
        dw: sum_ordered(dws, w.shape()),
        db: bias_grad(dy),
    }
}

/// Max pooling without padding. Returns the output and, per output element,
/// the flat in-plane index of the selected input element (first maximum).
pub fn maxpool_forward<T: Real>(x: &Tensor<T>, k: usize, stride: usize) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut idx = vec![0u32; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut arg = 0;
                for ky in 0..k {
                    let row = (oy * stride + ky) * w;
                    for kx in 0..k {
                        let j = row + ox * stride + kx;
                        if src[j] > best {
                            best = src[j];
                            arg = j;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out.data_mut()[o] = best;
                idx[o] = arg as u32;
            }
        }
    }
    (out, idx)
}

/// Scatter `dy` to the recorded argmax positions of planes of size `in_plane`.
pub fn scatter_argmax<T: Real>(dy: &[T], idx: &[u32], out_plane: usize, in_plane: usize, dx: &mut [T]) {
    for (o, (&g, &j)) in dy.iter().zip(idx).enumerate() {
        let p = o / out_plane;
        dx[p * in_plane + j as usize] += g;
    }
}

pub fn global_avg_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let inv = T::one() / T::lit(plane as f64);
    Tensor::from_fn(&[n, c, 1, 1], |p| {
        x.data()[p * plane..(p + 1) * plane].iter().copied().sum::<T>() * inv
    })
}

pub fn global_max_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut idx = vec![0u32; n * c];
    let out = Tensor::from_fn(&[n, c, 1, 1], |p| {
        let src = &x.data()[p * plane..(p + 1) * plane];
        let mut best = T::neg_infinity();
        for (j, &v) in src.iter().enumerate() {
            if v > best {
                best = v;
                idx[p] = j as u32;
            }
        }
        best
    });
    (out, idx)
}

pub fn upsample2x_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, oh, ow) = dy.dims4();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        let src = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    dx
}

/// Interpolating downsample of each plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    /// Sample the top-left source pixel of each cell.
    Nearest,
    /// Bilinear sampling at cell centres, half-pixel aligned.
    Bilinear,
}

/// Per output pixel: up to four (source index, weight) taps.
pub fn interp_taps(h: usize, w: usize, oh: usize, ow: usize, mode: Interp) -> Vec<[(u32, f64); 4]> {
    let axis = |size: usize, osize: usize, o: usize| -> (usize, usize, f64) {
        match mode {
            Interp::Nearest => {
                let s = (o * size / osize).min(size - 1);
                (s, s, 0.0)
            }
            Interp::Bilinear => {
                let scale = size as f64 / osize as f64;
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(size - 1);
                let i1 = (i0 + 1).min(size - 1);
                (i0, i1, src - i0 as f64)
            }
        }
    };
    let mut taps = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let (y0, y1, ly) = axis(h, oh, oy);
        for ox in 0..ow {
            let (x0, x1, lx) = axis(w, ow, ox);
            taps.push([
                ((y0 * w + x0) as u32, (1.0 - ly) * (1.0 - lx)),
                ((y0 * w + x1) as u32, (1.0 - ly) * lx),
                ((y1 * w + x0) as u32, ly * (1.0 - lx)),
                ((y1 * w + x1) as u32, ly * lx),
            ]);
        }
    }
    taps
}

pub fn interp_forward<T: Real>(x: &Tensor<T>, oh: usize, ow: usize, mode: Interp) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let taps = interp_taps(h, w, oh, ow, mode);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for (o, t) in dst.iter_mut().zip(&taps) {
            *o = t
                .iter()
                .map(|&(j, wt)| src[j as usize] * T::lit(wt))
                .sum();
        }
    }
    out
}

pub fn interp_backward<T: Real>(dy: &Tensor<T>, h: usize, w: usize, mode: Interp) -> Tensor<T> {
    let (n, c, oh, ow) = dy.dims4();
    let taps = interp_taps(h, w, oh, ow, mode);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        let src = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for (&g, t) in src.iter().zip(&taps) {
            for &(j, wt) in t {
                dst[j as usize] += g * T::lit(wt);
            }
        }
    }
    dx
}

/// Normalization statistics per (item, group) or per channel.
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub const NORM_EPS: f64 = 1e-5;

pub fn group_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
) -> (Tensor<T>, NormStats<T>) {
    let (n, c, h, w) = x.dims4();
    let cpg = c / groups;
    let plane = h * w;
    let count = T::lit((cpg * plane) as f64);
    let eps = T::lit(NORM_EPS);
    let mut out = Tensor::zeros(x.shape());
    let mut mean = vec![T::zero(); n * groups];
    let mut rstd = vec![T::zero(); n * groups];
    for i in 0..n {
        for g in 0..groups {
            let start = (i * c + g * cpg) * plane;
            let seg = &x.data()[start..start + cpg * plane];
            let m = seg.iter().copied().sum::<T>() / count;
            let var = seg.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / count;
            let r = T::one() / (var + eps).sqrt();
            mean[i * groups + g] = m;
            rstd[i * groups + g] = r;
            let dst = &mut out.data_mut()[start..start + cpg * plane];
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                for j in 0..plane {
                    let k = cc * plane + j;
                    dst[k] = (seg[k] - m) * r * ga + be;
                }
            }
        }
    }
    (out, NormStats { mean, rstd })
}

pub fn group_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    groups: usize,
    stats: &NormStats<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = x.dims4();
    let cpg = c / groups;
    let plane = h * w;
    let count = T::lit((cpg * plane) as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for g in 0..groups {
            let start = (i * c + g * cpg) * plane;
            let m = stats.mean[i * groups + g];
            let r = stats.rstd[i * groups + g];
            let xs = &x.data()[start..start + cpg * plane];
            let gs = &dy.data()[start..start + cpg * plane];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                let ga = gamma.data()[ch];
                for j in 0..plane {
                    let k = cc * plane + j;
                    let xhat = (xs[k] - m) * r;
                    dgamma[ch] += gs[k] * xhat;
                    dbeta[ch] += gs[k];
                    let dxhat = gs[k] * ga;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let mean_dxhat = sum_dxhat / count;
            let mean_dxhat_xhat = sum_dxhat_xhat / count;
            let dst = &mut dx.data_mut()[start..start + cpg * plane];
            for cc in 0..cpg {
                let ga = gamma.data()[g * cpg + cc];
                for j in 0..plane {
                    let k = cc * plane + j;
                    let xhat = (xs[k] - m) * r;
                    dst[k] = r * (gs[k] * ga - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
    }
    (
        dx,
        Tensor::from_vec(&[c], dgamma).expect("gamma grad"),
        Tensor::from_vec(&[c], dbeta).expect("beta grad"),
    )
}

/// Per-channel mean and biased variance over (N, H, W).
pub fn channel_moments<T: Real>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let count = T::lit((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            let start = (i * c + ch) * plane;
            s += x.data()[start..start + plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for i in 0..n {
            let start = (i * c + ch) * plane;
            v += x.data()[start..start + plane]
                .iter()
                .map(|&e| (e - m) * (e - m))
                .sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

/// Channel affine normalization with the given per-channel mean and rstd.
pub fn channel_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &NormStats<T>,
) -> Tensor<T> {
    let (_, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = x.clone();
    for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = p % c;
        let (m, r) = (stats.mean[ch], stats.rstd[ch]);
        let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
        for v in chunk {
            *v = (*v - m) * r * ga + be;
        }
    }
    out
}

/// Backward of channel normalization. With `batch_stats` the statistics are
/// treated as functions of `x`; otherwise they are constants.
pub fn channel_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    stats: &NormStats<T>,
    batch_stats: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let count = T::lit((n * plane) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut sum_dxhat = vec![T::zero(); c];
    let mut sum_dxhat_xhat = vec![T::zero(); c];
    for p in 0..n * c {
        let ch = p % c;
        let (m, r, ga) = (stats.mean[ch], stats.rstd[ch], gamma.data()[ch]);
        let xs = &x.data()[p * plane..(p + 1) * plane];
        let gs = &dy.data()[p * plane..(p + 1) * plane];
        for (&xv, &g) in xs.iter().zip(gs) {
            let xhat = (xv - m) * r;
            dgamma[ch] += g * xhat;
            dbeta[ch] += g;
            sum_dxhat[ch] += g * ga;
            sum_dxhat_xhat[ch] += g * ga * xhat;
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    for p in 0..n * c {
        let ch = p % c;
        let (m, r, ga) = (stats.mean[ch], stats.rstd[ch], gamma.data()[ch]);
        let xs = &x.data()[p * plane..(p + 1) * plane];
        let gs = &dy.data()[p * plane..(p + 1) * plane];
        let dst = &mut dx.data_mut()[p * plane..(p + 1) * plane];
        for ((d, &xv), &g) in dst.iter_mut().zip(xs).zip(gs) {
            *d = if batch_stats {
                let xhat = (xv - m) * r;
                r * (g * ga - sum_dxhat[ch] / count - xhat * sum_dxhat_xhat[ch] / count)
            } else {
                r * g * ga
            };
        }
    }
    (
        dx,
        Tensor::from_vec(&[c], dgamma).expect("gamma grad"),
        Tensor::from_vec(&[c], dbeta).expect("beta grad"),
    )
}
