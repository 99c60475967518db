//! Raw numeric kernels shared by the tape ops and by no-grad image code.

use crate::scalar::gemm;
use crate::Scalar;

/// Geometry of a square-kernel 2-D convolution on one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn cols_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    /// 1×1, stride 1, no padding: the input already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            line[ix as usize] = line[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch. `w` is `[out_c, in_c, k, k]`.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, batch: usize, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (ohw, rows) = (g.out_h() * g.out_w(), g.cols_rows());
    let in_sz = g.in_c * g.in_h * g.in_w;
    let mut out = vec![T::zero(); batch * g.out_c * ohw];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ohw] };
    for n in 0..batch {
        let xin = &x[n * in_sz..(n + 1) * in_sz];
        let y = &mut out[n * g.out_c * ohw..(n + 1) * g.out_c * ohw];
        if let Some(bias) = b {
            for (o, &bv) in bias.iter().enumerate() {
                y[o * ohw..(o + 1) * ohw].iter_mut().for_each(|v| *v = bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if g.is_pointwise() {
            xin
        } else {
            im2col(g, xin, &mut cols);
            &cols
        };
        gemm(false, false, g.out_c, ohw, rows, T::one(), w, src, beta, y);
    }
    out
}

/// Backward convolution. Accumulates into whichever of `dx`, `dw`, `db` are given.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (ohw, rows) = (g.out_h() * g.out_w(), g.cols_rows());
    let in_sz = g.in_c * g.in_h * g.in_w;
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * ohw }];
    let mut dcols = vec![T::zero(); if dx.is_some() && !g.is_pointwise() { rows * ohw } else { 0 }];
    for n in 0..batch {
        let xin = &x[n * in_sz..(n + 1) * in_sz];
        let dyn_ = &dy[n * g.out_c * ohw..(n + 1) * g.out_c * ohw];
        if let Some(db) = db.as_deref_mut() {
            for o in 0..g.out_c {
                let s: T = dyn_[o * ohw..(o + 1) * ohw].iter().copied().sum();
                db[o] = db[o] + s;
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[T] = if g.is_pointwise() {
                xin
            } else {
                im2col(g, xin, &mut cols);
                &cols
            };
            gemm(false, true, g.out_c, rows, ohw, T::one(), dyn_, src, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * in_sz..(n + 1) * in_sz];
            if g.is_pointwise() {
                gemm(true, false, rows, ohw, g.out_c, T::one(), w, dyn_, T::one(), dxn);
            } else {
                gemm(true, false, rows, ohw, g.out_c, T::one(), w, dyn_, T::zero(), &mut dcols);
                col2im_add(g, &dcols, dxn);
            }
        }
    }
}

/// Source taps for one output coordinate of a bilinear resize
/// (half-pixel centers, edge clamped).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w1: f64,
}

pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Tap { i0, i1, w1 }
        })
        .collect()
}

/// Bilinear resize of `planes` stacked `[planes, in_h, in_w]` planes.
pub fn bilinear_resize<T: Scalar>(x: &[T], planes: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let src = &x[p * in_h * in_w..(p + 1) * in_h * in_w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, a) in ty.iter().enumerate() {
            let wy1 = T::of(a.w1);
            let wy0 = T::one() - wy1;
            for (ox, b) in tx.iter().enumerate() {
                let wx1 = T::of(b.w1);
                let wx0 = T::one() - wx1;
                let top = src[a.i0 * in_w + b.i0] * wx0 + src[a.i0 * in_w + b.i1] * wx1;
                let bot = src[a.i1 * in_w + b.i0] * wx0 + src[a.i1 * in_w + b.i1] * wx1;
                dst[oy * out_w + ox] = top * wy0 + bot * wy1;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`], accumulating into `dx`.
pub fn bilinear_resize_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    dx: &mut [T],
) {
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    for p in 0..planes {
        let g = &dy[p * out_h * out_w..(p + 1) * out_h * out_w];
        let d = &mut dx[p * in_h * in_w..(p + 1) * in_h * in_w];
        for (oy, a) in ty.iter().enumerate() {
            let wy1 = T::of(a.w1);
            let wy0 = T::one() - wy1;
            for (ox, b) in tx.iter().enumerate() {
                let wx1 = T::of(b.w1);
                let wx0 = T::one() - wx1;
                let v = g[oy * out_w + ox];
                d[a.i0 * in_w + b.i0] = d[a.i0 * in_w + b.i0] + v * wy0 * wx0;
                d[a.i0 * in_w + b.i1] = d[a.i0 * in_w + b.i1] + v * wy0 * wx1;
                d[a.i1 * in_w + b.i0] = d[a.i1 * in_w + b.i0] + v * wy1 * wx0;
                d[a.i1 * in_w + b.i1] = d[a.i1 * in_w + b.i1] + v * wy1 * wx1;
            }
        }
    }
}

/// Nearest-neighbour source index for each output coordinate (half-pixel centers).
pub fn nearest_index(in_len: usize, out_len: usize) -> Vec<usize> {
    (0..out_len)
        .map(|o| (((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1))
        .collect()
}

/// 2×2 average pooling with stride 2 over `[planes, h, w]`; odd trailing rows/cols are dropped.
pub fn avg_pool2<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let q = T::of(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let s = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let a = s[2 * y * w + 2 * xx] + s[2 * y * w + 2 * xx + 1];
                let b = s[(2 * y + 1) * w + 2 * xx] + s[(2 * y + 1) * w + 2 * xx + 1];
                out[(p * oh + y) * ow + xx] = (a + b) * q;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, dx: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let q = T::of(0.25);
    for p in 0..planes {
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let g = dy[(p * oh + y) * ow + xx] * q;
                for (dy_, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = (2 * y + dy_) * w + 2 * xx + dx_;
                    d[i] = d[i] + g;
                }
            }
        }
    }
}

/// Softmax along the middle axis of an `[outer, len, inner]` layout.
pub fn softmax_axis<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut m = T::neg_infinity();
            for k in 0..len {
                m = m.max(x[base + k * inner + i]);
            }
            let mut s = T::zero();
            for k in 0..len {
                let e = (x[base + k * inner + i] - m).exp();
                out[base + k * inner + i] = e;
                s = s + e;
            }
            for k in 0..len {
                let idx = base + k * inner + i;
                out[idx] = out[idx] / s;
            }
        }
    }
    out
}
