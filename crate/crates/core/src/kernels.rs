//! Numeric kernels shared by the eager evaluator and the gradient tape.
//!
//! Convolutions are stride 1 with symmetric zero padding and optional
//! channel groups; they run as im2col + GEMM per (batch item, group), with
//! a direct loop for depth-wise kernels.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(pad: usize, groups: usize) -> Self {
        ConvSpec { pad, groups }
    }

    /// Plain convolution with the given padding.
    pub const fn padded(pad: usize) -> Self {
        ConvSpec { pad, groups: 1 }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    groups: usize,
    pad: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
    fn depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<ConvGeom> {
    let (n, cin, h, w) = x.nchw()?;
    let (cout, cin_g, kh, kw) = weight
        .nchw()
        .map_err(|_| Error::Shape(format!("conv kernel must be rank 4, got {:?}", weight.dims())))?;
    let groups = spec.groups;
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::Config(format!(
            "{groups} groups do not divide {cin} input / {cout} output channels"
        )));
    }
    if cin_g * groups != cin {
        return Err(Error::Config(format!(
            "kernel expects {} input channels ({cin_g} per group x {groups}), feature map has {cin}",
            cin_g * groups
        )));
    }
    if let Some(b) = bias {
        if b.dims() != [cout] {
            return Err(Error::Config(format!(
                "bias of shape {:?} does not match {cout} filters",
                b.dims()
            )));
        }
    }
    if h + 2 * spec.pad < kh || w + 2 * spec.pad < kw {
        return Err(Error::Shape(format!(
            "{kh}x{kw} kernel does not fit {h}x{w} input with padding {}",
            spec.pad
        )));
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh: h + 2 * spec.pad - kh + 1,
        ow: w + 2 * spec.pad - kw + 1,
        groups,
        pad: spec.pad,
    })
}

/// Valid output columns `[lo, hi)` for kernel offset `k` along an axis.
#[inline]
fn valid_range(k: usize, pad: usize, input: usize, output: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).min(output);
    let hi = (input + pad).saturating_sub(k).min(output).max(lo);
    (lo, hi)
}

/// Unfold output rows `rows` of `cin_g` channels of one image (`src` is
/// `cin_g * h * w`) into a `(cin_g * kh * kw) x (rows.len() * ow)` matrix.
fn im2col<T: Scalar>(src: &[T], g: &ConvGeom, rows: Range<usize>, col: &mut [T]) {
    let pc = rows.len() * g.ow;
    let (h, w) = (g.h, g.w);
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            let (y_lo, y_hi) = valid_range(ky, g.pad, h, g.oh);
            for kx in 0..g.kw {
                let (x_lo, x_hi) = valid_range(kx, g.pad, w, g.ow);
                let dst = &mut col[row * pc..(row + 1) * pc];
                for oy in rows.clone() {
                    let out = &mut dst[(oy - rows.start) * g.ow..][..g.ow];
                    if oy < y_lo || oy >= y_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let iy = oy + ky - g.pad;
                    out[..x_lo].fill(T::zero());
                    out[x_hi..].fill(T::zero());
                    let ix0 = x_lo + kx - g.pad;
                    out[x_lo..x_hi].copy_from_slice(&plane[iy * w + ix0..iy * w + ix0 + (x_hi - x_lo)]);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate a column block back into `dst`.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, rows: Range<usize>, dst: &mut [T]) {
    let pc = rows.len() * g.ow;
    let (h, w) = (g.h, g.w);
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            let (y_lo, y_hi) = valid_range(ky, g.pad, h, g.oh);
            for kx in 0..g.kw {
                let (x_lo, x_hi) = valid_range(kx, g.pad, w, g.ow);
                let src = &col[row * pc..(row + 1) * pc];
                for oy in y_lo.max(rows.start)..y_hi.min(rows.end) {
                    let iy = oy + ky - g.pad;
                    let ix0 = x_lo + kx - g.pad;
                    let out = &mut plane[iy * w + ix0..iy * w + ix0 + (x_hi - x_lo)];
                    let r = (oy - rows.start) * g.ow;
                    let inp = &src[r + x_lo..r + x_hi];
                    out.iter_mut().zip(inp).for_each(|(o, &v)| *o = *o + v);
                }
                row += 1;
            }
        }
    }
}

/// Row-major `rows x cols` to `cols x rows`, in cache tiles.
fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Column-block size in elements; keeps the unfolded block cache-resident.
const COL_BLOCK: usize = 1 << 19;

/// Output-row blocks whose unfolded matrix stays near [`COL_BLOCK`].
fn row_blocks(g: &ConvGeom) -> impl Iterator<Item = Range<usize>> {
    let per = (COL_BLOCK / (g.k() * g.ow).max(1)).max(1);
    let oh = g.oh;
    (0..oh).step_by(per).map(move |r| r..(r + per).min(oh))
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, weight, bias, spec)?;
    let mut out = Tensor::zeros(&[g.n, g.cout, g.oh, g.ow]);
    if g.depthwise() {
        depthwise_forward(x.data(), weight.data(), &g, out.data_mut());
    } else {
        let (k, p) = (g.k(), g.p());
        let mut col = Vec::new();
        let in_item = g.cin * g.h * g.w;
        let out_item = g.cout * p;
        for ni in 0..g.n {
            for gi in 0..g.groups {
                let src = &x.data()[ni * in_item + gi * g.cin_g() * g.h * g.w..][..g.cin_g() * g.h * g.w];
                let w_g = &weight.data()[gi * g.cout_g() * k..(gi + 1) * g.cout_g() * k];
                let dst = &mut out.data_mut()[ni * out_item + gi * g.cout_g() * p..][..g.cout_g() * p];
                if g.pointwise() {
                    T::gemm(
                        g.cout_g(),
                        k,
                        p,
                        T::one(),
                        w_g,
                        k as isize,
                        1,
                        src,
                        p as isize,
                        1,
                        T::zero(),
                        dst,
                        p as isize,
                        1,
                    );
                    continue;
                }
                for rows in row_blocks(&g) {
                    let pc = rows.len() * g.ow;
                    col.resize(k * pc, T::zero());
                    im2col(src, &g, rows.clone(), &mut col);
                    // Y_g[:, block] = W_g (cout_g x K) * col (K x pc)
                    T::gemm(
                        g.cout_g(),
                        k,
                        pc,
                        T::one(),
                        w_g,
                        k as isize,
                        1,
                        &col,
                        pc as isize,
                        1,
                        T::zero(),
                        &mut dst[rows.start * g.ow..],
                        p as isize,
                        1,
                    );
                }
            }
        }
    }
    if let Some(b) = bias {
        let p = g.p();
        for (i, plane) in out.data_mut().chunks_mut(p).enumerate() {
            let bv = b.data()[i % g.cout];
            plane.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    Ok(out)
}

fn depthwise_forward<T: Scalar>(x: &[T], weight: &[T], g: &ConvGeom, out: &mut [T]) {
    let (h, w) = (g.h, g.w);
    for ni in 0..g.n {
        for c in 0..g.cin {
            let plane = &x[(ni * g.cin + c) * h * w..][..h * w];
            let kern = &weight[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let dst = &mut out[(ni * g.cout + c) * g.p()..][..g.p()];
            for ky in 0..g.kh {
                let (y_lo, y_hi) = valid_range(ky, g.pad, h, g.oh);
                for kx in 0..g.kw {
                    let (x_lo, x_hi) = valid_range(kx, g.pad, w, g.ow);
                    let kv = kern[ky * g.kw + kx];
                    for oy in y_lo..y_hi {
                        let iy = oy + ky - g.pad;
                        let ix0 = x_lo + kx - g.pad;
                        let row = &plane[iy * w + ix0..iy * w + ix0 + (x_hi - x_lo)];
                        let o = &mut dst[oy * g.ow + x_lo..oy * g.ow + x_hi];
                        o.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + kv * v);
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution; entries are `None` when not requested.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    spec: ConvSpec,
    dy: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(x, weight, None, spec)?;
    if dy.dims() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match conv output {:?}",
            dy.dims(),
            [g.n, g.cout, g.oh, g.ow]
        )));
    }
    let (k, p) = (g.k(), g.p());
    let mut dx = need_input.then(|| Tensor::zeros(x.dims()));
    let mut dw = need_weight.then(|| Tensor::zeros(weight.dims()));

    if g.depthwise() {
        depthwise_backward(x.data(), weight.data(), dy.data(), &g, dx.as_mut(), dw.as_mut());
    } else if need_input || need_weight {
        let (mut col, mut col_t, mut dcol) = (Vec::new(), Vec::new(), Vec::new());
        let in_item = g.cin * g.h * g.w;
        let out_item = g.cout * p;
        let in_group = g.cin_g() * g.h * g.w;
        for ni in 0..g.n {
            for gi in 0..g.groups {
                let src = &x.data()[ni * in_item + gi * in_group..][..in_group];
                let dy_g = &dy.data()[ni * out_item + gi * g.cout_g() * p..][..g.cout_g() * p];
                let w_off = gi * g.cout_g() * k;
                let w_g = &weight.data()[w_off..w_off + g.cout_g() * k];
                if g.pointwise() {
                    if let Some(dw) = dw.as_mut() {
                        // dW_g += dY_g (cout_g x P) * X_g^T (P x K)
                        let dw_g = &mut dw.data_mut()[w_off..w_off + g.cout_g() * k];
                        T::gemm(
                            g.cout_g(),
                            p,
                            k,
                            T::one(),
                            dy_g,
                            p as isize,
                            1,
                            src,
                            1,
                            p as isize,
                            T::one(),
                            dw_g,
                            k as isize,
                            1,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dX_g += W_g^T (K x cout_g) * dY_g (cout_g x P)
                        let dst = &mut dx.data_mut()[ni * in_item + gi * in_group..][..in_group];
                        T::gemm(
                            k,
                            g.cout_g(),
                            p,
                            T::one(),
                            w_g,
                            1,
                            k as isize,
                            dy_g,
                            p as isize,
                            1,
                            T::one(),
                            dst,
                            p as isize,
                            1,
                        );
                    }
                    continue;
                }
                for rows in row_blocks(&g) {
                    let pc = rows.len() * g.ow;
                    let dy_b = &dy_g[rows.start * g.ow..];
                    if let Some(dw) = dw.as_mut() {
                        col.resize(k * pc, T::zero());
                        im2col(src, &g, rows.clone(), &mut col);
                        // dW_g += dY_g[:, block] (cout_g x pc) * colT (pc x K); the
                        // explicit transpose keeps GEMM packing reads contiguous
                        col_t.resize(k * pc, T::zero());
                        transpose(&col, k, pc, &mut col_t);
                        let dw_g = &mut dw.data_mut()[w_off..w_off + g.cout_g() * k];
                        T::gemm(
                            g.cout_g(),
                            pc,
                            k,
                            T::one(),
                            dy_b,
                            p as isize,
                            1,
                            &col_t,
                            k as isize,
                            1,
                            T::one(),
                            dw_g,
                            k as isize,
                            1,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcol.resize(k * pc, T::zero());
                        // dcol = W_g^T (K x cout_g) * dY_g[:, block] (cout_g x pc)
                        T::gemm(
                            k,
                            g.cout_g(),
                            pc,
                            T::one(),
                            w_g,
                            1,
                            k as isize,
                            dy_b,
                            p as isize,
                            1,
                            T::zero(),
                            &mut dcol,
                            pc as isize,
                            1,
                        );
                        let dst = &mut dx.data_mut()[ni * in_item + gi * in_group..][..in_group];
                        col2im(&dcol, &g, rows, dst);
                    }
                }
            }
        }
    }

    let db = has_bias.then(|| {
        let mut db = Tensor::zeros(&[g.cout]);
        for (i, plane) in dy.data().chunks(p).enumerate() {
            let acc = &mut db.data_mut()[i % g.cout];
            *acc = *acc + plane.iter().copied().sum::<T>();
        }
        db
    });
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Input gradient restricted to input channels `channels` of an ungrouped
/// convolution; returns an `(n, channels.len(), h, w)` tensor.
pub fn conv2d_input_grad_channels<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: ConvSpec,
    dy: &Tensor<T>,
    channels: std::ops::Range<usize>,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, weight, None, spec)?;
    if g.groups != 1 || channels.is_empty() || channels.end > g.cin {
        return Err(Error::Config(format!(
            "channel range {channels:?} is not valid for an ungrouped {}-channel convolution",
            g.cin
        )));
    }
    if dy.dims() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match conv output {:?}",
            dy.dims(),
            [g.n, g.cout, g.oh, g.ow]
        )));
    }
    let kk = g.kh * g.kw;
    let sub = ConvGeom {
        cin: channels.len(),
        ..g
    };
    let (k, p, rows) = (g.k(), g.p(), sub.k());
    let mut dx = Tensor::zeros(&[g.n, sub.cin, g.h, g.w]);
    let mut dcol = Vec::new();
    let w_sub = &weight.data()[channels.start * kk..];
    let item = sub.cin * g.h * g.w;
    for ni in 0..g.n {
        let dy_n = &dy.data()[ni * g.cout * p..][..g.cout * p];
        let dst = &mut dx.data_mut()[ni * item..][..item];
        if g.pointwise() {
            T::gemm(
                rows,
                g.cout,
                p,
                T::one(),
                w_sub,
                1,
                k as isize,
                dy_n,
                p as isize,
                1,
                T::zero(),
                dst,
                p as isize,
                1,
            );
            continue;
        }
        for block in row_blocks(&sub) {
            let pc = block.len() * g.ow;
            dcol.resize(rows * pc, T::zero());
            let dy_b = &dy_n[block.start * g.ow..];
            T::gemm(
                rows,
                g.cout,
                pc,
                T::one(),
                w_sub,
                1,
                k as isize,
                dy_b,
                p as isize,
                1,
                T::zero(),
                &mut dcol,
                pc as isize,
                1,
            );
            col2im(&dcol, &sub, block, dst);
        }
    }
    Ok(dx)
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut Tensor<T>>,
    mut dw: Option<&mut Tensor<T>>,
) {
    let (h, w) = (g.h, g.w);
    for ni in 0..g.n {
        for c in 0..g.cin {
            let base = (ni * g.cin + c) * h * w;
            let dy_plane = &dy[(ni * g.cout + c) * g.p()..][..g.p()];
            for ky in 0..g.kh {
                let (y_lo, y_hi) = valid_range(ky, g.pad, h, g.oh);
                for kx in 0..g.kw {
                    let (x_lo, x_hi) = valid_range(kx, g.pad, w, g.ow);
                    let widx = c * g.kh * g.kw + ky * g.kw + kx;
                    let kv = weight[widx];
                    let mut acc = T::zero();
                    for oy in y_lo..y_hi {
                        let iy = oy + ky - g.pad;
                        let ix0 = x_lo + kx - g.pad;
                        let len = x_hi - x_lo;
                        let d = &dy_plane[oy * g.ow + x_lo..oy * g.ow + x_hi];
                        if dw.is_some() {
                            let row = &x[base + iy * w + ix0..base + iy * w + ix0 + len];
                            acc = acc + row.iter().zip(d).map(|(&a, &b)| a * b).sum::<T>();
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let o = &mut dx.data_mut()[base + iy * w + ix0..base + iy * w + ix0 + len];
                            o.iter_mut().zip(d).for_each(|(o, &v)| *o = *o + kv * v);
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw.data_mut()[widx] = dw.data()[widx] + acc;
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Pooled output with the flat input index that produced each element.
pub struct ArgPooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Non-overlapping 2x2 max pooling with stride 2 (trailing odd row/column dropped).
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<ArgPooled<T>> {
    let (n, c, h, w) = x.nchw()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out.data_mut()[o] = xd[best];
                argmax[o] = best;
            }
        }
    }
    Ok(ArgPooled { output: out, argmax })
}

/// Bin `[start, end)` of adaptive pooling output cell `i` of `out` over `len` inputs.
#[inline]
pub fn adaptive_bin(i: usize, out: usize, len: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

fn check_adaptive(h: usize, w: usize, oh: usize, ow: usize) -> Result<()> {
    if oh == 0 || ow == 0 || h < oh || w < ow {
        return Err(Error::Shape(format!(
            "adaptive pooling to {oh}x{ow} needs at least that many inputs, got {h}x{w}"
        )));
    }
    Ok(())
}

pub fn adaptive_max_pool<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<ArgPooled<T>> {
    let (n, c, h, w) = x.nchw()?;
    check_adaptive(h, w, oh, ow)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, ow, w);
                let mut best = base + y0 * w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let idx = base + iy * w + ix;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out.data_mut()[o] = xd[best];
                argmax[o] = best;
            }
        }
    }
    Ok(ArgPooled { output: out, argmax })
}

pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    check_adaptive(h, w, oh, ow)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, ow, w);
                let mut acc = T::zero();
                for iy in y0..y1 {
                    acc = acc + xd[base + iy * w + x0..base + iy * w + x1].iter().copied().sum::<T>();
                }
                let area = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                out.data_mut()[(plane * oh + oy) * ow + ox] = acc / area;
            }
        }
    }
    Ok(out)
}

pub fn adaptive_avg_pool_backward<T: Scalar>(input_dims: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, oh, ow) = dy.nchw()?;
    let (h, w) = (input_dims[2], input_dims[3]);
    let mut dx = Tensor::zeros(input_dims);
    for (plane, dplane) in dy.data().chunks(oh * ow).enumerate() {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, ow, w);
                let share = dplane[oy * ow + ox] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for iy in y0..y1 {
                    for v in &mut dx.data_mut()[base + iy * w + x0..base + iy * w + x1] {
                        *v = *v + share;
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Scatter pooled gradients back through recorded argmax positions.
pub fn scatter_argmax<T: Scalar>(input_dims: &[usize], argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_dims);
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[idx] = dx.data()[idx] + g;
    }
    dx
}

/// Concatenate rank-4 maps along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
    let (n, _, h, w) = first.nchw()?;
    let mut channels = Vec::with_capacity(parts.len());
    for t in parts {
        let (n2, c, h2, w2) = t.nchw()?;
        if (n2, h2, w2) != (n, h, w) {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}: batch or resolution differs",
                first.dims(),
                t.dims()
            )));
        }
        channels.push(c);
    }
    let total: usize = channels.iter().sum();
    let mut data = Vec::with_capacity(n * total * h * w);
    for ni in 0..n {
        for (t, &c) in parts.iter().zip(&channels) {
            data.extend_from_slice(&t.data()[ni * c * h * w..(ni + 1) * c * h * w]);
        }
    }
    Tensor::new(vec![n, total, h, w], data)
}

/// Split a channel-concatenated gradient back into pieces of the given widths.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = x.nchw()?;
    if widths.iter().sum::<usize>() != c {
        return Err(Error::Shape(format!("cannot split {c} channels into {widths:?}")));
    }
    let mut out: Vec<Vec<T>> = widths.iter().map(|&wc| Vec::with_capacity(n * wc * h * w)).collect();
    for ni in 0..n {
        let mut off = ni * c * h * w;
        for (buf, &wc) in out.iter_mut().zip(widths) {
            buf.extend_from_slice(&x.data()[off..off + wc * h * w]);
            off += wc * h * w;
        }
    }
    out.into_iter()
        .zip(widths)
        .map(|(d, &wc)| Tensor::new(vec![n, wc, h, w], d))
        .collect()
}
