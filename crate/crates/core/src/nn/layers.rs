//! Layer kernels: 3x3 same-padded convolution, ReLU, 2x2 max pooling and
//! fully connected maps, each with its backward pass.
//!
//! Feature maps are row-major `[H, W, C]`. Convolution weights are
//! `[3, 3, Cin, Cout]`, which is exactly the `[9 * Cin, Cout]` matrix that
//! multiplies an im2col buffer. Fully connected weights are `[in, out]`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

pub const KERNEL: usize = 3;
const PAD: usize = 1;

/// Geometry of one convolution applied to a single `[H, W, Cin]` map.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        KERNEL * KERNEL * self.cin
    }
}

/// Unfold the 3x3 same-padded patches of output rows `rows` into `cols`
/// (`[rows.len() * W, 9 * Cin]`).
pub(crate) fn im2col<T: Scalar>(input: &[T], g: ConvGeom, rows: Range<usize>, cols: &mut [T]) {
    let patch = g.patch();
    let span = KERNEL * g.cin;
    debug_assert_eq!(cols.len(), rows.len() * g.w * patch);
    let y0 = rows.start;
    for y in rows {
        for x in 0..g.w {
            let row = &mut cols[((y - y0) * g.w + x) * patch..][..patch];
            for ky in 0..KERNEL {
                let iy = (y + ky).wrapping_sub(PAD);
                let dst = &mut row[ky * span..][..span];
                if iy >= g.h {
                    dst.fill(T::zero());
                } else if x >= PAD && x + PAD < g.w {
                    // The three taps of a kernel row are adjacent in the input.
                    dst.copy_from_slice(&input[(iy * g.w + x - PAD) * g.cin..][..span]);
                } else {
                    for kx in 0..KERNEL {
                        let ix = (x + kx).wrapping_sub(PAD);
                        let d = &mut dst[kx * g.cin..][..g.cin];
                        if ix < g.w {
                            d.copy_from_slice(&input[(iy * g.w + ix) * g.cin..][..g.cin]);
                        } else {
                            d.fill(T::zero());
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch gradients of output rows `rows` onto `out`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: ConvGeom, rows: Range<usize>, out: &mut [T]) {
    let patch = g.patch();
    let span = KERNEL * g.cin;
    let y0 = rows.start;
    for y in rows {
        for x in 0..g.w {
            let row = &cols[((y - y0) * g.w + x) * patch..][..patch];
            for ky in 0..KERNEL {
                let iy = (y + ky).wrapping_sub(PAD);
                if iy >= g.h {
                    continue;
                }
                let src = &row[ky * span..][..span];
                if x >= PAD && x + PAD < g.w {
                    let dst = &mut out[(iy * g.w + x - PAD) * g.cin..][..span];
                    add_assign(dst, src);
                    continue;
                }
                for kx in 0..KERNEL {
                    let ix = (x + kx).wrapping_sub(PAD);
                    if ix < g.w {
                        let dst = &mut out[(iy * g.w + ix) * g.cin..][..g.cin];
                        add_assign(dst, &src[kx * g.cin..][..g.cin]);
                    }
                }
            }
        }
    }
}

/// Output rows per im2col band; small enough for the patch buffer to stay in cache.
fn band_rows(g: ConvGeom) -> usize {
    const BAND_VALUES: usize = 256 * 1024;
    (BAND_VALUES / (g.w * g.patch())).clamp(1, g.h)
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Inputs with this few channels are convolved directly; their im2col
/// rows are too short for the GEMM to pay off.
const DIRECT_MAX_CIN: usize = 4;
/// Output channels accumulated together by the direct kernels.
const LANES: usize = 8;
/// Neighbouring pixels processed together by the direct forward kernel.
const PIXELS: usize = 12;

/// Copy `input` into `pad` with a one-pixel zero border.
fn pad_input<T: Scalar>(input: &[T], g: ConvGeom, pad: &mut Vec<T>) {
    let (wp, c) = (g.w + 2 * PAD, g.cin);
    pad.clear();
    pad.resize((g.h + 2 * PAD) * wp * c, T::zero());
    for y in 0..g.h {
        pad[((y + PAD) * wp + PAD) * c..][..g.w * c].copy_from_slice(&input[y * g.w * c..][..g.w * c]);
    }
}

/// `out` must be pre-filled with the bias; `pad` is scratch space.
#[inline(always)]
fn conv_forward_direct_body<T: Scalar>(input: &[T], weights: &[T], g: ConvGeom, pad: &mut Vec<T>, out: &mut [T]) {
    pad_input(input, g, pad);
    // A compile-time patch-row width lets the kernels unroll completely.
    match g.cin {
        1 => forward_rows::<T, 3>(pad, weights, g, out),
        2 => forward_rows::<T, 6>(pad, weights, g, out),
        3 => forward_rows::<T, 9>(pad, weights, g, out),
        _ => forward_rows::<T, 12>(pad, weights, g, out),
    }
}

/// `S` is the patch-row width `3 * cin`.
#[inline(always)]
fn forward_rows<T: Scalar, const S: usize>(pad: &[T], weights: &[T], g: ConvGeom, out: &mut [T]) {
    let wp = g.w + 2 * PAD;
    for y in 0..g.h {
        for c0 in (0..g.cout).step_by(LANES) {
            if g.cout - c0 < LANES {
                for x in 0..g.w {
                    for co in c0..g.cout {
                        let mut acc = out[(y * g.w + x) * g.cout + co];
                        for ky in 0..KERNEL {
                            let row = &pad[((y + ky) * wp + x) * g.cin..][..S];
                            for (j, &v) in row.iter().enumerate() {
                                acc = acc + v * weights[(ky * S + j) * g.cout + co];
                            }
                        }
                        out[(y * g.w + x) * g.cout + co] = acc;
                    }
                }
                continue;
            }
            let mut x = 0;
            while x + PIXELS <= g.w {
                forward_block::<T, S, PIXELS>(&pad[(y * wp + x) * g.cin..], weights, g, c0, &mut out[(y * g.w + x) * g.cout..]);
                x += PIXELS;
            }
            for x in x..g.w {
                forward_block::<T, S, 1>(&pad[(y * wp + x) * g.cin..], weights, g, c0, &mut out[(y * g.w + x) * g.cout..]);
            }
        }
    }
}

/// `P` adjacent output pixels, output channels `c0..c0 + LANES`.
#[inline(always)]
fn forward_block<T: Scalar, const S: usize, const P: usize>(
    pad: &[T],
    weights: &[T],
    g: ConvGeom,
    c0: usize,
    out: &mut [T],
) {
    let (wp, cin) = (g.w + 2 * PAD, S / KERNEL);
    let mut acc = [[T::zero(); LANES]; P];
    for (p, a) in acc.iter_mut().enumerate() {
        a.copy_from_slice(&out[p * g.cout + c0..][..LANES]);
    }
    for ky in 0..KERNEL {
        let row = &pad[ky * wp * cin..][..(P - 1) * cin + S];
        for j in 0..S {
            let w: &[T; LANES] = weights[(ky * S + j) * g.cout + c0..][..LANES]
                .try_into()
                .expect("lane block");
            for (p, a) in acc.iter_mut().enumerate() {
                let v = row[p * cin + j];
                for l in 0..LANES {
                    a[l] = a[l] + v * w[l];
                }
            }
        }
    }
    for (p, a) in acc.iter().enumerate() {
        out[p * g.cout + c0..][..LANES].copy_from_slice(a);
    }
}

/// Accumulates weight gradients, and writes the input gradient when asked.
#[inline(always)]
fn conv_backward_direct_body<T: Scalar>(
    input: &[T],
    grad_out: &[T],
    weights: &[T],
    g: ConvGeom,
    dweights: &mut [T],
    dinput: Option<&mut [T]>,
    pad: &mut Vec<T>,
) {
    pad_input(input, g, pad);
    match g.cin {
        1 => dweight_rows::<T, 3>(pad, grad_out, g, dweights),
        2 => dweight_rows::<T, 6>(pad, grad_out, g, dweights),
        3 => dweight_rows::<T, 9>(pad, grad_out, g, dweights),
        _ => dweight_rows::<T, 12>(pad, grad_out, g, dweights),
    }
    if let Some(d) = dinput {
        let block = g.cin * g.cout;
        d.fill(T::zero());
        for y in 0..g.h {
            for x in 0..g.w {
                let go = &grad_out[(y * g.w + x) * g.cout..][..g.cout];
                for (t, p) in taps(g, y, x) {
                    let wt = &weights[t * block..][..block];
                    for (di, wrow) in d[p * g.cin..][..g.cin].iter_mut().zip(wt.chunks_exact(g.cout)) {
                        let dot = wrow.iter().zip(go).fold(T::zero(), |acc, (&w, &gv)| acc + w * gv);
                        *di = *di + dot;
                    }
                }
            }
        }
    }
}

/// One kernel row at a time, the `S x LANES` weight-gradient block stays in registers.
#[inline(always)]
fn dweight_rows<T: Scalar, const S: usize>(pad: &[T], grad_out: &[T], g: ConvGeom, dweights: &mut [T]) {
    let (wp, cin) = (g.w + 2 * PAD, S / KERNEL);
    for ky in 0..KERNEL {
        for c0 in (0..g.cout).step_by(LANES) {
            let width = LANES.min(g.cout - c0);
            let mut acc = [[T::zero(); LANES]; S];
            for y in 0..g.h {
                let prow = &pad[(y + ky) * wp * cin..][..wp * cin];
                let grow = &grad_out[y * g.w * g.cout..][..g.w * g.cout];
                for x in 0..g.w {
                    let pv: &[T; S] = prow[x * cin..][..S].try_into().expect("patch row");
                    if width == LANES {
                        let gv: &[T; LANES] = grow[x * g.cout + c0..][..LANES].try_into().expect("lane block");
                        for j in 0..S {
                            for l in 0..LANES {
                                acc[j][l] = acc[j][l] + pv[j] * gv[l];
                            }
                        }
                    } else {
                        let gv = &grow[x * g.cout + c0..][..width];
                        for j in 0..S {
                            for l in 0..width {
                                acc[j][l] = acc[j][l] + pv[j] * gv[l];
                            }
                        }
                    }
                }
            }
            for (j, a) in acc.iter().enumerate() {
                let drow = &mut dweights[(ky * S + j) * g.cout + c0..][..width];
                for (d, &v) in drow.iter_mut().zip(a) {
                    *d = *d + v;
                }
            }
        }
    }
}

/// In-bounds taps of the 3x3 window at `(y, x)` as `(tap, input pixel)`.
fn taps(g: ConvGeom, y: usize, x: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..KERNEL * KERNEL).filter_map(move |t| {
        let iy = (y + t / KERNEL).wrapping_sub(PAD);
        let ix = (x + t % KERNEL).wrapping_sub(PAD);
        (iy < g.h && ix < g.w).then(|| (t, iy * g.w + ix))
    })
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_forward_direct_avx2<T: Scalar>(
    input: &[T],
    weights: &[T],
    g: ConvGeom,
    pad: &mut Vec<T>,
    out: &mut [T],
) {
    conv_forward_direct_body(input, weights, g, pad, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_backward_direct_avx2<T: Scalar>(
    input: &[T],
    grad_out: &[T],
    weights: &[T],
    g: ConvGeom,
    dweights: &mut [T],
    dinput: Option<&mut [T]>,
    pad: &mut Vec<T>,
) {
    conv_backward_direct_body(input, grad_out, weights, g, dweights, dinput, pad)
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

fn conv_forward_direct<T: Scalar>(input: &[T], weights: &[T], g: ConvGeom, pad: &mut Vec<T>, out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: AVX2 support was detected at runtime.
        return unsafe { conv_forward_direct_avx2(input, weights, g, pad, out) };
    }
    conv_forward_direct_body(input, weights, g, pad, out)
}

fn conv_backward_direct<T: Scalar>(
    input: &[T],
    grad_out: &[T],
    weights: &[T],
    g: ConvGeom,
    dweights: &mut [T],
    dinput: Option<&mut [T]>,
    pad: &mut Vec<T>,
) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: AVX2 support was detected at runtime.
        return unsafe { conv_backward_direct_avx2(input, grad_out, weights, g, dweights, dinput, pad) };
    }
    conv_backward_direct_body(input, grad_out, weights, g, dweights, dinput, pad)
}

pub(crate) fn conv_forward_item<T: Scalar>(
    input: &[T],
    weights: &[T],
    bias: &[T],
    g: ConvGeom,
    cols: &mut Vec<T>,
    out: &mut [T],
) {
    for px in out.chunks_exact_mut(g.cout) {
        px.copy_from_slice(bias);
    }
    if g.cin <= DIRECT_MAX_CIN {
        conv_forward_direct(input, weights, g, cols, out);
        return;
    }
    let band = band_rows(g);
    for y0 in (0..g.h).step_by(band) {
        let rows = y0..(y0 + band).min(g.h);
        let m = rows.len() * g.w;
        cols.resize(m * g.patch(), T::zero());
        im2col(input, g, rows, cols);
        gemm(
            MatRef::new(cols, m, g.patch()),
            MatRef::new(weights, g.patch(), g.cout),
            T::one(),
            &mut out[y0 * g.w * g.cout..][..m * g.cout],
        );
    }
}

/// Accumulates weight/bias gradients; writes the input gradient when `dinput` is given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_item<T: Scalar>(
    input: &[T],
    grad_out: &[T],
    weights: &[T],
    g: ConvGeom,
    dweights: &mut [T],
    dbias: &mut [T],
    dinput: Option<&mut [T]>,
    cols: &mut Vec<T>,
) {
    for px in grad_out.chunks_exact(g.cout) {
        add_assign(dbias, px);
    }
    if g.cin <= DIRECT_MAX_CIN {
        conv_backward_direct(input, grad_out, weights, g, dweights, dinput, cols);
        return;
    }
    let mut dinput = dinput;
    if let Some(d) = dinput.as_deref_mut() {
        d.fill(T::zero());
    }
    let band = band_rows(g);
    for y0 in (0..g.h).step_by(band) {
        let rows = y0..(y0 + band).min(g.h);
        let m = rows.len() * g.w;
        let grad = &grad_out[y0 * g.w * g.cout..][..m * g.cout];
        cols.resize(m * g.patch(), T::zero());
        im2col(input, g, rows.clone(), cols);
        gemm(MatRef::t(cols, m, g.patch()), MatRef::new(grad, m, g.cout), T::one(), dweights);
        if let Some(d) = dinput.as_deref_mut() {
            // The patch buffer is free again; reuse it for the patch gradients.
            gemm(MatRef::new(grad, m, g.cout), MatRef::t(weights, g.patch(), g.cout), T::zero(), cols);
            col2im(cols, g, rows, d);
        }
    }
}

/// Visits every pooling window as `(output index, winning input index, max)`.
///
/// Scan order is (0,0), (0,1), (1,0), (1,1); strict `>` keeps the first maximum.
fn pool_windows<T: Scalar>(input: &[T], h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, T)) {
    let ow = w / 2;
    for oy in 0..h / 2 {
        let top = 2 * oy * w;
        let bottom = top + w;
        for ox in 0..ow {
            let offsets = [top + 2 * ox, top + 2 * ox + 1, bottom + 2 * ox, bottom + 2 * ox + 1].map(|p| p * c);
            let o = (oy * ow + ox) * c;
            for ch in 0..c {
                let mut best_idx = offsets[0] + ch;
                let mut best = input[best_idx];
                for &off in &offsets[1..] {
                    if input[off + ch] > best {
                        best = input[off + ch];
                        best_idx = off + ch;
                    }
                }
                f(o + ch, best_idx, best);
            }
        }
    }
}

pub(crate) fn maxpool_forward_item<T: Scalar>(
    input: &[T],
    h: usize,
    w: usize,
    c: usize,
    out: &mut [T],
    argmax: Option<&mut [u32]>,
) {
    if let Some(argmax) = argmax {
        pool_windows(input, h, w, c, |o, idx, best| {
            out[o] = best;
            argmax[o] = idx as u32;
        });
        return;
    }
    let (ow, row) = (w / 2, w * c);
    for oy in 0..h / 2 {
        let top = &input[2 * oy * row..][..row];
        let bottom = &input[(2 * oy + 1) * row..][..row];
        for ox in 0..ow {
            let (a, b) = top[2 * ox * c..][..2 * c].split_at(c);
            let (d, e) = bottom[2 * ox * c..][..2 * c].split_at(c);
            let o = &mut out[(oy * ow + ox) * c..][..c];
            for ch in 0..c {
                let mut m = a[ch];
                m = if b[ch] > m { b[ch] } else { m };
                m = if d[ch] > m { d[ch] } else { m };
                o[ch] = if e[ch] > m { e[ch] } else { m };
            }
        }
    }
}

/// Routes each output gradient to the window maximum, found again from the pooling input.
pub(crate) fn maxpool_backward_item<T: Scalar>(
    input: &[T],
    h: usize,
    w: usize,
    c: usize,
    grad_out: &[T],
    dinput: &mut [T],
) {
    let (ow, row) = (w / 2, w * c);
    let zero = T::zero();
    for oy in 0..h / 2 {
        let top = &input[2 * oy * row..][..row];
        let bottom = &input[(2 * oy + 1) * row..][..row];
        let (dtop, dbottom) = dinput[2 * oy * row..][..2 * row].split_at_mut(row);
        for ox in 0..ow {
            let (a, b) = top[2 * ox * c..][..2 * c].split_at(c);
            let (d, e) = bottom[2 * ox * c..][..2 * c].split_at(c);
            let (da, db) = dtop[2 * ox * c..][..2 * c].split_at_mut(c);
            let (dd, de) = dbottom[2 * ox * c..][..2 * c].split_at_mut(c);
            let g = &grad_out[(oy * ow + ox) * c..][..c];
            for ch in 0..c {
                let w1 = b[ch] > a[ch];
                let m1 = if w1 { b[ch] } else { a[ch] };
                let w2 = d[ch] > m1;
                let m2 = if w2 { d[ch] } else { m1 };
                let w3 = e[ch] > m2;
                let gv = g[ch];
                // Non-short-circuit operators keep this loop branch-free.
                de[ch] = if w3 { gv } else { zero };
                dd[ch] = if w2 & !w3 { gv } else { zero };
                db[ch] = if w1 & !w2 & !w3 { gv } else { zero };
                da[ch] = if !(w1 | w2 | w3) { gv } else { zero };
            }
        }
    }
}

fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<ConvGeom> {
    let &[h, w, cin] = input.shape() else {
        return Err(Error::config(format!(
            "conv2d expects [H, W, Cin] input, got {:?}",
            input.shape()
        )));
    };
    let &[kh, kw, wcin, cout] = weights.shape() else {
        return Err(Error::config(format!(
            "conv2d expects [3, 3, Cin, Cout] weights, got {:?}",
            weights.shape()
        )));
    };
    if kh != KERNEL || kw != KERNEL || wcin != cin || bias.shape() != [cout] || h == 0 || w == 0 {
        return Err(Error::config(format!(
            "conv2d shape mismatch: input {:?}, weights {:?}, bias {:?}",
            input.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    Ok(ConvGeom { h, w, cin, cout })
}

/// 3x3 convolution, stride 1, same (zero) padding.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let g = check_conv_shapes(input, weights, bias)?;
    let mut out = Tensor::zeros(&[g.h, g.w, g.cout]);
    let mut cols = Vec::new();
    conv_forward_item(input.data(), weights.data(), bias.data(), g, &mut cols, out.data_mut());
    Ok(out)
}

/// Gradients of [`conv2d`] as `(d_input, d_weights, d_bias)`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = check_conv_shapes(input, weights, bias)?;
    if grad_out.shape() != [g.h, g.w, g.cout] {
        return Err(Error::config("conv2d_backward: gradient shape mismatch"));
    }
    let mut dinput = Tensor::zeros(input.shape());
    let mut dweights = Tensor::zeros(weights.shape());
    let mut dbias = Tensor::zeros(bias.shape());
    let mut cols = Vec::new();
    conv_backward_item(
        input.data(),
        grad_out.data(),
        weights.data(),
        g,
        dweights.data_mut(),
        dbias.data_mut(),
        Some(dinput.data_mut()),
        &mut cols,
    );
    Ok((dinput, dweights, dbias))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    relu_in_place(out.data_mut());
    out
}

pub(crate) fn relu_in_place<T: Scalar>(data: &mut [T]) {
    let zero = T::zero();
    for x in data {
        *x = if *x > zero { *x } else { zero };
    }
}

/// Subgradient 0 at and below zero; `output` is the forward result.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut grad = grad_out.clone();
    relu_backward_in_place(output.data(), grad.data_mut());
    grad
}

pub(crate) fn relu_backward_in_place<T: Scalar>(output: &[T], grad: &mut [T]) {
    let zero = T::zero();
    for (g, &y) in grad.iter_mut().zip(output) {
        *g = if y > zero { *g } else { zero };
    }
}

/// Result of a 2x2/stride-2 pooling: the pooled map and, per output cell,
/// the flat input index that won.
#[derive(Clone, Debug)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<u32>,
}

pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<Pooled<T>> {
    let &[h, w, c] = input.shape() else {
        return Err(Error::config(format!(
            "maxpool2 expects [H, W, C], got {:?}",
            input.shape()
        )));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!(
            "maxpool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let mut output = Tensor::zeros(&[h / 2, w / 2, c]);
    let mut argmax = vec![0u32; output.len()];
    maxpool_forward_item(input.data(), h, w, c, output.data_mut(), Some(&mut argmax));
    Ok(Pooled { output, argmax })
}

pub fn maxpool2_backward<T: Scalar>(
    input_shape: &[usize],
    pooled: &Pooled<T>,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut dinput = Tensor::zeros(input_shape);
    for (&g, &idx) in grad_out.data().iter().zip(&pooled.argmax) {
        let slot = &mut dinput.data_mut()[idx as usize];
        *slot = *slot + g;
    }
    dinput
}

/// `y = W^T x + b` for a flattened input, with `W` stored `[in, out]`.
pub fn fully_connected<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let &[fan_in, fan_out] = weights.shape() else {
        return Err(Error::config("fully_connected expects [in, out] weights"));
    };
    if input.len() != fan_in || bias.shape() != [fan_out] {
        return Err(Error::config(format!(
            "fully_connected shape mismatch: input length {}, weights {:?}, bias {:?}",
            input.len(),
            weights.shape(),
            bias.shape()
        )));
    }
    let mut out = Tensor::from_vec(&[fan_out], bias.data().to_vec())?;
    fc_forward_batch(input.data(), 1, weights.data(), fan_in, fan_out, out.data_mut());
    Ok(out)
}

/// Gradients of [`fully_connected`] as `(d_input, d_weights, d_bias)`.
pub fn fully_connected_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let &[fan_in, fan_out] = weights.shape() else {
        return Err(Error::config("fully_connected expects [in, out] weights"));
    };
    if input.len() != fan_in || grad_out.len() != fan_out {
        return Err(Error::config("fully_connected_backward: shape mismatch"));
    }
    let mut dinput = Tensor::zeros(input.shape());
    let mut dweights = Tensor::zeros(weights.shape());
    let mut dbias = Tensor::zeros(&[fan_out]);
    fc_backward_batch(
        input.data(),
        grad_out.data(),
        1,
        weights.data(),
        fan_in,
        fan_out,
        dweights.data_mut(),
        dbias.data_mut(),
        Some(dinput.data_mut()),
    );
    Ok((dinput, dweights, dbias))
}

/// `out` must be pre-filled with the bias rows.
pub(crate) fn fc_forward_batch<T: Scalar>(
    input: &[T],
    batch: usize,
    weights: &[T],
    fan_in: usize,
    fan_out: usize,
    out: &mut [T],
) {
    gemm(
        MatRef::new(input, batch, fan_in),
        MatRef::new(weights, fan_in, fan_out),
        T::one(),
        out,
    );
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn fc_backward_batch<T: Scalar>(
    input: &[T],
    grad_out: &[T],
    batch: usize,
    weights: &[T],
    fan_in: usize,
    fan_out: usize,
    dweights: &mut [T],
    dbias: &mut [T],
    dinput: Option<&mut [T]>,
) {
    gemm(
        MatRef::t(input, batch, fan_in),
        MatRef::new(grad_out, batch, fan_out),
        T::one(),
        dweights,
    );
    for row in grad_out.chunks_exact(fan_out) {
        for (d, &v) in dbias.iter_mut().zip(row) {
            *d = *d + v;
        }
    }
    if let Some(dinput) = dinput {
        gemm(
            MatRef::new(grad_out, batch, fan_out),
            MatRef::t(weights, fan_in, fan_out),
            T::zero(),
            dinput,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct six-loop convolution used as an oracle.
    fn reference_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cout = w.shape()[3];
        let mut out = Tensor::zeros(&[h, wd, cout]);
        for y in 0..h {
            for xx in 0..wd {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            let ix = xx as isize + kx as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.data()[(iy as usize * wd + ix as usize) * cin + ci]
                                    * w.data()[((ky * 3 + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out.data_mut()[(y * wd + xx) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_on_single_pixel() {
        let x = Tensor::from_vec(&[1, 1, 1], vec![2.5]).unwrap();
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        w.data_mut()[4] = 1.0;
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &w, &b).unwrap().data(), &[2.5]);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[5, 5, 2], &mut rng);
        let w = random(&[3, 3, 2, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let got = conv2d(&x, &w, &b).unwrap();
        let want = reference_conv(&x, &w, &b);
        for (a, e) in got.data().iter().zip(want.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    /// Adjoint of `reference_conv` with respect to input, weights and bias.
    fn reference_conv_backward(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        g: &Tensor<f64>,
    ) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cout = w.shape()[3];
        let mut dx = Tensor::zeros(x.shape());
        let mut dw = Tensor::zeros(w.shape());
        let mut db = Tensor::zeros(&[cout]);
        for y in 0..h {
            for xx in 0..wd {
                for co in 0..cout {
                    let go = g.data()[(y * wd + xx) * cout + co];
                    db.data_mut()[co] += go;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            let ix = xx as isize + kx as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xi = (iy as usize * wd + ix as usize) * cin + ci;
                                let wi = ((ky * 3 + kx) * cin + ci) * cout + co;
                                dw.data_mut()[wi] += x.data()[xi] * go;
                                dx.data_mut()[xi] += w.data()[wi] * go;
                            }
                        }
                    }
                }
            }
        }
        (dx, dw, db)
    }

    fn assert_close(got: &Tensor<f64>, want: &Tensor<f64>, tol: f64, what: &str) {
        assert_eq!(got.shape(), want.shape(), "{what}");
        for (i, (a, e)) in got.data().iter().zip(want.data()).enumerate() {
            assert!((a - e).abs() <= tol * (1.0 + e.abs()), "{what}[{i}]: {a} vs {e}");
        }
    }

    #[test]
    fn conv_paths_agree_with_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cases = [
            (1, 1, 1, 1),
            (6, 9, 1, 8),
            (7, 5, 3, 3),
            (5, 11, 3, 8),
            (9, 6, 2, 16),
            (4, 13, 4, 11),
            (6, 7, 5, 4),
            (8, 9, 8, 17),
            (3, 2, 12, 8),
            (40, 40, 5, 4),
        ];
        for (h, wd, cin, cout) in cases {
            let what = format!("{h}x{wd} {cin}->{cout}");
            let x = random(&[h, wd, cin], &mut rng);
            let w = random(&[3, 3, cin, cout], &mut rng);
            let b = random(&[cout], &mut rng);
            let g = random(&[h, wd, cout], &mut rng);
            assert_close(&conv2d(&x, &w, &b).unwrap(), &reference_conv(&x, &w, &b), 1e-12, &what);
            let (dx, dw, db) = conv2d_backward(&x, &w, &b, &g).unwrap();
            let (rx, rw, rb) = reference_conv_backward(&x, &w, &g);
            assert_close(&dx, &rx, 1e-12, &format!("dx {what}"));
            assert_close(&dw, &rw, 1e-11, &format!("dw {what}"));
            assert_close(&db, &rb, 1e-12, &format!("db {what}"));
        }
    }

    #[test]
    fn single_precision_conv_tracks_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (cin, cout) in [(3, 8), (8, 32)] {
            let x = random(&[10, 12, cin], &mut rng);
            let w = random(&[3, 3, cin, cout], &mut rng);
            let b = random(&[cout], &mut rng);
            let to32 = |t: &Tensor<f64>| Tensor::from_fn(t.shape(), |i| t.data()[i] as f32);
            let got = conv2d(&to32(&x), &to32(&w), &to32(&b)).unwrap();
            let want = reference_conv(&x, &w, &b);
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((*a as f64 - e).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros(&[4, 4, 2]);
        let w = Tensor::zeros(&[3, 3, 3, 1]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(conv2d(&x, &w, &b), Err(Error::Config(_))));
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::from_vec(&[4], vec![-1.0, -2.0, -0.5, -3.0]).unwrap();
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let x = Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        let up = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        assert_eq!(relu_backward(&relu(&x), &up).data(), &[0.0, 1.0]);
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2(&x).unwrap().output.data(), &[4.0]);
        assert!(maxpool2(&Tensor::<f64>::zeros(&[3, 2, 1])).is_err());
        let big = Tensor::<f64>::zeros(&[160, 160, 8]);
        assert_eq!(maxpool2(&big).unwrap().output.shape(), &[80, 80, 8]);
    }

    #[test]
    fn maxpool_tie_routes_to_first_cell() {
        let x = Tensor::from_vec(&[2, 2, 1], vec![1.0; 4]).unwrap();
        let pooled = maxpool2(&x).unwrap();
        let up = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let d = maxpool2_backward(x.shape(), &pooled, &up);
        assert_eq!(d.data(), &[1.0, 0.0, 0.0, 0.0]);

        // Central differences on a window where the first cell wins by a hair
        // reproduce the same one-hot routing.
        let mut xt = x.clone();
        xt.data_mut()[0] += 1e-3;
        let f = |t: &Tensor<f64>| maxpool2(t).unwrap().output.data()[0];
        let h = 1e-6;
        for cell in 0..4 {
            let mut xp = xt.clone();
            xp.data_mut()[cell] += h;
            let mut xm = xt.clone();
            xm.data_mut()[cell] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((num - d.data()[cell]).abs() < 1e-9);
        }
    }

    #[test]
    fn fc_identity_and_reference() {
        let x = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let w = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let b = Tensor::zeros(&[4]);
        assert_eq!(fully_connected(&x, &w, &b).unwrap().data(), x.data());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[6], &mut rng);
        let w = random(&[6, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let got = fully_connected(&x, &w, &b).unwrap();
        for o in 0..3 {
            let want: f64 = b.data()[o] + (0..6).map(|i| x.data()[i] * w.data()[i * 3 + o]).sum::<f64>();
            assert!((got.data()[o] - want).abs() < 1e-12);
        }
    }

    /// Central-difference check of a scalar functional `sum(r * layer(x))`.
    fn fd_check(
        f: &dyn Fn(&Tensor<f64>) -> Tensor<f64>,
        x: &Tensor<f64>,
        r: &Tensor<f64>,
        analytic: &Tensor<f64>,
    ) {
        let h = 1e-5;
        let obj = |t: &Tensor<f64>| -> f64 { f(t).data().iter().zip(r.data()).map(|(a, b)| a * b).sum() };
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (obj(&xp) - obj(&xm)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            assert!(rel < 1e-4, "index {i}: analytic {a} numeric {num}");
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[4, 4, 2], &mut rng);
        let w = random(&[3, 3, 2, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let r = random(&[4, 4, 3], &mut rng);
        let (dx, dw, db) = conv2d_backward(&x, &w, &b, &r).unwrap();
        fd_check(&|t| conv2d(t, &w, &b).unwrap(), &x, &r, &dx);
        fd_check(&|t| conv2d(&x, t, &b).unwrap(), &w, &r, &dw);
        fd_check(&|t| conv2d(&x, &w, t).unwrap(), &b, &r, &db);

        let rp = random(&[2, 2, 2], &mut rng);
        let pooled = maxpool2(&x).unwrap();
        let dpx = maxpool2_backward(x.shape(), &pooled, &rp);
        fd_check(&|t| maxpool2(t).unwrap().output, &x, &rp, &dpx);

        let rr = random(&[4, 4, 2], &mut rng);
        let dr = relu_backward(&relu(&x), &rr);
        fd_check(&|t| relu(t), &x, &rr, &dr);

        let fx = random(&[6], &mut rng);
        let fw = random(&[6, 3], &mut rng);
        let fb = random(&[3], &mut rng);
        let fr = random(&[3], &mut rng);
        let (dfx, dfw, dfb) = fully_connected_backward(&fx, &fw, &fr).unwrap();
        fd_check(&|t| fully_connected(t, &fw, &fb).unwrap(), &fx, &fr, &dfx);
        fd_check(&|t| fully_connected(&fx, t, &fb).unwrap(), &fw, &fr, &dfw);
        fd_check(&|t| fully_connected(&fx, &fw, t).unwrap(), &fb, &fr, &dfb);
    }
}
