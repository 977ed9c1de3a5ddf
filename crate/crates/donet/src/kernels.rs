//! Raw array compute kernels behind the graph ops: convolution (direct,
//! dilated, strided), transposed convolution, max pooling and batch-norm
//! statistics.
//!
//! Parallel loops assign every output element to exactly one task and keep
//! each element's reduction order fixed, so results are bit-identical
//! regardless of thread count.

use crate::scalar::Scalar;
use crate::shape::Shape;
use rayon::prelude::*;

/// Convolution geometry. `dil` is the dilation rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
}

impl ConvGeom {
    pub fn unit() -> Self {
        ConvGeom { stride: 1, pad: 0, dil: 1 }
    }

    pub fn same(k: usize, dil: usize) -> Self {
        ConvGeom { stride: 1, pad: dil * (k - 1) / 2, dil }
    }
}

fn conv_extent(inp: usize, k: usize, g: ConvGeom) -> Option<usize> {
    let eff = g.dil * (k - 1) + 1;
    let span = inp + 2 * g.pad;
    if span < eff {
        return None;
    }
    Some((span - eff) / g.stride + 1)
}

/// Output shape of a convolution; panics with a shape error when the
/// channels disagree or an output extent would be non-positive.
pub fn conv2d_out_shape(xs: Shape, ws: Shape, g: ConvGeom) -> Shape {
    assert_eq!(
        xs.c, ws.c,
        "conv2d: input channels {} do not match kernel channels {} (input {}, kernel {})",
        xs.c, ws.c, xs, ws
    );
    let oh = conv_extent(xs.h, ws.h, g);
    let ow = conv_extent(xs.w, ws.w, g);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Shape::new(xs.n, ws.n, oh, ow),
        _ => panic!("conv2d: non-positive output extent for input {xs}, kernel {ws}, geom {g:?}"),
    }
}

/// Output shape of a transposed convolution: s*(in-1) + k - 2*pad.
/// Kernel layout is (in_ch, out_ch, kh, kw).
pub fn tconv2d_out_shape(xs: Shape, ws: Shape, stride: usize, pad: usize) -> Shape {
    assert_eq!(
        xs.c, ws.n,
        "tconv2d: input channels {} do not match kernel input channels {} (input {}, kernel {})",
        xs.c, ws.n, xs, ws
    );
    let oh = stride * (xs.h - 1) + ws.h;
    let ow = stride * (xs.w - 1) + ws.w;
    assert!(
        oh > 2 * pad && ow > 2 * pad,
        "tconv2d: non-positive output extent for input {xs}, kernel {ws}"
    );
    Shape::new(xs.n, ws.c, oh - 2 * pad, ow - 2 * pad)
}

/// Run `body(plane_index, plane)` over equal-size chunks, in parallel when
/// `work` (roughly, total multiply-adds) is big enough to amortize the fork.
fn for_each_plane<S: Scalar, F: Fn(usize, &mut [S]) + Sync>(
    out: &mut [S],
    plane: usize,
    work: usize,
    body: F,
) {
    if plane == 0 || out.is_empty() {
        return;
    }
    if work >= 1 << 15 && out.len() / plane > 1 {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, p)| body(i, p));
    } else {
        for (i, p) in out.chunks_mut(plane).enumerate() {
            body(i, p);
        }
    }
}

/// Planes this small go through the im2col path: reshaping makes the
/// vectorizable run length the whole position axis instead of one row.
fn use_im2col(os: Shape) -> bool {
    os.w <= 16
}

/// k-major im2col: col[k][p] with k = (ic*kh + dkh)*kw + dkw and
/// p = (n*os.h + oh)*os.w + ow; out-of-image taps become zeros.
fn im2col<S: Scalar>(x: &[S], xs: Shape, ws: Shape, g: ConvGeom, os: Shape, col: &mut [S]) {
    let (kh, kw) = (ws.h, ws.w);
    let p_total = os.n * os.hw();
    debug_assert_eq!(col.len(), xs.c * kh * kw * p_total);
    let fill = |k: usize, crow: &mut [S]| im2col_row(x, xs, ws, g, os, k, crow);
    if col.len() >= 1 << 15 {
        col.par_chunks_mut(p_total).enumerate().for_each(|(k, crow)| fill(k, crow));
    } else {
        for (k, crow) in col.chunks_mut(p_total).enumerate() {
            fill(k, crow);
        }
    }
}

fn im2col_row<S: Scalar>(
    x: &[S],
    xs: Shape,
    ws: Shape,
    g: ConvGeom,
    os: Shape,
    k: usize,
    crow: &mut [S],
) {
    let (kh, kw) = (ws.h, ws.w);
    let hw = xs.hw();
    {
        let dkw = k % kw;
        let dkh = (k / kw) % kh;
        let ic = k / (kh * kw);
        let off = (dkw * g.dil) as isize - g.pad as isize;
        let lo = (-off).max(0) as usize;
        let hi = ((xs.w as isize - off).min(os.w as isize)).max(0) as usize;
        for n in 0..os.n {
            let xbase = (n * xs.c + ic) * hw;
            for oh in 0..os.h {
                let prow = &mut crow[(n * os.h + oh) * os.w..][..os.w];
                let ih = oh as isize + (dkh * g.dil) as isize - g.pad as isize;
                if ih < 0 || ih >= xs.h as isize || lo >= hi {
                    prow.fill(S::ZERO);
                    continue;
                }
                let xrow = &x[xbase + ih as usize * xs.w..][..xs.w];
                prow[..lo].fill(S::ZERO);
                prow[hi..].fill(S::ZERO);
                let xoff = (lo as isize + off) as usize;
                prow[lo..hi].copy_from_slice(&xrow[xoff..xoff + (hi - lo)]);
            }
        }
    }
}

/// Scatter-add one channel's im2col gradient rows into that channel's
/// (n, hw) scratch planes.
fn col2im_channel<S: Scalar>(
    ic: usize,
    dxc: &mut [S],
    dcol: &[S],
    xs: Shape,
    ws: Shape,
    g: ConvGeom,
    os: Shape,
) {
    let (kh, kw) = (ws.h, ws.w);
    let taps = kh * kw;
    let p_total = os.n * os.hw();
    let hw = xs.hw();
    for t in 0..taps {
        let k = ic * taps + t;
        let dkw = t % kw;
        let dkh = t / kw;
        let crow = &dcol[k * p_total..(k + 1) * p_total];
        let off = (dkw * g.dil) as isize - g.pad as isize;
        let lo = (-off).max(0) as usize;
        let hi = ((xs.w as isize - off).min(os.w as isize)).max(0) as usize;
        if lo >= hi {
            continue;
        }
        for n in 0..os.n {
            for oh in 0..os.h {
                let ih = oh as isize + (dkh * g.dil) as isize - g.pad as isize;
                if ih < 0 || ih >= xs.h as isize {
                    continue;
                }
                let src = &crow[(n * os.h + oh) * os.w..][..os.w];
                let dst = &mut dxc[n * hw + ih as usize * xs.w..][..xs.w];
                let xoff = (lo as isize + off) as usize;
                for (o, &v) in dst[xoff..xoff + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                    *o += v;
                }
            }
        }
    }
}

/// Scatter-add the full im2col gradient onto dx, parallel over input
/// channels (each k belongs to exactly one channel).
fn col2im_add<S: Scalar>(dcol: &[S], xs: Shape, ws: Shape, g: ConvGeom, os: Shape, dx: &mut [S]) {
    let hw = xs.hw();
    let channel = |ic: usize| {
        let mut local = vec![S::ZERO; xs.n * hw];
        col2im_channel(ic, &mut local, dcol, xs, ws, g, os);
        local
    };
    let locals: Vec<Vec<S>> = if xs.c > 1 && dcol.len() >= 1 << 15 {
        use rayon::prelude::*;
        (0..xs.c).into_par_iter().map(channel).collect()
    } else {
        (0..xs.c).map(channel).collect()
    };
    for (ic, local) in locals.iter().enumerate() {
        for n in 0..xs.n {
            let dst = &mut dx[(n * xs.c + ic) * hw..][..hw];
            for (o, &v) in dst.iter_mut().zip(&local[n * hw..(n + 1) * hw]) {
                *o += v;
            }
        }
    }
}

/// Forward cross-correlation with dilation. `w` is (oc, ic, kh, kw).
///
/// Per output element the products accumulate in (ic, kh, kw) order,
/// matching a naive quadruple loop bit for bit.
pub fn conv2d_fwd<S: Scalar>(
    x: &[S],
    xs: Shape,
    w: &[S],
    ws: Shape,
    bias: Option<&[S]>,
    g: ConvGeom,
    out: &mut [S],
    os: Shape,
    scratch: &mut Vec<S>,
) {
    let (kh, kw) = (ws.h, ws.w);
    let hw = xs.hw();
    let ohw = os.hw();
    if g.stride == 1 && use_im2col(os) {
        let p_total = os.n * ohw;
        let k_total = ws.c * kh * kw;
        scratch.resize(k_total * p_total, S::ZERO);
        let col: &mut [S] = &mut scratch[..k_total * p_total];
        im2col(x, xs, ws, g, os, col);
        // axpy over the position axis keeps the naive per-element
        // accumulation order: k = (ic, kh, kw) strictly ascending
        let work = os.len() * k_total;
        let run = |oc: usize| {
            let mut row = vec![bias.map(|b| b[oc]).unwrap_or(S::ZERO); p_total];
            for k in 0..k_total {
                let wv = w[oc * k_total + k];
                let crow = &col[k * p_total..(k + 1) * p_total];
                for (o, &cv) in row.iter_mut().zip(crow) {
                    *o = wv.mul_add(cv, *o);
                }
            }
            row
        };
        let rows: Vec<Vec<S>> = if work >= 1 << 15 && os.c > 1 {
            use rayon::prelude::*;
            (0..os.c).into_par_iter().map(run).collect()
        } else {
            (0..os.c).map(run).collect()
        };
        for (oc, row) in rows.iter().enumerate() {
            for n in 0..os.n {
                out[(n * os.c + oc) * ohw..][..ohw]
                    .copy_from_slice(&row[n * ohw..(n + 1) * ohw]);
            }
        }
        return;
    }
    let fused3 = g.stride == 1 && kw == 3;
    let work = os.len() * ws.c * kh * kw;
    for_each_plane(out, ohw, work, |i, plane| {
        let n = i / os.c;
        let oc = i % os.c;
        let b = bias.map(|b| b[oc]).unwrap_or(S::ZERO);
        plane.fill(b);
        for ic in 0..xs.c {
            let xbase = (n * xs.c + ic) * hw;
            if fused3 && kh == 3 {
                // one pass per output row covering all nine taps where the
                // three input rows exist; per-element order stays (kh, kw)
                let wk = &w[(oc * ws.c + ic) * 9..][..9];
                let off0 = -(g.pad as isize);
                let d = g.dil as isize;
                let lo = |k: isize| (-(off0 + k * d)).max(0) as usize;
                let hi = |k: isize| {
                    ((xs.w as isize - off0 - k * d).min(os.w as isize)).max(0) as usize
                };
                let int_lo = lo(0).max(lo(1)).max(lo(2)).min(os.w);
                let int_hi = hi(0).min(hi(1)).min(hi(2)).max(int_lo);
                for oh in 0..os.h {
                    let ihs: [isize; 3] = [
                        oh as isize - g.pad as isize,
                        oh as isize + d - g.pad as isize,
                        oh as isize + 2 * d - g.pad as isize,
                    ];
                    let valid =
                        |ih: isize| -> Option<usize> { (ih >= 0 && ih < xs.h as isize).then(|| ih as usize) };
                    let orow = &mut plane[oh * os.w..][..os.w];
                    if let (Some(i0), Some(i1), Some(i2)) =
                        (valid(ihs[0]), valid(ihs[1]), valid(ihs[2]))
                    {
                        let r0 = &x[xbase + i0 * xs.w..][..xs.w];
                        let r1 = &x[xbase + i1 * xs.w..][..xs.w];
                        let r2 = &x[xbase + i2 * xs.w..][..xs.w];
                        for ow in 0..int_lo {
                            let mut acc = orow[ow];
                            for (t, &wv) in wk.iter().enumerate() {
                                let iw = ow as isize + off0 + (t % 3) as isize * d;
                                if iw >= 0 && iw < xs.w as isize {
                                    let r = [r0, r1, r2][t / 3];
                                    acc = wv.mul_add(r[iw as usize], acc);
                                }
                            }
                            orow[ow] = acc;
                        }
                        if int_lo < int_hi {
                            let base = (int_lo as isize + off0) as usize;
                            let len = int_hi - int_lo;
                            let dd = g.dil;
                            let s0 = &r0[base..base + len];
                            let s1 = &r0[base + dd..base + dd + len];
                            let s2 = &r0[base + 2 * dd..base + 2 * dd + len];
                            let s3 = &r1[base..base + len];
                            let s4 = &r1[base + dd..base + dd + len];
                            let s5 = &r1[base + 2 * dd..base + 2 * dd + len];
                            let s6 = &r2[base..base + len];
                            let s7 = &r2[base + dd..base + dd + len];
                            let s8 = &r2[base + 2 * dd..base + 2 * dd + len];
                            let dst = &mut orow[int_lo..int_hi];
                            for j in 0..len {
                                let mut acc = dst[j];
                                acc = wk[0].mul_add(s0[j], acc);
                                acc = wk[1].mul_add(s1[j], acc);
                                acc = wk[2].mul_add(s2[j], acc);
                                acc = wk[3].mul_add(s3[j], acc);
                                acc = wk[4].mul_add(s4[j], acc);
                                acc = wk[5].mul_add(s5[j], acc);
                                acc = wk[6].mul_add(s6[j], acc);
                                acc = wk[7].mul_add(s7[j], acc);
                                acc = wk[8].mul_add(s8[j], acc);
                                dst[j] = acc;
                            }
                        }
                        for ow in int_hi..os.w {
                            let mut acc = orow[ow];
                            for (t, &wv) in wk.iter().enumerate() {
                                let iw = ow as isize + off0 + (t % 3) as isize * d;
                                if iw >= 0 && iw < xs.w as isize {
                                    let r = [r0, r1, r2][t / 3];
                                    acc = wv.mul_add(r[iw as usize], acc);
                                }
                            }
                            orow[ow] = acc;
                        }
                    } else {
                        // boundary rows: per-tap scalar with full checks
                        for ow in 0..os.w {
                            let mut acc = orow[ow];
                            for (t, &wv) in wk.iter().enumerate() {
                                let ih = ihs[t / 3];
                                let iw = ow as isize + off0 + (t % 3) as isize * d;
                                if ih >= 0
                                    && ih < xs.h as isize
                                    && iw >= 0
                                    && iw < xs.w as isize
                                {
                                    acc = wv
                                        .mul_add(x[xbase + ih as usize * xs.w + iw as usize], acc);
                                }
                            }
                            orow[ow] = acc;
                        }
                    }
                }
                continue;
            }
            for dkh in 0..kh {
                for dkw in 0..kw {
                    let wv = w[((oc * ws.c + ic) * kh + dkh) * kw + dkw];
                    if g.stride == 1 {
                        // iw = ow + off, contiguous in ow
                        let off = (dkw * g.dil) as isize - g.pad as isize;
                        let lo = (-off).max(0) as usize;
                        let hi = ((xs.w as isize - off).min(os.w as isize)).max(0) as usize;
                        if lo >= hi {
                            continue;
                        }
                        for oh in 0..os.h {
                            let ih = oh as isize + (dkh * g.dil) as isize - g.pad as isize;
                            if ih < 0 || ih >= xs.h as isize {
                                continue;
                            }
                            let xrow = &x[xbase + ih as usize * xs.w..][..xs.w];
                            let orow = &mut plane[oh * os.w..][..os.w];
                            let xoff = (lo as isize + off) as usize;
                            for (o, &xv) in
                                orow[lo..hi].iter_mut().zip(&xrow[xoff..xoff + (hi - lo)])
                            {
                                *o = wv.mul_add(xv, *o);
                            }
                        }
                    } else {
                        for oh in 0..os.h {
                            let ih = (oh * g.stride + dkh * g.dil) as isize - g.pad as isize;
                            if ih < 0 || ih >= xs.h as isize {
                                continue;
                            }
                            let xrow = &x[xbase + ih as usize * xs.w..][..xs.w];
                            let orow = &mut plane[oh * os.w..][..os.w];
                            for (ow, o) in orow.iter_mut().enumerate() {
                                let iw =
                                    (ow * g.stride + dkw * g.dil) as isize - g.pad as isize;
                                if iw >= 0 && iw < xs.w as isize {
                                    *o = wv.mul_add(xrow[iw as usize], *o);
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the convolution input.
pub fn conv2d_dx<S: Scalar>(
    dy: &[S],
    os: Shape,
    w: &[S],
    ws: Shape,
    g: ConvGeom,
    dx: &mut [S],
    xs: Shape,
    scratch: &mut Vec<S>,
) {
    let (kh, kw) = (ws.h, ws.w);
    let ohw = os.hw();
    let hw = xs.hw();
    if g.stride == 1 && os.w <= 64 {
        let p_total = os.n * ohw;
        let k_total = ws.c * kh * kw;
        let work = os.len() * k_total;
        scratch.resize(k_total * p_total, S::ZERO);
        let dcol: &mut [S] = &mut scratch[..k_total * p_total];
        // dcol[k][p] = sum_oc w[oc][k] * dy[oc at p]
        let run = |k: usize, row: &mut [S]| {
            row.fill(S::ZERO);
            for oc in 0..os.c {
                let wv = w[oc * k_total + k];
                if wv == S::ZERO {
                    continue;
                }
                for n in 0..os.n {
                    let dyrow = &dy[(n * os.c + oc) * ohw..][..ohw];
                    let dst = &mut row[n * ohw..(n + 1) * ohw];
                    for (o, &gv) in dst.iter_mut().zip(dyrow) {
                        *o = wv.mul_add(gv, *o);
                    }
                }
            }
        };
        if work >= 1 << 15 && k_total > 1 {
            use rayon::prelude::*;
            dcol.par_chunks_mut(p_total).enumerate().for_each(|(k, row)| run(k, row));
        } else {
            for (k, row) in dcol.chunks_mut(p_total).enumerate() {
                run(k, row);
            }
        }
        col2im_add(dcol, xs, ws, g, os, dx);
        return;
    }
    let fused3 = g.stride == 1 && kw == 3;
    let work = os.len() * ws.c * kh * kw;
    for_each_plane(dx, hw, work, |i, plane| {
        let n = i / xs.c;
        let ic = i % xs.c;
        for oc in 0..os.c {
            let dybase = (n * os.c + oc) * ohw;
            for dkh in 0..kh {
                if fused3 {
                    let wrow = &w[((oc * ws.c + ic) * kh + dkh) * 3..][..3];
                    let (w0, w1, w2) = (wrow[0], wrow[1], wrow[2]);
                    let poff0 = g.pad as isize;
                    let d = g.dil as isize;
                    // tap k reads dy at iw + poff0 - k*d
                    let lo = |k: isize| (-(poff0 - k * d)).max(0) as usize;
                    let hi = |k: isize| {
                        ((os.w as isize - poff0 + k * d).min(xs.w as isize)).max(0) as usize
                    };
                    let int_lo = lo(0).max(lo(1)).max(lo(2)).min(xs.w);
                    let int_hi = hi(0).min(hi(1)).min(hi(2)).max(int_lo);
                    for ih in 0..xs.h {
                        let oh = ih as isize + g.pad as isize - (dkh * g.dil) as isize;
                        if oh < 0 || oh >= os.h as isize {
                            continue;
                        }
                        let dyrow = &dy[dybase + oh as usize * os.w..][..os.w];
                        let xrow = &mut plane[ih * xs.w..][..xs.w];
                        for iw in 0..int_lo {
                            let mut acc = xrow[iw];
                            for (k, &wv) in [w0, w1, w2].iter().enumerate() {
                                let ow = iw as isize + poff0 - k as isize * d;
                                if ow >= 0 && ow < os.w as isize {
                                    acc += wv * dyrow[ow as usize];
                                }
                            }
                            xrow[iw] = acc;
                        }
                        if int_lo < int_hi {
                            let len = int_hi - int_lo;
                            let b0 = (int_lo as isize + poff0) as usize;
                            let b1 = b0 - g.dil;
                            let b2 = b1 - g.dil;
                            let y0 = &dyrow[b0..b0 + len];
                            let y1 = &dyrow[b1..b1 + len];
                            let y2 = &dyrow[b2..b2 + len];
                            for (((o, &a), &bv), &c) in
                                xrow[int_lo..int_hi].iter_mut().zip(y0).zip(y1).zip(y2)
                            {
                                let mut acc = w0.mul_add(a, *o);
                                acc = w1.mul_add(bv, acc);
                                acc = w2.mul_add(c, acc);
                                *o = acc;
                            }
                        }
                        for iw in int_hi..xs.w {
                            let mut acc = xrow[iw];
                            for (k, &wv) in [w0, w1, w2].iter().enumerate() {
                                let ow = iw as isize + poff0 - k as isize * d;
                                if ow >= 0 && ow < os.w as isize {
                                    acc += wv * dyrow[ow as usize];
                                }
                            }
                            xrow[iw] = acc;
                        }
                    }
                    continue;
                }
                for dkw in 0..kw {
                    let wv = w[((oc * ws.c + ic) * kh + dkh) * kw + dkw];
                    if wv == S::ZERO {
                        continue;
                    }
                    if g.stride == 1 {
                        // ow = iw + poff, contiguous in iw
                        let poff = g.pad as isize - (dkw * g.dil) as isize;
                        let lo = (-poff).max(0) as usize;
                        let hi = ((os.w as isize - poff).min(xs.w as isize)).max(0) as usize;
                        if lo >= hi {
                            continue;
                        }
                        for ih in 0..xs.h {
                            let oh = ih as isize + g.pad as isize - (dkh * g.dil) as isize;
                            if oh < 0 || oh >= os.h as isize {
                                continue;
                            }
                            let dyrow = &dy[dybase + oh as usize * os.w..][..os.w];
                            let xrow = &mut plane[ih * xs.w..][..xs.w];
                            let dyoff = (lo as isize + poff) as usize;
                            for (o, &gv) in
                                xrow[lo..hi].iter_mut().zip(&dyrow[dyoff..dyoff + (hi - lo)])
                            {
                                *o += wv * gv;
                            }
                        }
                    } else {
                        for oh in 0..os.h {
                            let ih = (oh * g.stride + dkh * g.dil) as isize - g.pad as isize;
                            if ih < 0 || ih >= xs.h as isize {
                                continue;
                            }
                            let dyrow = &dy[dybase + oh * os.w..][..os.w];
                            let xrow = &mut plane[ih as usize * xs.w..][..xs.w];
                            for (ow, &gv) in dyrow.iter().enumerate() {
                                let iw =
                                    (ow * g.stride + dkw * g.dil) as isize - g.pad as isize;
                                if iw >= 0 && iw < xs.w as isize {
                                    xrow[iw as usize] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Dot product with eight running partials so the reduction vectorizes;
/// the summation order is fixed, hence deterministic.
#[inline(always)]
fn dot8<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::ZERO; 8];
    let mut ai = a.chunks_exact(8);
    let mut bi = b.chunks_exact(8);
    for (ca, cb) in (&mut ai).zip(&mut bi) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut tail = S::ZERO;
    for (&x, &y) in ai.remainder().iter().zip(bi.remainder()) {
        tail += x * y;
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// Accumulate the three kw taps of one (oc, ic, kh) slice over every valid
/// row pair: taps[k] += sum_{oh,ow} dy[oh][ow] * x[ih(oh)][ow + off0 + k*dil].
/// The kw validity bounds depend only on the widths, so they are computed
/// once for the whole plane.
#[inline(always)]
fn dw_plane3<S: Scalar>(
    dyplane: &[S],
    xplane: &[S],
    os_h: usize,
    os_w: usize,
    xs_h: usize,
    xs_w: usize,
    dkh: usize,
    pad: usize,
    dil: usize,
    taps: &mut [S; 3],
) {
    let off0 = -(pad as isize);
    let d = dil as isize;
    let lo = |k: isize| (-(off0 + k * d)).max(0) as usize;
    let hi = |k: isize| ((xs_w as isize - off0 - k * d).min(os_w as isize)).max(0) as usize;
    let int_lo = lo(0).max(lo(1)).max(lo(2)).min(os_w);
    let int_hi = hi(0).min(hi(1)).min(hi(2)).max(int_lo);
    let len = int_hi - int_lo;
    let n8 = len - len % 8;
    let base = int_lo as isize + off0;

    let mut a0 = [S::ZERO; 8];
    let mut a1 = [S::ZERO; 8];
    let mut a2 = [S::ZERO; 8];
    for oh in 0..os_h {
        let ih = oh as isize + (dkh * dil) as isize - pad as isize;
        if ih < 0 || ih >= xs_h as isize {
            continue;
        }
        let dyrow = &dyplane[oh * os_w..][..os_w];
        let xrow = &xplane[ih as usize * xs_w..][..xs_w];
        for ow in 0..int_lo {
            for (k, tap) in taps.iter_mut().enumerate() {
                let iw = ow as isize + off0 + k as isize * d;
                if iw >= 0 && iw < xs_w as isize {
                    *tap += dyrow[ow] * xrow[iw as usize];
                }
            }
        }
        if len > 0 {
            let dyc = &dyrow[int_lo..int_hi];
            let xb = base as usize;
            let x0 = &xrow[xb..xb + len];
            let x1 = &xrow[xb + dil..xb + dil + len];
            let x2 = &xrow[xb + 2 * dil..xb + 2 * dil + len];
            let mut j = 0;
            while j < n8 {
                let dv: &[S; 8] = dyc[j..j + 8].try_into().unwrap();
                let v0: &[S; 8] = x0[j..j + 8].try_into().unwrap();
                let v1: &[S; 8] = x1[j..j + 8].try_into().unwrap();
                let v2: &[S; 8] = x2[j..j + 8].try_into().unwrap();
                for k in 0..8 {
                    a0[k] = dv[k].mul_add(v0[k], a0[k]);
                }
                for k in 0..8 {
                    a1[k] = dv[k].mul_add(v1[k], a1[k]);
                }
                for k in 0..8 {
                    a2[k] = dv[k].mul_add(v2[k], a2[k]);
                }
                j += 8;
            }
            while j < len {
                let dv = dyc[j];
                a0[0] = dv.mul_add(x0[j], a0[0]);
                a1[0] = dv.mul_add(x1[j], a1[0]);
                a2[0] = dv.mul_add(x2[j], a2[0]);
                j += 1;
            }
        }
        for ow in int_hi..os_w {
            for (k, tap) in taps.iter_mut().enumerate() {
                let iw = ow as isize + off0 + k as isize * d;
                if iw >= 0 && iw < xs_w as isize {
                    *tap += dyrow[ow] * xrow[iw as usize];
                }
            }
        }
    }
    let fold = |a: [S; 8]| ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));
    taps[0] += fold(a0);
    taps[1] += fold(a1);
    taps[2] += fold(a2);
}

/// Gradients w.r.t. convolution weights and bias.
pub fn conv2d_dw_db<S: Scalar>(
    x: &[S],
    xs: Shape,
    dy: &[S],
    os: Shape,
    ws: Shape,
    g: ConvGeom,
    dw: &mut [S],
    db: Option<&mut [S]>,
    scratch: &mut Vec<S>,
) {
    let (kh, kw) = (ws.h, ws.w);
    let hw = xs.hw();
    let ohw = os.hw();
    let wplane = ws.c * kh * kw;
    let work = os.len() * ws.c * kh * kw;
    // the weight gradient is a reduction per tap; long position-axis dots
    // beat the row-sliced form at every size used here
    if g.stride == 1 && os.w <= 64 {
        let p_total = os.n * ohw;
        let k_total = wplane;
        scratch.resize(k_total * p_total, S::ZERO);
        let col: &mut [S] = &mut scratch[..k_total * p_total];
        im2col(x, xs, ws, g, os, col);
        for_each_plane(dw, wplane, work, |oc, wplane_data| {
            // gather this channel's dy into one contiguous row
            let mut dyrow = vec![S::ZERO; p_total];
            for n in 0..os.n {
                dyrow[n * ohw..(n + 1) * ohw]
                    .copy_from_slice(&dy[(n * os.c + oc) * ohw..][..ohw]);
            }
            for (k, wd) in wplane_data.iter_mut().enumerate() {
                *wd += dot8(&dyrow, &col[k * p_total..(k + 1) * p_total]);
            }
        });
        if let Some(db) = db {
            for oc in 0..os.c {
                let mut acc = S::ZERO;
                for n in 0..os.n {
                    let base = (n * os.c + oc) * ohw;
                    for &gv in &dy[base..base + ohw] {
                        acc += gv;
                    }
                }
                db[oc] += acc;
            }
        }
        return;
    }
    let fused3 = g.stride == 1 && kw == 3;
    for_each_plane(dw, wplane, work, |oc, wplane_data| {
        for ic in 0..ws.c {
            for dkh in 0..kh {
                if fused3 {
                    let mut taps = [S::ZERO; 3];
                    for n in 0..xs.n {
                        let dyplane = &dy[(n * os.c + oc) * ohw..][..ohw];
                        let xplane = &x[(n * xs.c + ic) * hw..][..hw];
                        dw_plane3(
                            dyplane, xplane, os.h, os.w, xs.h, xs.w, dkh, g.pad, g.dil,
                            &mut taps,
                        );
                    }
                    for (k, &tap) in taps.iter().enumerate() {
                        wplane_data[(ic * kh + dkh) * 3 + k] += tap;
                    }
                    continue;
                }
                for dkw in 0..kw {
                    let mut acc = S::ZERO;
                    for n in 0..xs.n {
                        let dybase = (n * os.c + oc) * ohw;
                        let xbase = (n * xs.c + ic) * hw;
                        if g.stride == 1 {
                            let off = (dkw * g.dil) as isize - g.pad as isize;
                            let lo = (-off).max(0) as usize;
                            let hi = ((xs.w as isize - off).min(os.w as isize)).max(0) as usize;
                            if lo >= hi {
                                continue;
                            }
                            for oh in 0..os.h {
                                let ih =
                                    oh as isize + (dkh * g.dil) as isize - g.pad as isize;
                                if ih < 0 || ih >= xs.h as isize {
                                    continue;
                                }
                                let dyrow = &dy[dybase + oh * os.w..][..os.w];
                                let xrow = &x[xbase + ih as usize * xs.w..][..xs.w];
                                let xoff = (lo as isize + off) as usize;
                                acc += dot8(&dyrow[lo..hi], &xrow[xoff..xoff + (hi - lo)]);
                            }
                        } else {
                            for oh in 0..os.h {
                                let ih = (oh * g.stride + dkh * g.dil) as isize
                                    - g.pad as isize;
                                if ih < 0 || ih >= xs.h as isize {
                                    continue;
                                }
                                let dyrow = &dy[dybase + oh * os.w..][..os.w];
                                let xrow = &x[xbase + ih as usize * xs.w..][..xs.w];
                                for (ow, &gv) in dyrow.iter().enumerate() {
                                    let iw = (ow * g.stride + dkw * g.dil) as isize
                                        - g.pad as isize;
                                    if iw >= 0 && iw < xs.w as isize {
                                        acc += gv * xrow[iw as usize];
                                    }
                                }
                            }
                        }
                    }
                    wplane_data[(ic * kh + dkh) * kw + dkw] += acc;
                }
            }
        }
    });
    if let Some(db) = db {
        for oc in 0..os.c {
            let mut acc = S::ZERO;
            for n in 0..os.n {
                let base = (n * os.c + oc) * ohw;
                for &gv in &dy[base..base + ohw] {
                    acc += gv;
                }
            }
            db[oc] += acc;
        }
    }
}

/// Transposed convolution forward. `w` is (in_ch, out_ch, kh, kw); the
/// op is the adjoint of a stride-`s` convolution with the same kernel.
pub fn tconv2d_fwd<S: Scalar>(
    x: &[S],
    xs: Shape,
    w: &[S],
    ws: Shape,
    bias: Option<&[S]>,
    stride: usize,
    pad: usize,
    out: &mut [S],
    os: Shape,
) {
    let (kh, kw) = (ws.h, ws.w);
    let hw = xs.hw();
    let ohw = os.hw();
    let work = xs.len() * ws.c * kh * kw;
    if stride == 2 && kh == 2 && kw == 2 && pad == 0 {
        // each output pixel receives exactly one tap:
        // out[2ih+p][2iw+q] = sum_ic x[ih][iw] * w[ic][oc][p][q]
        for_each_plane(out, ohw, work, |i, plane| {
            let n = i / os.c;
            let oc = i % os.c;
            let b = bias.map(|b| b[oc]).unwrap_or(S::ZERO);
            plane.fill(b);
            for ic in 0..xs.c {
                let xbase = (n * xs.c + ic) * hw;
                let wq = &w[((ic * ws.c + oc) * 2) * 2..][..4];
                for ih in 0..xs.h {
                    let xrow = &x[xbase + ih * xs.w..][..xs.w];
                    for p in 0..2 {
                        let orow = &mut plane[(2 * ih + p) * os.w..][..os.w];
                        let (w0, w1) = (wq[2 * p], wq[2 * p + 1]);
                        for (oj, &xv) in orow.chunks_exact_mut(2).zip(xrow) {
                            oj[0] = w0.mul_add(xv, oj[0]);
                            oj[1] = w1.mul_add(xv, oj[1]);
                        }
                    }
                }
            }
        });
        return;
    }
    for_each_plane(out, ohw, work, |i, plane| {
        let n = i / os.c;
        let oc = i % os.c;
        let b = bias.map(|b| b[oc]).unwrap_or(S::ZERO);
        plane.fill(b);
        for ic in 0..xs.c {
            let xbase = (n * xs.c + ic) * hw;
            for dkh in 0..kh {
                for dkw in 0..kw {
                    let wv = w[((ic * ws.c + oc) * kh + dkh) * kw + dkw];
                    if wv == S::ZERO {
                        continue;
                    }
                    for oh in 0..os.h {
                        let num = oh as isize + pad as isize - dkh as isize;
                        if num < 0 || num % stride as isize != 0 {
                            continue;
                        }
                        let ih = (num / stride as isize) as usize;
                        if ih >= xs.h {
                            continue;
                        }
                        let xrow = &x[xbase + ih * xs.w..][..xs.w];
                        let orow = &mut plane[oh * os.w..][..os.w];
                        for (ow, o) in orow.iter_mut().enumerate() {
                            let numw = ow as isize + pad as isize - dkw as isize;
                            if numw < 0 || numw % stride as isize != 0 {
                                continue;
                            }
                            let iw = (numw / stride as isize) as usize;
                            if iw < xs.w {
                                *o += wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Transposed convolution input gradient: a forward stride-`s` convolution
/// of `dy` with the same kernel.
pub fn tconv2d_dx<S: Scalar>(
    dy: &[S],
    os: Shape,
    w: &[S],
    ws: Shape,
    stride: usize,
    pad: usize,
    dx: &mut [S],
    xs: Shape,
) {
    let (kh, kw) = (ws.h, ws.w);
    let hw = xs.hw();
    let ohw = os.hw();
    let work = xs.len() * os.c * kh * kw;
    if stride == 2 && kh == 2 && kw == 2 && pad == 0 {
        // dx[ih][iw] = sum_{oc,p,q} dy[2ih+p][2iw+q] * w[ic][oc][p][q]
        for_each_plane(dx, hw, work, |i, plane| {
            let n = i / xs.c;
            let ic = i % xs.c;
            for oc in 0..os.c {
                let dybase = (n * os.c + oc) * ohw;
                let wq = &w[((ic * ws.c + oc) * 2) * 2..][..4];
                for ih in 0..xs.h {
                    let xrow = &mut plane[ih * xs.w..][..xs.w];
                    for p in 0..2 {
                        let dyrow = &dy[dybase + (2 * ih + p) * os.w..][..os.w];
                        let (w0, w1) = (wq[2 * p], wq[2 * p + 1]);
                        for (o, dj) in xrow.iter_mut().zip(dyrow.chunks_exact(2)) {
                            let mut acc = w0.mul_add(dj[0], *o);
                            acc = w1.mul_add(dj[1], acc);
                            *o = acc;
                        }
                    }
                }
            }
        });
        return;
    }
    for_each_plane(dx, hw, work, |i, plane| {
        let n = i / xs.c;
        let ic = i % xs.c;
        for oc in 0..os.c {
            let dybase = (n * os.c + oc) * ohw;
            for dkh in 0..kh {
                for dkw in 0..kw {
                    let wv = w[((ic * ws.c + oc) * kh + dkh) * kw + dkw];
                    if wv == S::ZERO {
                        continue;
                    }
                    for ih in 0..xs.h {
                        let oh = (ih * stride + dkh) as isize - pad as isize;
                        if oh < 0 || oh >= os.h as isize {
                            continue;
                        }
                        let dyrow = &dy[dybase + oh as usize * os.w..][..os.w];
                        let xrow = &mut plane[ih * xs.w..][..xs.w];
                        for (iw, o) in xrow.iter_mut().enumerate() {
                            let ow = (iw * stride + dkw) as isize - pad as isize;
                            if ow >= 0 && ow < os.w as isize {
                                *o += wv * dyrow[ow as usize];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Transposed convolution weight/bias gradients.
pub fn tconv2d_dw_db<S: Scalar>(
    x: &[S],
    xs: Shape,
    dy: &[S],
    os: Shape,
    ws: Shape,
    stride: usize,
    pad: usize,
    dw: &mut [S],
    db: Option<&mut [S]>,
) {
    let (kh, kw) = (ws.h, ws.w);
    let hw = xs.hw();
    let ohw = os.hw();
    let wplane = ws.c * kh * kw;
    let work = xs.len() * ws.c * kh * kw;
    if stride == 2 && kh == 2 && kw == 2 && pad == 0 {
        // dw[ic][oc][p][q] = sum_{n,ih,iw} x[ih][iw] * dy[2ih+p][2iw+q]
        for_each_plane(dw, wplane, work, |ic, wplane_data| {
            for oc in 0..ws.c {
                let mut taps = [S::ZERO; 4];
                for n in 0..xs.n {
                    let xbase = (n * xs.c + ic) * hw;
                    let dybase = (n * os.c + oc) * ohw;
                    for ih in 0..xs.h {
                        let xrow = &x[xbase + ih * xs.w..][..xs.w];
                        for p in 0..2 {
                            let dyrow = &dy[dybase + (2 * ih + p) * os.w..][..os.w];
                            let mut a0 = S::ZERO;
                            let mut a1 = S::ZERO;
                            for (&xv, dj) in xrow.iter().zip(dyrow.chunks_exact(2)) {
                                a0 = xv.mul_add(dj[0], a0);
                                a1 = xv.mul_add(dj[1], a1);
                            }
                            taps[2 * p] += a0;
                            taps[2 * p + 1] += a1;
                        }
                    }
                }
                for (t, &tap) in taps.iter().enumerate() {
                    wplane_data[oc * 4 + t] += tap;
                }
            }
        });
        if let Some(db) = db {
            for oc in 0..os.c {
                let mut acc = S::ZERO;
                for n in 0..os.n {
                    let base = (n * os.c + oc) * ohw;
                    for &gv in &dy[base..base + ohw] {
                        acc += gv;
                    }
                }
                db[oc] += acc;
            }
        }
        return;
    }
    for_each_plane(dw, wplane, work, |ic, wplane_data| {
        for oc in 0..ws.c {
            for dkh in 0..kh {
                for dkw in 0..kw {
                    let mut acc = S::ZERO;
                    for n in 0..xs.n {
                        let xbase = (n * xs.c + ic) * hw;
                        let dybase = (n * os.c + oc) * ohw;
                        for ih in 0..xs.h {
                            let oh = (ih * stride + dkh) as isize - pad as isize;
                            if oh < 0 || oh >= os.h as isize {
                                continue;
                            }
                            let xrow = &x[xbase + ih * xs.w..][..xs.w];
                            let dyrow = &dy[dybase + oh as usize * os.w..][..os.w];
                            for (iw, &xv) in xrow.iter().enumerate() {
                                let ow = (iw * stride + dkw) as isize - pad as isize;
                                if ow >= 0 && ow < os.w as isize {
                                    acc += xv * dyrow[ow as usize];
                                }
                            }
                        }
                    }
                    wplane_data[(oc * kh + dkh) * kw + dkw] += acc;
                }
            }
        }
    });
    if let Some(db) = db {
        for oc in 0..os.c {
            let mut acc = S::ZERO;
            for n in 0..os.n {
                let base = (n * os.c + oc) * ohw;
                for &gv in &dy[base..base + ohw] {
                    acc += gv;
                }
            }
            db[oc] += acc;
        }
    }
}

/// 2x2 max pooling over even extents. Returns the in-block argmax
/// (0..4, scan order (0,0),(0,1),(1,0),(1,1), first max wins ties).
pub fn maxpool2x2_fwd<S: Scalar>(x: &[S], xs: Shape, out: &mut [S], argmax: &mut [u8]) {
    assert!(
        xs.h % 2 == 0 && xs.w % 2 == 0,
        "maxpool2x2 requires even spatial extents, got {xs}"
    );
    let (oh, ow) = (xs.h / 2, xs.w / 2);
    let hw = xs.hw();
    let planes = xs.n * xs.c;
    for p in 0..planes {
        let xplane = &x[p * hw..(p + 1) * hw];
        let obase = p * oh * ow;
        for i in 0..oh {
            let r0 = &xplane[(2 * i) * xs.w..(2 * i + 1) * xs.w];
            let r1 = &xplane[(2 * i + 1) * xs.w..(2 * i + 2) * xs.w];
            for j in 0..ow {
                let cand = [r0[2 * j], r0[2 * j + 1], r1[2 * j], r1[2 * j + 1]];
                let mut best = 0u8;
                for (k, &v) in cand.iter().enumerate().skip(1) {
                    if v > cand[best as usize] {
                        best = k as u8;
                    }
                }
                out[obase + i * ow + j] = cand[best as usize];
                argmax[obase + i * ow + j] = best;
            }
        }
    }
}

pub fn maxpool2x2_bwd<S: Scalar>(dy: &[S], os: Shape, argmax: &[u8], dx: &mut [S], xs: Shape) {
    let hw = xs.hw();
    let ohw = os.hw();
    let planes = xs.n * xs.c;
    for p in 0..planes {
        let dybase = p * ohw;
        let dxbase = p * hw;
        for i in 0..os.h {
            for j in 0..os.w {
                let a = argmax[dybase + i * os.w + j] as usize;
                let (dh, dw_) = (a / 2, a % 2);
                dx[dxbase + (2 * i + dh) * xs.w + (2 * j + dw_)] += dy[dybase + i * os.w + j];
            }
        }
    }
}

/// 2x2 average pooling (used for pyramid inputs; not a graph op).
pub fn avgpool2x2<S: Scalar>(x: &[S], xs: Shape) -> (Vec<S>, Shape) {
    assert!(
        xs.h % 2 == 0 && xs.w % 2 == 0,
        "avgpool2x2 requires even spatial extents, got {xs}"
    );
    let os = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2);
    let mut out = vec![S::ZERO; os.len()];
    let quarter = S::from_f64(0.25);
    let hw = xs.hw();
    let ohw = os.hw();
    for p in 0..xs.n * xs.c {
        let xplane = &x[p * hw..(p + 1) * hw];
        for i in 0..os.h {
            let r0 = &xplane[(2 * i) * xs.w..(2 * i + 1) * xs.w];
            let r1 = &xplane[(2 * i + 1) * xs.w..(2 * i + 2) * xs.w];
            for j in 0..os.w {
                out[p * ohw + i * os.w + j] =
                    (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * quarter;
            }
        }
    }
    (out, os)
}

/// Per-channel batch statistics over (n, h, w): biased mean and variance.
pub fn channel_stats<S: Scalar>(x: &[S], xs: Shape) -> (Vec<S>, Vec<S>) {
    let m = (xs.n * xs.hw()) as f64;
    let hw = xs.hw();
    let mut mean = vec![S::ZERO; xs.c];
    let mut var = vec![S::ZERO; xs.c];
    for c in 0..xs.c {
        let mut acc = S::ZERO;
        for n in 0..xs.n {
            let base = (n * xs.c + c) * hw;
            for &v in &x[base..base + hw] {
                acc += v;
            }
        }
        let mu = acc * S::from_f64(1.0 / m);
        let mut vacc = S::ZERO;
        for n in 0..xs.n {
            let base = (n * xs.c + c) * hw;
            for &v in &x[base..base + hw] {
                let d = v - mu;
                vacc += d * d;
            }
        }
        mean[c] = mu;
        var[c] = vacc * S::from_f64(1.0 / m);
    }
    (mean, var)
}
