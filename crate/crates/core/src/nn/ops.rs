//! Forward and backward kernels. Every kernel is a pure function of its
//! inputs; the tape in [`super::tape`] wires them together.
//!
//! Parallel loops only ever split work over disjoint output elements and
//! reduce in a fixed order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::tensor::{Real, Tensor4};
use crate::error::{CoralError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: usize,
    pub pad: usize,
}

fn conv_out(size: usize, k: usize, g: Conv2dGeom) -> Result<usize> {
    let padded = size + 2 * g.pad;
    if g.stride == 0 || padded < k {
        return Err(CoralError::Shape(format!(
            "kernel {k} does not fit input {size} with padding {}",
            g.pad
        )));
    }
    Ok((padded - k) / g.stride + 1)
}

/// Range of output positions `o` for which `o*stride + k - pad` lies in `[0, size)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    // o*stride >= pad - k
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // o*stride + k - pad <= size - 1
    let hi_num = size + pad;
    let hi = if hi_num > k { (hi_num - k - 1) / stride + 1 } else { 0 };
    (lo.min(out), hi.min(out))
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&[T]>,
    g: Conv2dGeom,
) -> Result<Tensor4<T>> {
    let [b, ic, h, wd] = x.dims();
    let [oc, wic, kh, kw] = w.dims();
    if wic != ic {
        return Err(CoralError::Shape(format!(
            "conv expects {wic} input channels, got {ic}"
        )));
    }
    if let Some(bv) = bias {
        if bv.len() != oc {
            return Err(CoralError::Shape(format!("conv bias has {} entries for {oc} outputs", bv.len())));
        }
    }
    let oh = conv_out(h, kh, g)?;
    let ow = conv_out(wd, kw, g)?;
    let mut y = Tensor4::zeros([b, oc, oh, ow]);
    let xd = x.data();
    let wdat = w.data();
    let s = g.stride;
    y.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane, out)| {
            let (bi, o) = (plane / oc, plane % oc);
            if let Some(bv) = bias {
                out.iter_mut().for_each(|v| *v = bv[o]);
            }
            for c in 0..ic {
                let xin = &xd[(bi * ic + c) * h * wd..(bi * ic + c + 1) * h * wd];
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(ky, g.pad, s, h, oh);
                    for kx in 0..kw {
                        let wv = wdat[((o * ic + c) * kh + ky) * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (ox0, ox1) = valid_range(kx, g.pad, s, wd, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - g.pad;
                            let row = &xin[iy * wd..(iy + 1) * wd];
                            let orow = &mut out[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                for (ov, &xv) in orow[ox0..ox1].iter_mut().zip(&row[ix0..ix0 + (ox1 - ox0)]) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * row[ox * s + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(y)
}

pub struct ConvGrads<T> {
    pub dx: Tensor4<T>,
    pub dw: Tensor4<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
    g: Conv2dGeom,
) -> ConvGrads<T> {
    let [b, ic, h, wd] = x.dims();
    let [oc, _, kh, kw] = w.dims();
    let [_, _, oh, ow] = dy.dims();
    let s = g.stride;
    let xd = x.data();
    let wdat = w.data();
    let dyd = dy.data();

    let mut dx = Tensor4::zeros(x.dims());
    dx.data_mut()
        .par_chunks_mut(h * wd)
        .enumerate()
        .for_each(|(plane, dxin)| {
            let (bi, c) = (plane / ic, plane % ic);
            for o in 0..oc {
                let dout = &dyd[(bi * oc + o) * oh * ow..(bi * oc + o + 1) * oh * ow];
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(ky, g.pad, s, h, oh);
                    for kx in 0..kw {
                        let wv = wdat[((o * ic + c) * kh + ky) * kw + kx];
                        let (ox0, ox1) = valid_range(kx, g.pad, s, wd, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - g.pad;
                            let drow = &dout[oy * ow..(oy + 1) * ow];
                            let xrow = &mut dxin[iy * wd..(iy + 1) * wd];
                            if s == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                for (xv, &dv) in xrow[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(&drow[ox0..ox1]) {
                                    *xv += wv * dv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    xrow[ox * s + kx - g.pad] += wv * drow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });

    let mut dw = Tensor4::zeros(w.dims());
    dw.data_mut()
        .par_chunks_mut(ic * kh * kw)
        .enumerate()
        .for_each(|(o, dwo)| {
            for bi in 0..b {
                let dout = &dyd[(bi * oc + o) * oh * ow..(bi * oc + o + 1) * oh * ow];
                for c in 0..ic {
                    let xin = &xd[(bi * ic + c) * h * wd..(bi * ic + c + 1) * h * wd];
                    for ky in 0..kh {
                        let (oy0, oy1) = valid_range(ky, g.pad, s, h, oh);
                        for kx in 0..kw {
                            let (ox0, ox1) = valid_range(kx, g.pad, s, wd, ow);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let mut acc = T::zero();
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - g.pad;
                                let xrow = &xin[iy * wd..(iy + 1) * wd];
                                let drow = &dout[oy * ow..(oy + 1) * ow];
                                if s == 1 {
                                    let ix0 = ox0 + kx - g.pad;
                                    for (&xv, &dv) in xrow[ix0..ix0 + (ox1 - ox0)].iter().zip(&drow[ox0..ox1]) {
                                        acc += xv * dv;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        acc += xrow[ox * s + kx - g.pad] * drow[ox];
                                    }
                                }
                            }
                            dwo[(c * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        });

    let db = (0..oc)
        .map(|o| {
            (0..b)
                .map(|bi| dyd[(bi * oc + o) * oh * ow..(bi * oc + o + 1) * oh * ow].iter().copied().sum::<T>())
                .sum()
        })
        .collect();
    ConvGrads { dx, dw, db }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct BnForward<T> {
    pub y: Tensor4<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Per-channel batch mean and unbiased variance (training mode only).
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Batch normalization. With `running = None` the batch statistics are used
/// (training); otherwise the supplied running mean and variance.
pub fn batch_norm_forward<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
) -> Result<BnForward<T>> {
    let [b, c, h, w] = x.dims();
    if gamma.len() != c || beta.len() != c {
        return Err(CoralError::Shape(format!("batch norm over {c} channels got {} scales", gamma.len())));
    }
    let hw = h * w;
    let n = b * hw;
    let xd = x.data();
    let eps = T::lit(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut batch_var = vec![T::zero(); c];
    match running {
        Some((rm, rv)) => {
            mean.copy_from_slice(rm);
            var.copy_from_slice(rv);
        }
        None => {
            let nf = T::from_usize(n).unwrap();
            for ch in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    s += xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                let m = s / nf;
                let mut v = T::zero();
                for bi in 0..b {
                    for &xv in &xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                        v += (xv - m) * (xv - m);
                    }
                }
                mean[ch] = m;
                var[ch] = v / nf;
                batch_var[ch] = if n > 1 { v / T::from_usize(n - 1).unwrap() } else { T::zero() };
            }
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = Tensor4::zeros(x.dims());
    let mut xhat = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
            for ((yv, xh), &xv) in y.data_mut()[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&xd[r]) {
                *xh = (xv - mean[ch]) * inv_std[ch];
                *yv = gamma[ch] * *xh + beta[ch];
            }
        }
    }
    let batch_mean = if running.is_none() { mean } else { Vec::new() };
    Ok(BnForward {
        y,
        xhat,
        inv_std,
        batch_mean,
        batch_var: if running.is_none() { batch_var } else { Vec::new() },
    })
}

pub struct BnGrads<T> {
    pub dx: Tensor4<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub fn batch_norm_backward<T: Real>(
    dy: &Tensor4<T>,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> BnGrads<T> {
    let [b, c, h, w] = dy.dims();
    let hw = h * w;
    let n = T::from_usize(b * hw).unwrap();
    let dyd = dy.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for bi in 0..b {
            let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
            for (&d, &xh) in dyd[r.clone()].iter().zip(&xhat[r]) {
                dgamma[ch] += d * xh;
                dbeta[ch] += d;
            }
        }
    }
    let mut dx = Tensor4::zeros(dy.dims());
    for ch in 0..c {
        let k = gamma[ch] * inv_std[ch];
        for bi in 0..b {
            let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
            for ((dxv, &d), &xh) in dx.data_mut()[r.clone()].iter_mut().zip(&dyd[r.clone()]).zip(&xhat[r]) {
                *dxv = if batch_stats {
                    k * (d - dbeta[ch] / n - xh * dgamma[ch] / n)
                } else {
                    k * d
                };
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

pub fn relu_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Real>(x: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Max pooling with implicit `-inf` padding. Returns the output and, for
/// every output element, the flat input index of its maximum.
pub fn max_pool_forward<T: Real>(x: &Tensor4<T>, k: usize, g: Conv2dGeom) -> Result<(Tensor4<T>, Vec<usize>)> {
    let [b, c, h, w] = x.dims();
    if k > h + 2 * g.pad || k > w + 2 * g.pad || k <= g.pad {
        return Err(CoralError::Shape(format!("pool window {k} too large for {h}x{w} input")));
    }
    let oh = conv_out(h, k, g)?;
    let ow = conv_out(w, k, g)?;
    let mut y = Tensor4::zeros([b, c, oh, ow]);
    let mut arg = vec![0usize; b * c * oh * ow];
    let xd = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut bi = 0;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if xd[idx] > best {
                            best = xd[idx];
                            bi = idx;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                y.data_mut()[o] = best;
                arg[o] = bi;
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool_backward<T: Real>(x_dims: [usize; 4], argmax: &[usize], dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(x_dims);
    for (&a, &d) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[a] += d;
    }
    dx
}

pub fn avg_pool_forward<T: Real>(x: &Tensor4<T>, k: usize, stride: usize) -> Result<Tensor4<T>> {
    let [b, c, h, w] = x.dims();
    if k == 0 || k > h || k > w {
        return Err(CoralError::Shape(format!("pool window {k} too large for {h}x{w} input")));
    }
    let g = Conv2dGeom { stride, pad: 0 };
    let oh = conv_out(h, k, g)?;
    let ow = conv_out(w, k, g)?;
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut y = Tensor4::zeros([b, c, oh, ow]);
    let xd = x.data();
    for plane in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for ky in 0..k {
                    let row = plane * h * w + (oy * stride + ky) * w + ox * stride;
                    s += xd[row..row + k].iter().copied().sum::<T>();
                }
                y.data_mut()[(plane * oh + oy) * ow + ox] = s * inv;
            }
        }
    }
    Ok(y)
}

pub fn avg_pool_backward<T: Real>(x_dims: [usize; 4], k: usize, stride: usize, dy: &Tensor4<T>) -> Tensor4<T> {
    let [b, c, h, w] = x_dims;
    let [_, _, oh, ow] = dy.dims();
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut dx = Tensor4::zeros(x_dims);
    for plane in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let d = dy.data()[(plane * oh + oy) * ow + ox] * inv;
                for ky in 0..k {
                    let row = plane * h * w + (oy * stride + ky) * w + ox * stride;
                    dx.data_mut()[row..row + k].iter_mut().for_each(|v| *v += d);
                }
            }
        }
    }
    dx
}

#[inline]
fn nearest_src(o: usize, in_size: usize, out_size: usize) -> usize {
    o * in_size / out_size
}

/// Nearest-neighbour resize; an integer upsampling factor `f` is the special
/// case `out = in * f`.
pub fn resize_nearest_forward<T: Real>(x: &Tensor4<T>, oh: usize, ow: usize) -> Result<Tensor4<T>> {
    let [b, c, h, w] = x.dims();
    if oh == 0 || ow == 0 {
        return Err(CoralError::Shape("resize to empty size".into()));
    }
    let mut y = Tensor4::zeros([b, c, oh, ow]);
    for plane in 0..b * c {
        for oy in 0..oh {
            let iy = nearest_src(oy, h, oh);
            for ox in 0..ow {
                let ix = nearest_src(ox, w, ow);
                y.data_mut()[(plane * oh + oy) * ow + ox] = x.data()[(plane * h + iy) * w + ix];
            }
        }
    }
    Ok(y)
}

pub fn resize_nearest_backward<T: Real>(x_dims: [usize; 4], dy: &Tensor4<T>) -> Tensor4<T> {
    let [b, c, h, w] = x_dims;
    let [_, _, oh, ow] = dy.dims();
    let mut dx = Tensor4::zeros(x_dims);
    for plane in 0..b * c {
        for oy in 0..oh {
            let iy = nearest_src(oy, h, oh);
            for ox in 0..ow {
                let ix = nearest_src(ox, w, ow);
                dx.data_mut()[(plane * h + iy) * w + ix] += dy.data()[(plane * oh + oy) * ow + ox];
            }
        }
    }
    dx
}

pub fn nearest_upsample<T: Real>(x: &Tensor4<T>, factor: usize) -> Result<Tensor4<T>> {
    resize_nearest_forward(x, x.height() * factor, x.width() * factor)
}

/// `y = x W^T + b` with `x: [B, N, 1, 1]`, `w: [M, N, 1, 1]`.
pub fn linear_forward<T: Real>(x: &Tensor4<T>, w: &Tensor4<T>, bias: Option<&[T]>) -> Result<Tensor4<T>> {
    let n = x.sample_len();
    let [m, wn, _, _] = w.dims();
    if wn != n || w.plane_len() != 1 {
        return Err(CoralError::Shape(format!("linear expects {wn} inputs, got {n}")));
    }
    if bias.is_some_and(|bv| bv.len() != m) {
        return Err(CoralError::Shape("linear bias length".into()));
    }
    let b = x.batch();
    let mut y = Tensor4::zeros([b, m, 1, 1]);
    y.data_mut().par_chunks_mut(m).enumerate().for_each(|(bi, row)| {
        let xs = x.sample(bi);
        for (o, out) in row.iter_mut().enumerate() {
            let wr = &w.data()[o * n..(o + 1) * n];
            let mut acc = bias.map_or(T::zero(), |bv| bv[o]);
            for (&a, &c) in wr.iter().zip(xs) {
                acc += a * c;
            }
            *out = acc;
        }
    });
    Ok(y)
}

pub fn linear_backward<T: Real>(x: &Tensor4<T>, w: &Tensor4<T>, dy: &Tensor4<T>) -> (Tensor4<T>, Tensor4<T>, Vec<T>) {
    let n = x.sample_len();
    let b = x.batch();
    let m = w.batch();
    let mut dx = Tensor4::zeros(x.dims());
    dx.data_mut().par_chunks_mut(n).enumerate().for_each(|(bi, row)| {
        for o in 0..m {
            let d = dy.data()[bi * m + o];
            let wr = &w.data()[o * n..(o + 1) * n];
            for (r, &wv) in row.iter_mut().zip(wr) {
                *r += d * wv;
            }
        }
    });
    let mut dw = Tensor4::zeros(w.dims());
    dw.data_mut().par_chunks_mut(n).enumerate().for_each(|(o, row)| {
        for bi in 0..b {
            let d = dy.data()[bi * m + o];
            for (r, &xv) in row.iter_mut().zip(x.sample(bi)) {
                *r += d * xv;
            }
        }
    });
    let db = (0..m).map(|o| (0..b).map(|bi| dy.data()[bi * m + o]).sum()).collect();
    (dx, dw, db)
}

/// Softmax across channels at every (batch, y, x) site.
pub fn softmax_channels_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [b, c, h, w] = x.dims();
    let hw = h * w;
    let mut y = Tensor4::zeros(x.dims());
    for bi in 0..b {
        for s in 0..hw {
            let idx = |ch: usize| (bi * c + ch) * hw + s;
            let mx = (0..c).map(|ch| x.data()[idx(ch)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x.data()[idx(ch)] - mx).exp();
                y.data_mut()[idx(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                y.data_mut()[idx(ch)] /= z;
            }
        }
    }
    y
}

pub fn softmax_channels_backward<T: Real>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let [b, c, h, w] = y.dims();
    let hw = h * w;
    let mut dx = Tensor4::zeros(y.dims());
    for bi in 0..b {
        for s in 0..hw {
            let idx = |ch: usize| (bi * c + ch) * hw + s;
            let dot: T = (0..c).map(|ch| y.data()[idx(ch)] * dy.data()[idx(ch)]).sum();
            for ch in 0..c {
                dx.data_mut()[idx(ch)] = y.data()[idx(ch)] * (dy.data()[idx(ch)] - dot);
            }
        }
    }
    dx
}

/// Divides every contiguous run of `group` values in each sample by
/// `max(norm, eps)`. `group == sample_len` gives a plain per-sample L2
/// normalization. Returns the output and the per-group divisors.
pub fn l2_normalize_forward<T: Real>(x: &Tensor4<T>, group: usize, eps: T) -> Result<(Tensor4<T>, Vec<T>)> {
    if group == 0 || x.len() % group != 0 || x.sample_len() % group != 0 {
        return Err(CoralError::Shape(format!(
            "normalization group {group} does not divide sample length {}",
            x.sample_len()
        )));
    }
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.len() / group);
    for chunk in y.data_mut().chunks_mut(group) {
        let n = chunk.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        chunk.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((y, norms))
}

pub fn l2_normalize_backward<T: Real>(x: &Tensor4<T>, y: &Tensor4<T>, norms: &[T], group: usize, eps: T, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(y.dims());
    for (g, ((dxc, yc), dyc)) in dx
        .data_mut()
        .chunks_mut(group)
        .zip(y.data().chunks(group))
        .zip(dy.data().chunks(group))
        .enumerate()
    {
        let n = norms[g];
        let raw_norm = x.data()[g * group..(g + 1) * group].iter().map(|&v| v * v).sum::<T>().sqrt();
        if raw_norm > eps {
            let dot: T = yc.iter().zip(dyc).map(|(&a, &b)| a * b).sum();
            for ((d, &yv), &dv) in dxc.iter_mut().zip(yc).zip(dyc) {
                *d = (dv - yv * dot) / n;
            }
        } else {
            for (d, &dv) in dxc.iter_mut().zip(dyc) {
                *d = dv / n;
            }
        }
    }
    dx
}

/// VLAD residual aggregation. `x: [B, D, H, W]` features, `a: [B, K, H, W]`
/// soft assignments, `centers: [K, D]` (row-major). Output `[B, K*D, 1, 1]`
/// with entry `k*D + d = sum_i a_k(i) (x_d(i) - c_kd)`.
pub fn vlad_forward<T: Real>(x: &Tensor4<T>, a: &Tensor4<T>, centers: &[T]) -> Result<Tensor4<T>> {
    let [b, d, h, w] = x.dims();
    let [ab, k, ah, aw] = a.dims();
    if ab != b || ah != h || aw != w || centers.len() != k * d {
        return Err(CoralError::Shape(format!(
            "vlad: features {:?}, assignments {:?}, {} center values",
            x.dims(),
            a.dims(),
            centers.len()
        )));
    }
    let hw = h * w;
    let mut y = Tensor4::zeros([b, k * d, 1, 1]);
    y.data_mut().par_chunks_mut(k * d).enumerate().for_each(|(bi, out)| {
        for kk in 0..k {
            let ak = &a.data()[(bi * k + kk) * hw..(bi * k + kk + 1) * hw];
            let asum: T = ak.iter().copied().sum();
            for dd in 0..d {
                let xd = &x.data()[(bi * d + dd) * hw..(bi * d + dd + 1) * hw];
                let s: T = ak.iter().zip(xd).map(|(&av, &xv)| av * xv).sum();
                out[kk * d + dd] = s - centers[kk * d + dd] * asum;
            }
        }
    });
    Ok(y)
}

pub struct VladGrads<T> {
    pub dx: Tensor4<T>,
    pub da: Tensor4<T>,
    pub dc: Vec<T>,
}

pub fn vlad_backward<T: Real>(x: &Tensor4<T>, a: &Tensor4<T>, centers: &[T], dy: &Tensor4<T>) -> VladGrads<T> {
    let [b, d, h, w] = x.dims();
    let k = a.channels();
    let hw = h * w;
    let dyd = dy.data();
    let mut dx = Tensor4::zeros(x.dims());
    let mut da = Tensor4::zeros(a.dims());
    for bi in 0..b {
        let g = &dyd[bi * k * d..(bi + 1) * k * d];
        for dd in 0..d {
            let dxr = &mut dx.data_mut()[(bi * d + dd) * hw..(bi * d + dd + 1) * hw];
            for kk in 0..k {
                let gv = g[kk * d + dd];
                let ak = &a.data()[(bi * k + kk) * hw..(bi * k + kk + 1) * hw];
                for (o, &av) in dxr.iter_mut().zip(ak) {
                    *o += gv * av;
                }
            }
        }
        for kk in 0..k {
            let dar = &mut da.data_mut()[(bi * k + kk) * hw..(bi * k + kk + 1) * hw];
            for dd in 0..d {
                let gv = g[kk * d + dd];
                let c = centers[kk * d + dd];
                let xd = &x.data()[(bi * d + dd) * hw..(bi * d + dd + 1) * hw];
                for (o, &xv) in dar.iter_mut().zip(xd) {
                    *o += gv * (xv - c);
                }
            }
        }
    }
    let mut dc = vec![T::zero(); k * d];
    for bi in 0..b {
        for kk in 0..k {
            let asum: T = a.data()[(bi * k + kk) * hw..(bi * k + kk + 1) * hw].iter().copied().sum();
            for dd in 0..d {
                dc[kk * d + dd] -= dyd[bi * k * d + kk * d + dd] * asum;
            }
        }
    }
    VladGrads { dx, da, dc }
}

/// One sparse bilinear footprint: output site `cell` (flat `y*W + x`) reads
/// four source sites with the given weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatherEntry {
    pub cell: usize,
    pub src: [usize; 4],
    pub weights: [f64; 4],
}

/// Per-sample gather lists for a `[B, C, src_h, src_w] -> [B, C, out_h, out_w]` gather.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherPlan {
    pub src_h: usize,
    pub src_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub per_sample: Vec<Vec<GatherEntry>>,
}

pub fn gather_forward<T: Real>(x: &Tensor4<T>, plan: &GatherPlan) -> Result<Tensor4<T>> {
    let [b, c, h, w] = x.dims();
    if h != plan.src_h || w != plan.src_w || b != plan.per_sample.len() {
        return Err(CoralError::Shape(format!(
            "gather plan for {} x {}x{} applied to {:?}",
            plan.per_sample.len(),
            plan.src_h,
            plan.src_w,
            x.dims()
        )));
    }
    let (oh, ow) = (plan.out_h, plan.out_w);
    let mut y = Tensor4::zeros([b, c, oh, ow]);
    for (bi, entries) in plan.per_sample.iter().enumerate() {
        for ch in 0..c {
            let src = &x.data()[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
            let base = (bi * c + ch) * oh * ow;
            for e in entries {
                let mut acc = T::zero();
                for q in 0..4 {
                    acc += T::lit(e.weights[q]) * src[e.src[q]];
                }
                y.data_mut()[base + e.cell] = acc;
            }
        }
    }
    Ok(y)
}

pub fn gather_backward<T: Real>(x_dims: [usize; 4], plan: &GatherPlan, dy: &Tensor4<T>) -> Tensor4<T> {
    let [_, c, h, w] = x_dims;
    let (oh, ow) = (plan.out_h, plan.out_w);
    let mut dx = Tensor4::zeros(x_dims);
    for (bi, entries) in plan.per_sample.iter().enumerate() {
        for ch in 0..c {
            let base = (bi * c + ch) * oh * ow;
            let dst = &mut dx.data_mut()[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
            for e in entries {
                let d = dy.data()[base + e.cell];
                for q in 0..4 {
                    dst[e.src[q]] += T::lit(e.weights[q]) * d;
                }
            }
        }
    }
    dx
}

pub fn concat_channels<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [ba, ca, h, w] = a.dims();
    let [bb, cb, hb, wb] = b.dims();
    if ba != bb || h != hb || w != wb {
        return Err(CoralError::Shape(format!("cannot concat {:?} and {:?}", a.dims(), b.dims())));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for bi in 0..ba {
        data.extend_from_slice(a.sample(bi));
        data.extend_from_slice(b.sample(bi));
    }
    Tensor4::from_vec([ba, ca + cb, h, w], data)
}

pub fn split_channels<T: Real>(dy: &Tensor4<T>, ca: usize) -> (Tensor4<T>, Tensor4<T>) {
    let [b, c, h, w] = dy.dims();
    let hw = h * w;
    let mut da = Vec::with_capacity(b * ca * hw);
    let mut db = Vec::with_capacity(b * (c - ca) * hw);
    for bi in 0..b {
        let s = dy.sample(bi);
        da.extend_from_slice(&s[..ca * hw]);
        db.extend_from_slice(&s[ca * hw..]);
    }
    (
        Tensor4::from_vec([b, ca, h, w], da).unwrap(),
        Tensor4::from_vec([b, c - ca, h, w], db).unwrap(),
    )
}
