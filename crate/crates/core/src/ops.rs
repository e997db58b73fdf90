//! Forward and backward kernels on plain tensors. The autograd graph in
//! [`crate::graph`] composes these; the data pipeline reuses the resize kernel.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_len(&self, len: usize, k: usize) -> usize {
        (len + 2 * self.pad - k) / self.stride + 1
    }
}

fn im2col<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    geo: ConvGeometry,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        *out = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    geo: ConvGeometry,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    geo: ConvGeometry,
) -> Result<(usize, usize, usize)> {
    let [_, c, h, w] = x.shape();
    let [_, wc, kh, kw] = weight.shape();
    if wc != c || kh != kw {
        return Err(Error::Shape(format!(
            "conv weight {:?} does not fit input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    if h + 2 * geo.pad < kh || w + 2 * geo.pad < kw {
        return Err(Error::Shape(format!(
            "input {:?} smaller than kernel {}",
            x.shape(),
            kh
        )));
    }
    Ok((kh, geo.out_len(h, kh), geo.out_len(w, kw)))
}

fn is_pointwise(k: usize, geo: ConvGeometry) -> bool {
    k == 1 && geo.stride == 1 && geo.pad == 0
}

/// 2-d cross-correlation with a `[out, in, k, k]` kernel and optional `[1, out, 1, 1]` bias.
pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let (k, oh, ow) = conv_dims(x, weight, geo)?;
    let [n, c, h, w] = x.shape();
    let cout = weight.batch();
    let rows = c * k * k;
    let plane = oh * ow;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let pointwise = is_pointwise(k, geo);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    for i in 0..n {
        let dst = &mut out.data_mut()[i * cout * plane..(i + 1) * cout * plane];
        if pointwise {
            T::gemm(cout, rows, plane, weight.data(), false, x.item(i), false, dst, T::zero());
        } else {
            im2col(x.item(i), c, h, w, k, geo, oh, ow, &mut col);
            T::gemm(cout, rows, plane, weight.data(), false, &col, false, dst, T::zero());
        }
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dweight: Tensor<T>,
    pub dbias: Tensor<T>,
}

pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    geo: ConvGeometry,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (k, oh, ow) = conv_dims(x, weight, geo)?;
    let [n, c, h, w] = x.shape();
    let cout = weight.batch();
    dy.expect_shape([n, cout, oh, ow])?;
    let rows = c * k * k;
    let plane = oh * ow;
    let pointwise = is_pointwise(k, geo);
    let mut dweight = Tensor::zeros(weight.shape());
    let mut dbias = Tensor::zeros([1, cout, 1, 1]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = vec![T::zero(); if pointwise { 0 } else { rows * plane }];
    let mut dcol = vec![T::zero(); if pointwise || !need_dx { 0 } else { rows * plane }];
    for i in 0..n {
        let g = dy.item(i);
        for (co, chunk) in g.chunks(plane).enumerate() {
            dbias.data_mut()[co] += chunk.iter().copied().sum();
        }
        let cols: &[T] = if pointwise {
            x.item(i)
        } else {
            im2col(x.item(i), c, h, w, k, geo, oh, ow, &mut col);
            &col
        };
        // dW += dY * col^T
        T::gemm(cout, plane, rows, g, false, cols, true, dweight.data_mut(), T::one());
        if let Some(dx) = dx.as_mut() {
            let len = c * h * w;
            let dst = &mut dx.data_mut()[i * len..(i + 1) * len];
            if pointwise {
                T::gemm(rows, cout, plane, weight.data(), true, g, false, dst, T::zero());
            } else {
                T::gemm(rows, cout, plane, weight.data(), true, g, false, &mut dcol, T::zero());
                col2im(&dcol, c, h, w, k, geo, oh, ow, dst);
            }
        }
    }
    Ok(ConvGrads { dx, dweight, dbias })
}

/// Per-axis bilinear sampling table (half-pixel centres, no corner alignment).
#[derive(Clone, Debug)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<f64>,
}

impl Taps {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut w_hi = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
            lo.push(i0);
            hi.push(i1);
            w_hi.push(src - i0 as f64);
        }
        Self { lo, hi, w_hi }
    }
}

/// Bilinear resize of every plane to `out_h x out_w`.
pub fn resize_bilinear<T: Float>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "cannot resize {:?} to {}x{}",
            x.shape(),
            out_h,
            out_w
        )));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let ty = Taps::new(h, out_h);
    let tx = Taps::new(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let mut row = vec![T::zero(); w];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * out_h * out_w..(p + 1) * out_h * out_w];
        for oy in 0..out_h {
            let a = T::c(1.0 - ty.w_hi[oy]);
            let b = T::c(ty.w_hi[oy]);
            let r0 = &src[ty.lo[oy] * w..(ty.lo[oy] + 1) * w];
            let r1 = &src[ty.hi[oy] * w..(ty.hi[oy] + 1) * w];
            for ix in 0..w {
                row[ix] = a * r0[ix] + b * r1[ix];
            }
            for ox in 0..out_w {
                let wb = T::c(tx.w_hi[ox]);
                dst[oy * out_w + ox] = (T::one() - wb) * row[tx.lo[ox]] + wb * row[tx.hi[ox]];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`resize_bilinear`]: scatters `dy` back to an `in_h x in_w` grid.
pub fn resize_bilinear_backward<T: Float>(
    dy: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Tensor<T> {
    let [n, c, out_h, out_w] = dy.shape();
    if (out_h, out_w) == (in_h, in_w) {
        return dy.clone();
    }
    let ty = Taps::new(in_h, out_h);
    let tx = Taps::new(in_w, out_w);
    let mut dx = Tensor::zeros([n, c, in_h, in_w]);
    let mut row = vec![T::zero(); in_w];
    for p in 0..n * c {
        let g = &dy.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut dx.data_mut()[p * in_h * in_w..(p + 1) * in_h * in_w];
        for oy in 0..out_h {
            row.fill(T::zero());
            for ox in 0..out_w {
                let v = g[oy * out_w + ox];
                let wb = T::c(tx.w_hi[ox]);
                row[tx.lo[ox]] += (T::one() - wb) * v;
                row[tx.hi[ox]] += wb * v;
            }
            let a = T::c(1.0 - ty.w_hi[oy]);
            let b = T::c(ty.w_hi[oy]);
            let (lo, hi) = (ty.lo[oy], ty.hi[oy]);
            for ix in 0..in_w {
                dst[lo * in_w + ix] += a * row[ix];
                dst[hi * in_w + ix] += b * row[ix];
            }
        }
    }
    dx
}

/// Grouped channel max: output channel `j` is the elementwise max over
/// input channels `j*g .. j*g + g - 1` where `g = n / m`.
///
/// Returns the pooled tensor and, per output element, the winning input channel.
pub fn channel_pool<T: Float>(x: &Tensor<T>, m: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = x.shape();
    if m == 0 || c % m != 0 {
        return Err(Error::Invalid(format!(
            "channel pooling target {} does not divide {} channels",
            m, c
        )));
    }
    let group = c / m;
    let hw = h * w;
    let mut out = Tensor::zeros([n, m, h, w]);
    let mut arg = vec![0u32; n * m * hw];
    for i in 0..n {
        for j in 0..m {
            let base = i * m * hw + j * hw;
            let first = j * group;
            out.data_mut()[base..base + hw].copy_from_slice(x.plane_slice(i, first));
            arg[base..base + hw].fill(first as u32);
            for k in 1..group {
                let src = x.plane_slice(i, first + k);
                let dst = &mut out.data_mut()[base..base + hw];
                for p in 0..hw {
                    if src[p] > dst[p] {
                        dst[p] = src[p];
                        arg[base + p] = (first + k) as u32;
                    }
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn channel_pool_backward<T: Float>(
    dy: &Tensor<T>,
    arg: &[u32],
    in_channels: usize,
) -> Tensor<T> {
    let [n, m, h, w] = dy.shape();
    let hw = h * w;
    let mut dx = Tensor::zeros([n, in_channels, h, w]);
    for i in 0..n {
        for j in 0..m {
            let base = i * m * hw + j * hw;
            for p in 0..hw {
                let c = arg[base + p] as usize;
                let at = (i * in_channels + c) * hw + p;
                dx.data_mut()[at] += dy.data()[base + p];
            }
        }
    }
    dx
}

/// Spatial max pooling with implicit `-inf` padding. Returns flat argmax indices into `x`.
pub fn max_pool2d<T: Float>(
    x: &Tensor<T>,
    k: usize,
    geo: ConvGeometry,
) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = x.shape();
    let oh = geo.out_len(h, k);
    let ow = geo.out_len(w, k);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    let mut o = 0;
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_at = base;
                for ky in 0..k {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let at = base + iy as usize * w + ix as usize;
                        if x.data()[at] > best {
                            best = x.data()[at];
                            best_at = at;
                        }
                    }
                }
                out.data_mut()[o] = best;
                arg[o] = best_at;
                o += 1;
            }
        }
    }
    (out, arg)
}

#[inline]
pub fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Normalisation statistics produced by a batch-norm forward pass.
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var_unbiased: Vec<T>,
}

/// Per-channel normalisation. With `stats = None` the batch statistics are used
/// (training); otherwise the given `(mean, var)` running statistics.
pub fn batch_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: Option<(&[T], &[T])>,
    eps: T,
) -> (Tensor<T>, BatchNormCache<T>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let count = n * hw;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut unbiased = vec![T::zero(); c];
    match stats {
        Some((m, v)) => {
            mean.copy_from_slice(m);
            var.copy_from_slice(v);
        }
        None => {
            for ch in 0..c {
                let mut s = T::zero();
                for i in 0..n {
                    s += x.plane_slice(i, ch).iter().copied().sum();
                }
                let mu = s / T::c(count as f64);
                let mut sq = T::zero();
                for i in 0..n {
                    for &v in x.plane_slice(i, ch) {
                        let d = v - mu;
                        sq += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / T::c(count as f64);
                unbiased[ch] = if count > 1 {
                    sq / T::c((count - 1) as f64)
                } else {
                    var[ch]
                };
            }
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let start = (i * c + ch) * hw;
            let src = x.plane_slice(i, ch);
            for p in 0..hw {
                let xh = (src[p] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[start + p] = xh;
                y.data_mut()[start + p] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (
        y,
        BatchNormCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: unbiased,
        },
    )
}

/// Gradients `(dx, dgamma, dbeta)` of [`batch_norm`]. `batch_stats` selects the
/// training-mode derivative (statistics depend on `x`).
pub fn batch_norm_backward<T: Float>(
    dy: &Tensor<T>,
    gamma: &[T],
    cache: &BatchNormCache<T>,
    batch_stats: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = dy.shape();
    let hw = h * w;
    let count = T::c((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let g = dy.plane_slice(i, ch);
            let xh = cache.xhat.plane_slice(i, ch);
            for p in 0..hw {
                dgamma[ch] += g[p] * xh[p];
                dbeta[ch] += g[p];
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    for i in 0..n {
        for ch in 0..c {
            let start = (i * c + ch) * hw;
            let g = dy.plane_slice(i, ch);
            let xh = cache.xhat.plane_slice(i, ch);
            let scale = gamma[ch] * cache.inv_std[ch];
            for p in 0..hw {
                dx.data_mut()[start + p] = if batch_stats {
                    scale * (g[p] - dbeta[ch] / count - xh[p] * dgamma[ch] / count)
                } else {
                    scale * g[p]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
