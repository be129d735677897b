//! Forward and backward kernels for every differentiable operation.
//!
//! All functions are pure: outputs depend only on the explicit arguments, and
//! reductions run in a fixed order so results are bit-identical across runs.

use crate::error::{Error, Result};

use super::{Scalar, Shape, Tensor};

/// Spatial padding mode for convolutions.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Padding {
    /// Output spatial size equals ceil(input / stride).
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

fn conv_axis(in_len: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = in_len.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(in_len);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if in_len < k {
                return Err(Error::shape(format!(
                    "valid convolution needs input >= kernel, got {in_len} < {k}"
                )));
            }
            Ok(((in_len - k) / stride + 1, 0))
        }
    }
}

fn conv_check<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
) -> Result<()> {
    if stride == 0 {
        return Err(Error::argument("convolution stride must be >= 1"));
    }
    let (xs, ws) = (x.shape(), w.shape());
    if ws.c != xs.c {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {} channels, weights expect {}",
            xs.c, ws.c
        )));
    }
    if let Some(b) = bias {
        if b.len() != ws.n {
            return Err(Error::shape(format!(
                "conv2d bias length {} does not match {} output channels",
                b.len(),
                ws.n
            )));
        }
    }
    Ok(())
}

/// 2D convolution. Weights are laid out (out_ch, in_ch, kh, kw).
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    conv_check(x, w, bias, stride)?;
    let (xs, ws) = (x.shape(), w.shape());
    let (kh, kw) = (ws.h, ws.w);
    let (oh, pad_t) = conv_axis(xs.h, kh, stride, padding)?;
    let (ow, pad_l) = conv_axis(xs.w, kw, stride, padding)?;
    let os = Shape::new(xs.n, ws.n, oh, ow);

    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); os.numel()];

    for n in 0..xs.n {
        for oc in 0..ws.n {
            let plane = &mut out[os.idx(n, oc, 0, 0)..os.idx(n, oc, 0, 0) + oh * ow];
            if let Some(b) = bias {
                plane.fill(b[oc]);
            }
            for ic in 0..xs.c {
                let x_plane = &xd[xs.idx(n, ic, 0, 0)..xs.idx(n, ic, 0, 0) + xs.h * xs.w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[ws.idx(oc, ic, ky, kx)];
                        if wv == T::zero() {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad_t as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * xs.w..iy as usize * xs.w + xs.w];
                            let o_row = &mut plane[oy * ow..oy * ow + ow];
                            if stride == 1 {
                                let d = kx as isize - pad_l as isize;
                                let lo = (-d).max(0) as usize;
                                let hi = ow.min((xs.w as isize - d).max(0) as usize);
                                if lo >= hi {
                                    continue;
                                }
                                let src = &x_row[(lo as isize + d) as usize
                                    ..(lo as isize + d) as usize + (hi - lo)];
                                for (o, &v) in o_row[lo..hi].iter_mut().zip(src) {
                                    *o += wv * v;
                                }
                            } else {
                                for (ox, o) in o_row.iter_mut().enumerate() {
                                    let ix = (ox * stride + kx) as isize - pad_l as isize;
                                    if ix >= 0 && ix < xs.w as isize {
                                        *o += wv * x_row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(os, out)
}

/// Gradients of `conv2d` with respect to input, weights, and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (xs, ws, gs) = (x.shape(), w.shape(), grad_out.shape());
    let (kh, kw) = (ws.h, ws.w);
    let (_, pad_t) = conv_axis(xs.h, kh, stride, padding).expect("shape checked in forward");
    let (_, pad_l) = conv_axis(xs.w, kw, stride, padding).expect("shape checked in forward");
    let (oh, ow) = (gs.h, gs.w);

    let xd = x.data();
    let wd = w.data();
    let gd = grad_out.data();
    let mut dx = vec![T::zero(); xs.numel()];
    let mut dw = vec![T::zero(); ws.numel()];
    let mut db = vec![T::zero(); ws.n];

    for n in 0..xs.n {
        for oc in 0..ws.n {
            let g_plane = &gd[gs.idx(n, oc, 0, 0)..gs.idx(n, oc, 0, 0) + oh * ow];
            let mut bias_acc = T::zero();
            for &g in g_plane {
                bias_acc += g;
            }
            db[oc] += bias_acc;

            for ic in 0..xs.c {
                let x_plane = &xd[xs.idx(n, ic, 0, 0)..xs.idx(n, ic, 0, 0) + xs.h * xs.w];
                let dx_base = xs.idx(n, ic, 0, 0);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ws.idx(oc, ic, ky, kx);
                        let wv = wd[widx];
                        let mut w_acc = T::zero();
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad_t as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let row_off = iy as usize * xs.w;
                            let g_row = &g_plane[oy * ow..oy * ow + ow];
                            if stride == 1 {
                                let d = kx as isize - pad_l as isize;
                                let lo = (-d).max(0) as usize;
                                let hi = ow.min((xs.w as isize - d).max(0) as usize);
                                if lo >= hi {
                                    continue;
                                }
                                let start = row_off + (lo as isize + d) as usize;
                                let x_row = &x_plane[start..start + (hi - lo)];
                                for (&g, &v) in g_row[lo..hi].iter().zip(x_row) {
                                    w_acc += g * v;
                                }
                                let dst = &mut dx[dx_base + row_off + (lo as isize + d) as usize
                                    ..dx_base + row_off + (lo as isize + d) as usize + (hi - lo)];
                                for (d_el, &g) in dst.iter_mut().zip(&g_row[lo..hi]) {
                                    *d_el += wv * g;
                                }
                            } else {
                                for (ox, &g) in g_row.iter().enumerate() {
                                    let ix = (ox * stride + kx) as isize - pad_l as isize;
                                    if ix >= 0 && ix < xs.w as isize {
                                        w_acc += g * x_plane[row_off + ix as usize];
                                        dx[dx_base + row_off + ix as usize] += wv * g;
                                    }
                                }
                            }
                        }
                        dw[widx] += w_acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Element-wise max(x, 0).
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    x.data()
        .iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

/// Element-wise logistic function, computed without overflowing exp.
pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

pub fn sigmoid_backward<T: Scalar>(out: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    out.data()
        .iter()
        .zip(grad_out)
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect()
}

/// Per-pixel softmax across the channel axis, stabilised by max subtraction.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let xd = x.data();
    let mut out = vec![T::zero(); s.numel()];
    let plane = s.h * s.w;
    for n in 0..s.n {
        for p in 0..plane {
            let base = n * s.c * plane + p;
            let mut m = xd[base];
            for c in 1..s.c {
                let v = xd[base + c * plane];
                if v > m {
                    m = v;
                }
            }
            let mut sum = T::zero();
            for c in 0..s.c {
                let e = (xd[base + c * plane] - m).exp();
                out[base + c * plane] = e;
                sum += e;
            }
            for c in 0..s.c {
                out[base + c * plane] /= sum;
            }
        }
    }
    Tensor::new(s, out).expect("shape preserved")
}

pub fn softmax_channels_backward<T: Scalar>(out: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    let s = out.shape();
    let od = out.data();
    let mut dx = vec![T::zero(); s.numel()];
    let plane = s.h * s.w;
    for n in 0..s.n {
        for p in 0..plane {
            let base = n * s.c * plane + p;
            let mut dot = T::zero();
            for c in 0..s.c {
                let i = base + c * plane;
                dot += grad_out[i] * od[i];
            }
            for c in 0..s.c {
                let i = base + c * plane;
                dx[i] = od[i] * (grad_out[i] - dot);
            }
        }
    }
    dx
}

/// Per-channel batch statistics captured during a training-mode pass.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn bn_check<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<()> {
    let c = x.shape().c;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "batchnorm expects gamma/beta of length {c}, got {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Training-mode batch normalization: normalizes each channel over n*h*w
/// using batch statistics, which are also returned for the backward pass
/// and for the running-statistics update.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, BnStats<T>)> {
    bn_check(x, gamma, beta)?;
    let s = x.shape();
    let xd = x.data();
    let plane = s.h * s.w;
    let count = T::of_f64((s.n * plane) as f64);

    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for &v in &xd[base..base + plane] {
                acc += v;
            }
        }
        let m = acc / count;
        let mut vacc = T::zero();
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for &v in &xd[base..base + plane] {
                let d = v - m;
                vacc += d * d;
            }
        }
        mean[c] = m;
        var[c] = vacc / count;
    }

    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let inv = T::one() / (var[c] + eps).sqrt();
            let base = (n * s.c + c) * plane;
            for i in 0..plane {
                out[base + i] = gamma[c] * (xd[base + i] - mean[c]) * inv + beta[c];
            }
        }
    }
    Ok((Tensor::new(s, out)?, BnStats { mean, var }))
}

/// Inference-mode batch normalization using running statistics.
pub fn batchnorm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    bn_check(x, gamma, beta)?;
    let s = x.shape();
    let xd = x.data();
    let plane = s.h * s.w;
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let inv = T::one() / (running_var[c] + eps).sqrt();
            let base = (n * s.c + c) * plane;
            for i in 0..plane {
                out[base + i] = gamma[c] * (xd[base + i] - running_mean[c]) * inv + beta[c];
            }
        }
    }
    Tensor::new(s, out)
}

/// Gradients of training-mode batch normalization through the batch
/// statistics. Returns (dx, dgamma, dbeta).
pub fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    stats: &BnStats<T>,
    eps: T,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let xd = x.data();
    let plane = s.h * s.w;
    let count = T::of_f64((s.n * plane) as f64);

    let mut dx = vec![T::zero(); s.numel()];
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];

    for c in 0..s.c {
        let inv = T::one() / (stats.var[c] + eps).sqrt();
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for i in 0..plane {
                let xhat = (xd[base + i] - stats.mean[c]) * inv;
                let g = grad_out[base + i];
                sum_g += g;
                sum_gx += g * xhat;
            }
        }
        dbeta[c] = sum_g;
        dgamma[c] = sum_gx;
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for i in 0..plane {
                let xhat = (xd[base + i] - stats.mean[c]) * inv;
                let g = grad_out[base + i] * gamma[c];
                dx[base + i] = inv * (g - (sum_g * gamma[c] + xhat * sum_gx * gamma[c]) / count);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and the flat
/// input index of each window maximum (ties resolve to the first in scan
/// order), which the backward pass routes gradients through.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2 requires even spatial dimensions, got {}x{}",
            s.h, s.w
        )));
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let xd = x.data();
    let mut out = vec![T::zero(); os.numel()];
    let mut arg = vec![0u32; os.numel()];
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = xd[s.idx(n, c, oy * 2, ox * 2)];
                    let mut best_i = s.idx(n, c, oy * 2, ox * 2);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = s.idx(n, c, oy * 2 + dy, ox * 2 + dx);
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    out[o] = best;
                    arg[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    Ok((Tensor::new(os, out)?, arg))
}

pub fn maxpool2_backward<T: Scalar>(in_shape: Shape, argmax: &[u32], grad_out: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); in_shape.numel()];
    for (&a, &g) in argmax.iter().zip(grad_out) {
        dx[a as usize] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling: every pixel becomes a 2x2 block.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    Tensor::from_fn(os, |n, c, y, xx| x.at(n, c, y / 2, xx / 2))
}

pub fn upsample2_backward<T: Scalar>(in_shape: Shape, grad_out: &[T]) -> Vec<T> {
    let os = Shape::new(in_shape.n, in_shape.c, in_shape.h * 2, in_shape.w * 2);
    let mut dx = vec![T::zero(); in_shape.numel()];
    for n in 0..in_shape.n {
        for c in 0..in_shape.c {
            for y in 0..os.h {
                for x in 0..os.w {
                    dx[in_shape.idx(n, c, y / 2, x / 2)] += grad_out[os.idx(n, c, y, x)];
                }
            }
        }
    }
    dx
}

/// Channel concatenation; `a`'s channels come first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::shape(format!(
            "concat_channels: incompatible shapes {sa} and {sb}"
        )));
    }
    let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let plane = sa.h * sa.w;
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..sa.n {
        out.extend_from_slice(&a.data()[n * sa.c * plane..(n + 1) * sa.c * plane]);
        out.extend_from_slice(&b.data()[n * sb.c * plane..(n + 1) * sb.c * plane]);
    }
    Tensor::new(os, out)
}

/// Splits an upstream gradient of a concat back into the two channel ranges.
pub fn concat_channels_backward<T: Scalar>(
    a_shape: Shape,
    b_shape: Shape,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let plane = a_shape.h * a_shape.w;
    let mut da = Vec::with_capacity(a_shape.numel());
    let mut db = Vec::with_capacity(b_shape.numel());
    let step = (a_shape.c + b_shape.c) * plane;
    for n in 0..a_shape.n {
        let base = n * step;
        da.extend_from_slice(&grad_out[base..base + a_shape.c * plane]);
        db.extend_from_slice(&grad_out[base + a_shape.c * plane..base + step]);
    }
    (da, db)
}

/// Element-wise sum of two identically shaped tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "add: incompatible shapes {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

/// Element-wise product. `b` may have a single channel, in which case it is
/// broadcast across all of `a`'s channels.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        return Tensor::new(sa, data);
    }
    if sb.c == 1 && sa.n == sb.n && sa.h == sb.h && sa.w == sb.w {
        let plane = sa.h * sa.w;
        let mut out = vec![T::zero(); sa.numel()];
        for n in 0..sa.n {
            let b_plane = &b.data()[n * plane..(n + 1) * plane];
            for c in 0..sa.c {
                let base = (n * sa.c + c) * plane;
                for i in 0..plane {
                    out[base + i] = a.data()[base + i] * b_plane[i];
                }
            }
        }
        return Tensor::new(sa, out);
    }
    Err(Error::shape(format!(
        "mul: incompatible shapes {sa} and {sb}"
    )))
}

/// Gradients of `mul` for both operands, reducing over broadcast channels.
pub fn mul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        let da = grad_out.iter().zip(b.data()).map(|(&g, &y)| g * y).collect();
        let db = grad_out.iter().zip(a.data()).map(|(&g, &x)| g * x).collect();
        return (da, db);
    }
    // channel-broadcast case
    let plane = sa.h * sa.w;
    let mut da = vec![T::zero(); sa.numel()];
    let mut db = vec![T::zero(); sb.numel()];
    for n in 0..sa.n {
        let b_plane = &b.data()[n * plane..(n + 1) * plane];
        for c in 0..sa.c {
            let base = (n * sa.c + c) * plane;
            for i in 0..plane {
                da[base + i] = grad_out[base + i] * b_plane[i];
                db[n * plane + i] += grad_out[base + i] * a.data()[base + i];
            }
        }
    }
    (da, db)
}

/// Sum of all elements as a (1,1,1,1) tensor.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for &v in x.data() {
        acc += v;
    }
    Tensor::scalar(acc)
}

/// Multiplies every element by a constant.
pub fn scale<T: Scalar>(x: &Tensor<T>, k: T) -> Tensor<T> {
    x.map(|v| v * k)
}
