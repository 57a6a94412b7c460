//! Forward and backward kernels for every layer primitive.
//!
//! Everything here is a pure function of its arguments. The tape in
//! [`super::graph`] records calls to these and replays the `*_backward`
//! partners in reverse order.

use rayon::prelude::*;

use super::Tensor;
use crate::{Error, Result};

/// Accumulation strategy for the heavy kernels.
///
/// `Exact` runs single-threaded. `Fast` spreads output channels over the
/// rayon pool; each output element still sums its terms in the same order, so
/// both modes agree bit for bit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NumericMode {
    #[default]
    Exact,
    Fast,
}

fn for_each_chunk<F>(data: &mut [f64], chunk: usize, mode: NumericMode, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    match mode {
        NumericMode::Exact => data
            .chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
        NumericMode::Fast => data
            .par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}

// ── convolution ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = input.chw()?;
        let (c_out, kc, k) = match kernel.shape()[..] {
            [o, i, kh, kw] if kh == kw => (o, i, kh),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be (out, in, k, k), got {:?}", kernel.shape()),
                ))
            }
        };
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels, kernel expects {kc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let out_dim = |n: usize| {
            (n + 2 * pad)
                .checked_sub(k)
                .map(|r| r / stride + 1)
                .ok_or_else(|| {
                    Error::shape(
                        "conv2d",
                        format!("non-positive output size: input {n}, pad {pad}, kernel {k}"),
                    )
                })
        };
        let oh = out_dim(h)?;
        let ow = out_dim(w)?;
        Ok(ConvGeometry {
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Output indices whose input tap `offset` lands inside `0..in_len`.
    fn valid(&self, offset: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let start = if p > offset { (p - offset).div_ceil(s) } else { 0 };
        if in_len + p <= offset {
            return (0, 0);
        }
        let end = ((in_len - 1 + p - offset) / s + 1).min(out_len);
        (start.min(end), end)
    }
}

/// Zero-padded cross-correlation plus per-output-channel bias.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    conv2d_with(input, kernel, bias, stride, pad, NumericMode::Exact)
}

pub fn conv2d_with(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    mode: NumericMode,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, stride, pad)?;
    if bias.shape() != [g.c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias must be [{}], got {:?}", g.c_out, bias.shape()),
        ));
    }
    let (x, wt, b) = (input.data(), kernel.data(), bias.data());
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    let mut out = vec![0.0; g.c_out * ohw];
    for_each_chunk(&mut out, ohw, mode, |o, out_o| {
        out_o.fill(b[o]);
        for c in 0..g.c_in {
            let xin = &x[c * hw..(c + 1) * hw];
            let wk = &wt[(o * g.c_in + c) * kk..(o * g.c_in + c + 1) * kk];
            for ky in 0..g.k {
                let (y0, y1) = g.valid(ky, g.h, g.oh);
                for kx in 0..g.k {
                    let wv = wk[ky * g.k + kx];
                    let (x0, x1) = g.valid(kx, g.w, g.ow);
                    for y in y0..y1 {
                        let iy = y * g.stride + ky - g.pad;
                        let in_row = &xin[iy * g.w..(iy + 1) * g.w];
                        let out_row = &mut out_o[y * g.ow..(y + 1) * g.ow];
                        if g.stride == 1 {
                            let off = x0 + kx - g.pad;
                            for (ov, iv) in out_row[x0..x1].iter_mut().zip(&in_row[off..]) {
                                *ov += wv * iv;
                            }
                        } else {
                            for (xo, ov) in out_row.iter_mut().enumerate().take(x1).skip(x0) {
                                *ov += wv * in_row[xo * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(&[g.c_out, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
///
/// Only the requested gradients are computed.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
    want: [bool; 3],
    mode: NumericMode,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, kernel, stride, pad)?;
    if grad_out.shape() != [g.c_out, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "gradient shape {:?} does not match output {:?}",
                grad_out.shape(),
                [g.c_out, g.oh, g.ow]
            ),
        ));
    }
    let (x, wt, go) = (input.data(), kernel.data(), grad_out.data());
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);

    let d_input = if want[0] {
        let mut dx = vec![0.0; g.c_in * hw];
        for_each_chunk(&mut dx, hw, mode, |c, dx_c| {
            for o in 0..g.c_out {
                let g_o = &go[o * ohw..(o + 1) * ohw];
                let wk = &wt[(o * g.c_in + c) * kk..(o * g.c_in + c + 1) * kk];
                for ky in 0..g.k {
                    let (y0, y1) = g.valid(ky, g.h, g.oh);
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        let (x0, x1) = g.valid(kx, g.w, g.ow);
                        for y in y0..y1 {
                            let iy = y * g.stride + ky - g.pad;
                            let g_row = &g_o[y * g.ow..(y + 1) * g.ow];
                            let dx_row = &mut dx_c[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let off = x0 + kx - g.pad;
                                for (dv, gv) in dx_row[off..].iter_mut().zip(&g_row[x0..x1]) {
                                    *dv += wv * gv;
                                }
                            } else {
                                for (xo, gv) in g_row.iter().enumerate().take(x1).skip(x0) {
                                    dx_row[xo * g.stride + kx - g.pad] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(Tensor::new(input.shape(), dx)?)
    } else {
        None
    };

    let d_kernel = if want[1] {
        let mut dk = vec![0.0; g.c_out * g.c_in * kk];
        for_each_chunk(&mut dk, g.c_in * kk, mode, |o, dk_o| {
            let g_o = &go[o * ohw..(o + 1) * ohw];
            for c in 0..g.c_in {
                let xin = &x[c * hw..(c + 1) * hw];
                for ky in 0..g.k {
                    let (y0, y1) = g.valid(ky, g.h, g.oh);
                    for kx in 0..g.k {
                        let (x0, x1) = g.valid(kx, g.w, g.ow);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let iy = y * g.stride + ky - g.pad;
                            let in_row = &xin[iy * g.w..(iy + 1) * g.w];
                            let g_row = &g_o[y * g.ow..(y + 1) * g.ow];
                            if g.stride == 1 {
                                let off = x0 + kx - g.pad;
                                for (gv, iv) in g_row[x0..x1].iter().zip(&in_row[off..]) {
                                    acc += gv * iv;
                                }
                            } else {
                                for (xo, gv) in g_row.iter().enumerate().take(x1).skip(x0) {
                                    acc += gv * in_row[xo * g.stride + kx - g.pad];
                                }
                            }
                        }
                        dk_o[c * kk + ky * g.k + kx] = acc;
                    }
                }
            }
        });
        Some(Tensor::new(kernel.shape(), dk)?)
    } else {
        None
    };

    let d_bias = if want[2] {
        let db = (0..g.c_out)
            .map(|o| go[o * ohw..(o + 1) * ohw].iter().sum())
            .collect();
        Some(Tensor::new(&[g.c_out], db)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    })
}

// ── activations ──────────────────────────────────────────────────────

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Tensor {
    zip_map(input, grad, |x, g| if x > 0.0 { g } else { 0.0 })
}

pub fn check_slope(slope: f64) -> Result<()> {
    if slope > 0.0 && slope < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "leaky relu slope must lie in (0, 1), got {slope}"
        )))
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    check_slope(slope)?;
    Ok(x.map(|v| if v >= 0.0 { v } else { slope * v }))
}

pub fn leaky_relu_backward(input: &Tensor, grad: &Tensor, slope: f64) -> Tensor {
    zip_map(input, grad, |x, g| if x >= 0.0 { g } else { slope * g })
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward(output: &Tensor, grad: &Tensor) -> Tensor {
    zip_map(output, grad, |y, g| g * y * (1.0 - y))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shapes checked by caller")
}

// ── normalization ────────────────────────────────────────────────────

/// Saved forward state for [`channel_norm_backward`].
#[derive(Clone, Debug)]
pub struct NormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-channel spatial normalization followed by a learned affine.
pub fn channel_norm(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    channel_norm_forward(x, gain, shift, eps).map(|(y, _)| y)
}

pub fn channel_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let (c, h, w) = x.chw()?;
    if gain.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape(
            "channel_norm",
            format!(
                "gain/shift must be [{c}], got {:?} / {:?}",
                gain.shape(),
                shift.shape()
            ),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "channel_norm eps must be positive, got {eps}"
        )));
    }
    let n = (h * w) as f64;
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = x.channel(ch);
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        let (g, b) = (gain.data()[ch], shift.data()[ch]);
        let range = ch * h * w..(ch + 1) * h * w;
        for ((o, xh), v) in out[range.clone()]
            .iter_mut()
            .zip(&mut xhat[range])
            .zip(plane)
        {
            *xh = (v - mean) * inv;
            *o = g * *xh + b;
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        NormCache {
            normalized: Tensor::new(x.shape(), xhat)?,
            inv_std,
        },
    ))
}

/// Returns `(d_input, d_gain, d_shift)`.
pub fn channel_norm_backward(
    cache: &NormCache,
    gain: &Tensor,
    grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, w) = grad.chw()?;
    let hw = h * w;
    let n = hw as f64;
    let xhat = cache.normalized.data();
    let mut dx = vec![0.0; grad.numel()];
    let mut dgain = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for ch in 0..c {
        let g = grad.channel(ch);
        let xh = &xhat[ch * hw..(ch + 1) * hw];
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        dshift[ch] = sum_g;
        dgain[ch] = sum_gx;
        let scale = gain.data()[ch] * cache.inv_std[ch] / n;
        for ((d, gv), xv) in dx[ch * hw..(ch + 1) * hw].iter_mut().zip(g).zip(xh) {
            *d = scale * (n * gv - sum_g - xv * sum_gx);
        }
    }
    Ok((
        Tensor::new(grad.shape(), dx)?,
        Tensor::new(&[c], dgain)?,
        Tensor::new(&[c], dshift)?,
    ))
}

// ── elementwise ──────────────────────────────────────────────────────

/// Whether `b` combines with `a` elementwise (`false`) or as a one-channel
/// map broadcast over `a`'s channels (`true`).
fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() == b.shape() {
        return Ok(false);
    }
    match (a.shape(), b.shape()) {
        ([_, h, w], [1, bh, bw]) if h == bh && w == bw => Ok(true),
        _ => Err(Error::shape(
            op,
            format!("cannot combine {:?} with {:?}", a.shape(), b.shape()),
        )),
    }
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let bc = broadcast_kind(op, a, b)?;
    let bd = b.data();
    let data = if bc {
        let hw = bd.len();
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % hw]))
            .collect()
    } else {
        a.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    };
    Tensor::new(a.shape(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y)
}

/// Sum a full-shape gradient down to `b`'s shape (identity unless broadcast).
fn reduce_to(grad: Vec<f64>, a_shape: &[usize], b_shape: &[usize]) -> Result<Tensor> {
    if a_shape == b_shape {
        return Tensor::new(b_shape, grad);
    }
    let hw: usize = b_shape.iter().product();
    let mut out = vec![0.0; hw];
    for chunk in grad.chunks(hw) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    Tensor::new(b_shape, out)
}

pub fn add_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((
        grad.clone(),
        reduce_to(grad.data().to_vec(), a.shape(), b.shape())?,
    ))
}

pub fn mul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let da = binary("mul", grad, b, |g, y| g * y)?;
    let gb: Vec<f64> = grad.data().iter().zip(a.data()).map(|(g, x)| g * x).collect();
    Ok((da, reduce_to(gb, a.shape(), b.shape())?))
}

pub fn scale(x: &Tensor, factor: f64) -> Tensor {
    x.map(|v| v * factor)
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let (_, h, w) = first.chw()?;
    let mut channels = 0;
    let mut data = Vec::new();
    for p in parts {
        let (c, ph, pw) = p.chw()?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("spatial size {ph}x{pw} differs from {h}x{w}"),
            ));
        }
        channels += c;
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[channels, h, w], data)
}

/// Split a concatenated gradient back into per-part gradients.
pub fn concat_backward(part_channels: &[usize], grad: &Tensor) -> Result<Vec<Tensor>> {
    let mut offset = 0;
    part_channels
        .iter()
        .map(|&c| {
            let t = grad.slice_channels(offset, c);
            offset += c;
            t
        })
        .collect()
}

// ── directional recurrence ───────────────────────────────────────────

/// Direction of travel of a recurrent sweep.
///
/// `Right` visits each row from column 0 towards the last column, so the
/// state at a pixel summarizes everything to its left; the others follow the
/// same convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Left,
        Direction::Right,
        Direction::Up,
        Direction::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    /// `(number of lines, line length)` for an `h x w` plane.
    fn lines(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Direction::Left | Direction::Right => (h, w),
            Direction::Up | Direction::Down => (w, h),
        }
    }

    /// Flat pixel index of step `t` along line `line`.
    #[inline]
    fn pos(self, line: usize, t: usize, h: usize, w: usize) -> usize {
        match self {
            Direction::Right => line * w + t,
            Direction::Left => line * w + (w - 1 - t),
            Direction::Down => t * w + line,
            Direction::Up => (h - 1 - t) * w + line,
        }
    }
}

fn check_sweep(x: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.chw()?;
    if weight.shape() != [c, c] {
        return Err(Error::shape(
            "directional_sweep",
            format!(
                "recurrent weight must be [{c}, {c}], got {:?}",
                weight.shape()
            ),
        ));
    }
    Ok((c, h, w))
}

/// ReLU recurrence along one direction:
/// `h_1 = relu(x_1)`, `h_t = relu(x_t + W h_(t-1))`, mixing channels per pixel.
pub fn directional_sweep(x: &Tensor, weight: &Tensor, dir: Direction) -> Result<Tensor> {
    let (c, h, w) = check_sweep(x, weight)?;
    let hw = h * w;
    let (xd, wt) = (x.data(), weight.data());
    let (n_lines, len) = dir.lines(h, w);
    let mut out = vec![0.0; x.numel()];
    for line in 0..n_lines {
        for t in 0..len {
            let p = dir.pos(line, t, h, w);
            let prev = (t > 0).then(|| dir.pos(line, t - 1, h, w));
            for i in 0..c {
                let mut s = xd[i * hw + p];
                if let Some(q) = prev {
                    for j in 0..c {
                        s += wt[i * c + j] * out[j * hw + q];
                    }
                }
                out[i * hw + p] = s.max(0.0);
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Returns `(d_input, d_weight)` given the forward output.
pub fn directional_sweep_backward(
    output: &Tensor,
    weight: &Tensor,
    dir: Direction,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = check_sweep(output, weight)?;
    let hw = h * w;
    let (hd, wt, gd) = (output.data(), weight.data(), grad.data());
    let (n_lines, len) = dir.lines(h, w);
    let mut dx = vec![0.0; output.numel()];
    let mut dw = vec![0.0; c * c];
    let mut carry = vec![0.0; c];
    let mut dpre = vec![0.0; c];
    for line in 0..n_lines {
        carry.fill(0.0);
        for t in (0..len).rev() {
            let p = dir.pos(line, t, h, w);
            for i in 0..c {
                let dh = gd[i * hw + p] + carry[i];
                dpre[i] = if hd[i * hw + p] > 0.0 { dh } else { 0.0 };
                dx[i * hw + p] = dpre[i];
            }
            carry.fill(0.0);
            if t > 0 {
                let q = dir.pos(line, t - 1, h, w);
                for i in 0..c {
                    let d = dpre[i];
                    if d == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        dw[i * c + j] += d * hd[j * hw + q];
                        carry[j] += wt[i * c + j] * d;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(output.shape(), dx)?,
        Tensor::new(&[c, c], dw)?,
    ))
}

// ── reductions used by the losses ────────────────────────────────────

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ))
    }
}

fn check_channel_weights(pred: &Tensor, weights: &[f64]) -> Result<(usize, usize)> {
    let (c, h, w) = pred.chw()?;
    if weights.len() != c {
        return Err(Error::shape(
            "l1_loss",
            format!("{} channel weights for {c} channels", weights.len()),
        ));
    }
    Ok((c, h * w))
}

/// `(1 / CHW) * sum_c weight_c * sum |target - pred|`.
pub fn weighted_l1(pred: &Tensor, target: &Tensor, weights: &[f64]) -> Result<f64> {
    same_shape("l1_loss", pred, target)?;
    let (c, hw) = check_channel_weights(pred, weights)?;
    let mut total = 0.0;
    for ch in 0..c {
        let s: f64 = pred
            .channel(ch)
            .iter()
            .zip(target.channel(ch))
            .map(|(p, t)| (t - p).abs())
            .sum();
        total += weights[ch] * s;
    }
    Ok(total / (c * hw) as f64)
}

/// Gradient of [`weighted_l1`] with respect to `pred`; the target gradient
/// is its negation.
pub fn weighted_l1_backward(
    pred: &Tensor,
    target: &Tensor,
    weights: &[f64],
    grad: f64,
) -> Result<Tensor> {
    let (_, hw) = check_channel_weights(pred, weights)?;
    let n = pred.numel() as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .enumerate()
        .map(|(i, (p, t))| {
            let sign = if p > t {
                1.0
            } else if p < t {
                -1.0
            } else {
                0.0
            };
            grad * weights[i / hw] * sign / n
        })
        .collect();
    Tensor::new(pred.shape(), data)
}

/// Mean of `(a - b)^2` over all elements.
pub fn mean_squared_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mean_squared_diff", a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64)
}

/// Sum of `(a - b)^2` over all elements.
pub fn sum_squared_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(mean_squared_diff(a, b)? * a.numel() as f64)
}

/// Softplus `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy of `sigmoid(logits)` against a constant target
/// probability, evaluated directly on the logits.
pub fn bce_with_logits(logits: &Tensor, target: f64) -> f64 {
    logits
        .data()
        .iter()
        .map(|&z| softplus(z) - z * target)
        .sum::<f64>()
        / logits.numel() as f64
}

pub fn bce_with_logits_backward(logits: &Tensor, target: f64, grad: f64) -> Tensor {
    let n = logits.numel() as f64;
    logits.map(|z| grad * (sigmoid_scalar(z) - target) / n)
}
