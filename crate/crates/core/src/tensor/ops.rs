//! Forward kernels and their gradients. Every function here is pure: outputs
//! depend only on the arguments, and evaluation order is fixed so repeated
//! calls are bit-identical.

use crate::error::{ensure, Result};

use super::{PadMode, Tensor};

/// Geometry of a 2-D convolution, resolved from shapes once.
#[derive(Debug, Clone, Copy)]
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
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn resolve(input: &[usize], kernel: &[usize], stride: usize, pad: PadMode) -> Result<Self> {
        const OP: &str = "conv2d";
        ensure!(input.len() == 4, OP, "input must be [N,Cin,H,W], got {:?}", input);
        ensure!(kernel.len() == 4, OP, "kernel must be [Cout,Cin,kh,kw], got {:?}", kernel);
        ensure!(stride > 0, OP, "stride must be positive");
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, kcin, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        ensure!(
            cin == kcin,
            OP,
            "channel axis mismatch: input axis 1 is {} but kernel axis 1 is {}",
            cin,
            kcin
        );
        let (oh, pad_top) = pad.geometry(h, kh, stride).ok_or_else(|| {
            crate::Error::contract(OP, format!("kernel height {kh} does not fit input height {h} ({pad:?})"))
        })?;
        let (ow, pad_left) = pad.geometry(w, kw, stride).ok_or_else(|| {
            crate::Error::contract(OP, format!("kernel width {kw} does not fit input width {w} ({pad:?})"))
        })?;
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad_top,
            pad_left,
        })
    }

    /// Range of output positions whose tap `k` lands inside an input axis of length `len`.
    fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
        // input index = o * stride + k - pad must lie in [0, len)
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        let hi = if len + pad > k {
            ((len + pad - k - 1) / stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: PadMode) -> Result<Tensor> {
    let g = ConvGeom::resolve(input.shape(), kernel.shape(), stride, pad)?;
    ensure!(
        bias.shape() == [g.cout],
        "conv2d",
        "bias must be [{}], got {:?}",
        g.cout,
        bias.shape()
    );
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0f32; g.n * g.cout * g.oh * g.ow];
    let plane = g.oh * g.ow;
    for n in 0..g.n {
        for co in 0..g.cout {
            let o_base = (n * g.cout + co) * plane;
            out[o_base..o_base + plane].fill(bias.data()[co]);
            for ci in 0..g.cin {
                let x_base = (n * g.cin + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = ConvGeom::valid_range(ky, g.pad_top, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = k[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        let (ox_lo, ox_hi) = ConvGeom::valid_range(kx, g.pad_left, g.stride, g.w, g.ow);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad_top;
                            let row = &x[x_base + iy * g.w..x_base + (iy + 1) * g.w];
                            let orow = &mut out[o_base + oy * g.ow..o_base + (oy + 1) * g.ow];
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * row[ox * g.stride + kx - g.pad_left];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.cout, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: PadMode,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeom::resolve(input.shape(), kernel.shape(), stride, pad)?;
    ensure!(
        grad_out.shape() == [g.n, g.cout, g.oh, g.ow],
        "conv2d_backward",
        "gradient shape {:?} does not match output [{}, {}, {}, {}]",
        grad_out.shape(),
        g.n,
        g.cout,
        g.oh,
        g.ow
    );
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut gx = vec![0.0f32; x.len()];
    let mut gk = vec![0.0f32; k.len()];
    let mut gb = vec![0.0f32; g.cout];
    let plane = g.oh * g.ow;
    for n in 0..g.n {
        for co in 0..g.cout {
            let o_base = (n * g.cout + co) * plane;
            gb[co] += go[o_base..o_base + plane].iter().sum::<f32>();
            for ci in 0..g.cin {
                let x_base = (n * g.cin + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = ConvGeom::valid_range(ky, g.pad_top, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let k_idx = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                        let wv = k[k_idx];
                        let (ox_lo, ox_hi) = ConvGeom::valid_range(kx, g.pad_left, g.stride, g.w, g.ow);
                        let mut acc = 0.0f32;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad_top;
                            let row_start = x_base + iy * g.w;
                            let grow = &go[o_base + oy * g.ow..o_base + (oy + 1) * g.ow];
                            for ox in ox_lo..ox_hi {
                                let ix = row_start + ox * g.stride + kx - g.pad_left;
                                acc += grow[ox] * x[ix];
                                gx[ix] += wv * grow[ox];
                            }
                        }
                        gk[k_idx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![g.cout], gb)?,
    ))
}

/// Half-open input window `[start, end)` feeding adaptive-pool output cell `i`.
pub fn pool_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

fn split_spatial(shape: &[usize], axes: usize, op: &'static str) -> Result<(usize, Vec<usize>)> {
    ensure!(
        shape.len() >= axes,
        op,
        "input needs at least {} axes, got shape {:?}",
        axes,
        shape
    );
    let lead: usize = shape[..shape.len() - axes].iter().product();
    Ok((lead, shape[shape.len() - axes..].to_vec()))
}

pub fn adaptive_avg_pool2d(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    const OP: &str = "adaptive_avg_pool2d";
    let (lead, hw) = split_spatial(input.shape(), 2, OP)?;
    let (h, w) = (hw[0], hw[1]);
    ensure!(out_h > 0 && out_w > 0, OP, "output extents must be positive");
    ensure!(
        out_h <= h && out_w <= w,
        OP,
        "output {}x{} exceeds input {}x{}",
        out_h,
        out_w,
        h,
        w
    );
    let x = input.data();
    let mut out = Vec::with_capacity(lead * out_h * out_w);
    for l in 0..lead {
        let base = l * h * w;
        for i in 0..out_h {
            let (r0, r1) = pool_window(i, h, out_h);
            for j in 0..out_w {
                let (c0, c1) = pool_window(j, w, out_w);
                let mut acc = 0.0f64;
                for r in r0..r1 {
                    for c in c0..c1 {
                        acc += x[base + r * w + c] as f64;
                    }
                }
                out.push((acc / ((r1 - r0) * (c1 - c0)) as f64) as f32);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let rank = shape.len();
    shape[rank - 2] = out_h;
    shape[rank - 1] = out_w;
    Tensor::new(shape, out)
}

pub fn adaptive_avg_pool2d_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (lead, hw) = split_spatial(input_shape, 2, "adaptive_avg_pool2d_backward")?;
    let (h, w) = (hw[0], hw[1]);
    let rank = grad_out.rank();
    let (out_h, out_w) = (grad_out.shape()[rank - 2], grad_out.shape()[rank - 1]);
    let go = grad_out.data();
    let mut gx = vec![0.0f32; lead * h * w];
    for l in 0..lead {
        let base = l * h * w;
        for i in 0..out_h {
            let (r0, r1) = pool_window(i, h, out_h);
            for j in 0..out_w {
                let (c0, c1) = pool_window(j, w, out_w);
                let share = go[(l * out_h + i) * out_w + j] / ((r1 - r0) * (c1 - c0)) as f32;
                for r in r0..r1 {
                    for c in c0..c1 {
                        gx[base + r * w + c] += share;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

pub fn adaptive_avg_pool1d(input: &Tensor, out_len: usize) -> Result<Tensor> {
    const OP: &str = "adaptive_avg_pool1d";
    let (lead, l) = split_spatial(input.shape(), 1, OP)?;
    let len = l[0];
    ensure!(out_len > 0, OP, "output length must be positive");
    ensure!(out_len <= len, OP, "output length {} exceeds input length {}", out_len, len);
    let x = input.data();
    let mut out = Vec::with_capacity(lead * out_len);
    for s in 0..lead {
        for i in 0..out_len {
            let (a, b) = pool_window(i, len, out_len);
            let acc: f64 = x[s * len + a..s * len + b].iter().map(|&v| v as f64).sum();
            out.push((acc / (b - a) as f64) as f32);
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = out_len;
    Tensor::new(shape, out)
}

pub fn adaptive_avg_pool1d_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (lead, l) = split_spatial(input_shape, 1, "adaptive_avg_pool1d_backward")?;
    let len = l[0];
    let out_len = *grad_out.shape().last().expect("rank >= 1");
    let go = grad_out.data();
    let mut gx = vec![0.0f32; lead * len];
    for s in 0..lead {
        for i in 0..out_len {
            let (a, b) = pool_window(i, len, out_len);
            let share = go[s * out_len + i] / (b - a) as f32;
            for v in &mut gx[s * len + a..s * len + b] {
                *v += share;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "linear";
    ensure!(input.rank() == 2, OP, "input must be [N,F], got {:?}", input.shape());
    ensure!(weight.rank() == 2, OP, "weight must be [C,F], got {:?}", weight.shape());
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let c = weight.shape()[0];
    ensure!(
        weight.shape()[1] == f,
        OP,
        "feature axis mismatch: input has {} features, weight expects {}",
        f,
        weight.shape()[1]
    );
    ensure!(bias.shape() == [c], OP, "bias must be [{}], got {:?}", c, bias.shape());
    let (x, wt, b) = (input.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(n * c);
    for row in x.chunks_exact(f) {
        for (ci, wrow) in wt.chunks_exact(f).enumerate() {
            let dot: f32 = row.iter().zip(wrow).map(|(a, b)| a * b).sum();
            out.push(dot + b[ci]);
        }
    }
    Tensor::new(vec![n, c], out)
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let c = weight.shape()[0];
    ensure!(
        grad_out.shape() == [n, c],
        "linear_backward",
        "gradient shape {:?} does not match output [{}, {}]",
        grad_out.shape(),
        n,
        c
    );
    let (x, wt, go) = (input.data(), weight.data(), grad_out.data());
    let mut gx = vec![0.0f32; n * f];
    let mut gw = vec![0.0f32; c * f];
    let mut gb = vec![0.0f32; c];
    for ni in 0..n {
        let xrow = &x[ni * f..(ni + 1) * f];
        for ci in 0..c {
            let g = go[ni * c + ci];
            gb[ci] += g;
            let wrow = &wt[ci * f..(ci + 1) * f];
            let gwrow = &mut gw[ci * f..(ci + 1) * f];
            let gxrow = &mut gx[ni * f..(ni + 1) * f];
            for fi in 0..f {
                gxrow[fi] += g * wrow[fi];
                gwrow[fi] += g * xrow[fi];
            }
        }
    }
    Ok((
        Tensor::new(vec![n, f], gx)?,
        Tensor::new(vec![c, f], gw)?,
        Tensor::new(vec![c], gb)?,
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient is 1 strictly above zero and 0 elsewhere, including at 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

fn rows(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    ensure!(t.rank() == 2, op, "expected [N,C], got {:?}", t.shape());
    ensure!(t.shape()[1] >= 1, op, "need at least one class column");
    Ok((t.shape()[0], t.shape()[1]))
}

pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, c) = rows(logits, "log_softmax")?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(c) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| ((v - max) as f64 - lse) as f32));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(logits)?.map(f32::exp))
}

/// `output` is the forward result of [`log_softmax`].
pub fn log_softmax_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let c = output.shape()[1];
    let mut gx = Vec::with_capacity(output.len());
    for (orow, grow) in output.data().chunks_exact(c).zip(grad_out.data().chunks_exact(c)) {
        let gsum: f64 = grow.iter().map(|&g| g as f64).sum();
        gx.extend(
            orow.iter()
                .zip(grow)
                .map(|(&o, &g)| (g as f64 - (o as f64).exp() * gsum) as f32),
        );
    }
    Tensor::new(output.shape().to_vec(), gx).expect("shape preserved")
}

fn check_targets(c: usize, targets: &[usize], n: usize) -> Result<()> {
    ensure!(
        targets.len() == n,
        "cross_entropy",
        "{} targets for {} rows",
        targets.len(),
        n
    );
    if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= c) {
        return Err(crate::Error::contract(
            "cross_entropy",
            format!("target {t} at row {i} is outside [0, {c})"),
        ));
    }
    Ok(())
}

/// Mean negative log-likelihood of `targets` under row-wise softmax.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f32> {
    let (n, c) = rows(logits, "cross_entropy")?;
    check_targets(c, targets, n)?;
    ensure!(n > 0, "cross_entropy", "empty batch");
    let lp = log_softmax(logits)?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -(lp.data()[i * c + t] as f64))
        .sum();
    Ok((total / n as f64) as f32)
}

/// `(softmax - one_hot) / N`, scaled by the upstream scalar gradient.
pub fn cross_entropy_backward(logits: &Tensor, targets: &[usize], grad: f32) -> Result<Tensor> {
    let (n, c) = rows(logits, "cross_entropy")?;
    check_targets(c, targets, n)?;
    let mut g = softmax(logits)?;
    let scale = grad / n as f32;
    for (i, &t) in targets.iter().enumerate() {
        g.data_mut()[i * c + t] -= 1.0;
    }
    for v in g.data_mut() {
        *v *= scale;
    }
    Ok(g)
}

pub fn smooth_l1(pred: &Tensor, target: &Tensor, beta: f32) -> Result<f32> {
    ensure!(
        pred.shape() == target.shape(),
        "smooth_l1",
        "prediction {:?} and target {:?} differ",
        pred.shape(),
        target.shape()
    );
    ensure!(beta > 0.0, "smooth_l1", "beta must be positive, got {}", beta);
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (p - t).abs() as f64;
            if d < beta as f64 {
                0.5 * d * d / beta as f64
            } else {
                d - 0.5 * beta as f64
            }
        })
        .sum();
    Ok((total / pred.len() as f64) as f32)
}

pub fn smooth_l1_backward(pred: &Tensor, target: &Tensor, beta: f32, grad: f32) -> Tensor {
    let scale = grad / pred.len().max(1) as f32;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            let local = if d.abs() < beta { d / beta } else { d.signum() };
            local * scale
        })
        .collect();
    Tensor::new(pred.shape().to_vec(), data).expect("shape preserved")
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean per-element sigmoid binary cross entropy, `max(x,0) - x*t + ln(1 + e^-|x|)`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<f32> {
    const OP: &str = "binary_cross_entropy_with_logits";
    ensure!(
        logits.shape() == targets.shape(),
        OP,
        "logits {:?} and targets {:?} differ",
        logits.shape(),
        targets.shape()
    );
    if let Some(t) = targets.data().iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(crate::Error::contract(OP, format!("target {t} outside [0, 1]")));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &t)| {
            let (x, t) = (x as f64, t as f64);
            x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
        })
        .sum();
    Ok((total / logits.len() as f64) as f32)
}

pub fn bce_with_logits_backward(logits: &Tensor, targets: &Tensor, grad: f32) -> Tensor {
    let scale = grad / logits.len().max(1) as f32;
    let data = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &t)| (sigmoid(x) - t) * scale)
        .collect();
    Tensor::new(logits.shape().to_vec(), data).expect("shape preserved")
}

/// Source taps and weights for half-pixel-centre bilinear sampling along one axis.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Bilinear resampling of the trailing two axes with half-pixel-centre alignment.
/// Results are clamped to the range of the four contributing samples.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    const OP: &str = "resize_bilinear";
    let (lead, hw) = split_spatial(input.shape(), 2, OP)?;
    let (h, w) = (hw[0], hw[1]);
    ensure!(h > 0 && w > 0, OP, "empty input {:?}", input.shape());
    ensure!(out_h > 0 && out_w > 0, OP, "empty output {}x{}", out_h, out_w);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(lead * out_h * out_w);
    for l in 0..lead {
        let base = l * h * w;
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let a = x[base + y0 * w + x0];
                let b = x[base + y0 * w + x1];
                let c = x[base + y1 * w + x0];
                let d = x[base + y1 * w + x1];
                let v = lerp(lerp(a, b, fx), lerp(c, d, fx), fy);
                let lo = a.min(b).min(c).min(d);
                let hi = a.max(b).max(c).max(d);
                out.push(v.clamp(lo, hi));
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let rank = shape.len();
    shape[rank - 2] = out_h;
    shape[rank - 1] = out_w;
    Tensor::new(shape, out)
}

pub fn resize_bilinear_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (lead, hw) = split_spatial(input_shape, 2, "resize_bilinear_backward")?;
    let (h, w) = (hw[0], hw[1]);
    let rank = grad_out.rank();
    let (out_h, out_w) = (grad_out.shape()[rank - 2], grad_out.shape()[rank - 1]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let go = grad_out.data();
    let mut gx = vec![0.0f32; lead * h * w];
    let mut k = 0;
    for l in 0..lead {
        let base = l * h * w;
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let g = go[k];
                k += 1;
                gx[base + y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                gx[base + y0 * w + x1] += g * (1.0 - fy) * fx;
                gx[base + y1 * w + x0] += g * fy * (1.0 - fx);
                gx[base + y1 * w + x1] += g * fy * fx;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// Picks flat elements of `input` into a tensor of `shape`.
pub fn gather(input: &Tensor, indices: &[usize], shape: &[usize]) -> Result<Tensor> {
    ensure!(
        shape.iter().product::<usize>() == indices.len(),
        "gather",
        "{} indices cannot fill shape {:?}",
        indices.len(),
        shape
    );
    let x = input.data();
    let data = indices
        .iter()
        .map(|&i| {
            x.get(i).copied().ok_or_else(|| {
                crate::Error::contract("gather", format!("index {i} outside tensor of {} elements", x.len()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(shape.to_vec(), data)
}

pub fn gather_backward(input_shape: &[usize], indices: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    for (&i, &g) in indices.iter().zip(grad_out.data()) {
        gx.data_mut()[i] += g;
    }
    gx
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure!(
        a.shape() == b.shape(),
        "add",
        "operand shapes {:?} and {:?} differ",
        a.shape(),
        b.shape()
    );
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Fixed weighted reduction `sum_i x_i * w_i` to a scalar.
pub fn dot(x: &Tensor, weights: &Tensor) -> Result<f32> {
    ensure!(
        x.len() == weights.len(),
        "dot",
        "{} values against {} weights",
        x.len(),
        weights.len()
    );
    let s: f64 = x
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum();
    Ok(s as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_ones_valid() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, PadMode::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_identity_kernel_same() {
        let x = Tensor::from_fn(&[2, 1, 5, 4], |i| (i as f32 * 0.37).sin());
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, PadMode::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_valid_extent() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, PadMode::Valid).unwrap();
        assert_eq!(&y.shape()[2..], &[2, 2]);
    }

    #[test]
    fn conv_same_zero_border() {
        // 3x3 ones kernel over ones: corners see 4 taps, edges 6, interior 9.
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, PadMode::Same).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_channel_mismatch_names_axes() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, PadMode::Valid).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
    }

    #[test]
    fn pool2d_quadrants() {
        let x = Tensor::from_fn(&[4, 4], |i| (i + 1) as f32);
        let y = adaptive_avg_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn pool2d_identity_and_constant() {
        let x = Tensor::from_fn(&[2, 3, 5], |i| i as f32 * 0.5);
        assert_eq!(adaptive_avg_pool2d(&x, 3, 5).unwrap(), x);
        let c = Tensor::full(&[1, 7, 6], 2.25);
        assert!(adaptive_avg_pool2d(&c, 3, 4).unwrap().data().iter().all(|&v| v == 2.25));
        assert!(adaptive_avg_pool2d(&c, 8, 4).is_err());
    }

    #[test]
    fn pool1d_examples() {
        let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(adaptive_avg_pool1d(&x, 1).unwrap().data(), &[2.5]);
        assert_eq!(adaptive_avg_pool1d(&x, 2).unwrap().data(), &[1.5, 3.5]);
        assert_eq!(adaptive_avg_pool1d(&x, 4).unwrap(), x);
        assert!(adaptive_avg_pool1d(&x, 5).is_err());
    }

    #[test]
    fn linear_examples() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let b = t(&[2], &[0.0, 1.0]);
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[11.0, 18.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);
        let y = linear(&t(&[2, 2], &[9.0, 8.0, 7.0, 6.0]), &Tensor::zeros(&[2, 2]), &b).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 0.0, 1.0]);
        assert!(linear(&x, &Tensor::zeros(&[2, 3]), &b).is_err());
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&t(&[2], &[-1.0, 2.0])).data(), &[0.0, 2.0]);
        let g = relu_backward(&t(&[3], &[-1.0, 0.0, 1.0]), &Tensor::full(&[3], 1.0));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn log_softmax_examples() {
        let ln2 = -std::f32::consts::LN_2;
        let y = log_softmax(&t(&[2, 2], &[0.0, 0.0, 1000.0, 1000.0])).unwrap();
        for v in y.data() {
            assert!((v - ln2).abs() < 1e-6);
        }
        let z = log_softmax(&t(&[1, 3], &[0.3, -2.0, 5.0])).unwrap();
        let s: f32 = z.data().iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let u = Tensor::zeros(&[3, 7]);
        assert!((cross_entropy(&u, &[0, 3, 6]).unwrap() - 7f32.ln()).abs() < 1e-6);
        let mut sat = Tensor::full(&[1, 4], -40.0);
        sat.data_mut()[2] = 40.0;
        assert!(cross_entropy(&sat, &[2]).unwrap() < 1e-6);
        let v = cross_entropy(&t(&[1, 2], &[1.0, 2.0]), &[1]).unwrap();
        assert!((v - 0.313262).abs() < 1e-6, "{v}");
        assert!(cross_entropy(&u, &[0, 3, 7]).is_err());
    }

    #[test]
    fn smooth_l1_examples() {
        let z = t(&[1], &[0.0]);
        assert_eq!(smooth_l1(&z, &z, 1.0).unwrap(), 0.0);
        assert_eq!(smooth_l1(&t(&[1], &[0.5]), &z, 1.0).unwrap(), 0.125);
        assert_eq!(smooth_l1(&t(&[1], &[2.0]), &z, 1.0).unwrap(), 1.5);
    }

    #[test]
    fn bce_examples() {
        let ln2 = std::f32::consts::LN_2;
        assert!((bce_with_logits(&t(&[1], &[0.0]), &t(&[1], &[1.0])).unwrap() - ln2).abs() < 1e-7);
        assert!((bce_with_logits(&t(&[1], &[0.0]), &t(&[1], &[0.0])).unwrap() - ln2).abs() < 1e-7);
        assert!(bce_with_logits(&t(&[1], &[40.0]), &t(&[1], &[1.0])).unwrap() < 1e-6);
        assert!(bce_with_logits(&t(&[1], &[0.0]), &t(&[1], &[1.5])).is_err());
    }

    #[test]
    fn resize_identity_and_halving() {
        let x = Tensor::from_fn(&[1, 3, 4], |i| i as f32);
        assert_eq!(resize_bilinear(&x, 3, 4).unwrap(), x);
        let y = resize_bilinear(&Tensor::from_fn(&[2, 2], |i| [0.0, 2.0, 4.0, 6.0][i]), 1, 1).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }
}
