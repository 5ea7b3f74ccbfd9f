//! Raw numeric kernels on [`Tensor`] values.
//!
//! Every kernel runs sequentially in a fixed row-major order so results are
//! reproducible bit-for-bit. The tape wraps these for recorded computation;
//! the spiking inference path and the test oracles call them directly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------- matmul

/// 2-D matrix product with optional transposes: `op(a) . op(b)`.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::Shape(format!(
            "matmul expects 2-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ra, ca) = (a.shape()[0], a.shape()[1]);
    let (rb, cb) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
    let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
    if k != kb {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {:?} (ta={ta}) vs {:?} (tb={tb})",
            a.shape(),
            b.shape()
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f64; m * n];
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (l, &av) in arow.iter().enumerate() {
                    let brow = &bd[l * n..(l + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bd[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += arow[l] * brow[l];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        (true, false) => {
            for l in 0..k {
                let arow = &ad[l * m..(l + 1) * m];
                let brow = &bd[l * n..(l + 1) * n];
                for i in 0..m {
                    let av = arow[i];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += ad[l * m + i] * bd[j * k + l];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

// ---------------------------------------------------------------- conv2d

pub fn conv2d_out_shape(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Vec<usize>> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::Shape(format!("conv2d expects 4-D input/weight, got {x:?} and {w:?}")));
    }
    if x[1] != w[1] {
        return Err(Error::Shape(format!("conv2d channel mismatch: input {x:?} vs weight {w:?}")));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::Invalid(format!("conv2d stride must be 1 or 2, got {stride}")));
    }
    let (h, wd, k) = (x[2], x[3], w[2]);
    if w[2] != w[3] {
        return Err(Error::Shape(format!("conv2d kernel must be square, got {w:?}")));
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::Shape(format!("conv2d kernel {k} larger than padded input {x:?}")));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    Ok(vec![x[0], w[0], ho, wo])
}

/// Direct 2-D convolution (cross-correlation), zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let os = conv2d_out_shape(x.shape(), w.shape(), stride, pad)?;
    let (batch, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (os[2], os[3]);
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0f64; batch * co * ho * wo];
    for b in 0..batch {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let xrow = ((b * ci + c) * h + (iy - pad)) * wd;
                            let wrow = ((o * ci + c) * k + ky) * k;
                            for kx in 0..k {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= wd {
                                    continue;
                                }
                                acc += xd[xrow + ix - pad] * wdat[wrow + kx];
                            }
                        }
                    }
                    out[((b * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(os, out)
}

pub fn conv2d_grad_input(
    x_shape: &[usize],
    w: &Tensor,
    grad: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (batch, ci, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
    let gd = grad.data();
    let wdat = w.data();
    let mut dx = vec![0.0f64; batch * ci * h * wd];
    for b in 0..batch {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = gd[((b * co + o) * ho + oy) * wo + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..ci {
                        for ky in 0..k {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let xrow = ((b * ci + c) * h + (iy - pad)) * wd;
                            let wrow = ((o * ci + c) * k + ky) * k;
                            for kx in 0..k {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= wd {
                                    continue;
                                }
                                dx[xrow + ix - pad] += g * wdat[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

pub fn conv2d_grad_weight(
    x: &Tensor,
    w_shape: &[usize],
    grad: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (batch, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w_shape[0], w_shape[2]);
    let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
    let xd = x.data();
    let gd = grad.data();
    let mut dw = vec![0.0f64; co * ci * k * k];
    for b in 0..batch {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = gd[((b * co + o) * ho + oy) * wo + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..ci {
                        for ky in 0..k {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let xrow = ((b * ci + c) * h + (iy - pad)) * wd;
                            let wrow = ((o * ci + c) * k + ky) * k;
                            for kx in 0..k {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= wd {
                                    continue;
                                }
                                dw[wrow + kx] += g * xd[xrow + ix - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(w_shape.to_vec(), dw)
}

// ----------------------------------------------------- broadcast add/sub

/// True when `b` can broadcast onto `a` as a bias: same shape, a row vector
/// over a matrix, or a channel vector over an NCHW activation.
fn bias_broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    if a == b {
        return true;
    }
    b.len() == 1 && ((a.len() == 2 && b[0] == a[1]) || (a.len() == 4 && b[0] == a[1]))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_broadcast(a, b, |x, y| x + y, "add")
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_broadcast(a, b, |x, y| x - y, "subtract")
}

fn binary_broadcast(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    name: &str,
) -> Result<Tensor> {
    if !bias_broadcast_ok(a.shape(), b.shape()) {
        return Err(Error::Shape(format!(
            "{name}: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let out: Vec<f64> = if a.shape() == b.shape() {
        ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        // bias broadcast over features (2-D) or channels (4-D)
        let inner: usize = if a.ndim() == 2 { 1 } else { a.shape()[2] * a.shape()[3] };
        let c = b.len();
        ad.iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[(i / inner) % c]))
            .collect()
    };
    Tensor::new(a.shape().to_vec(), out)
}

/// Sum `grad` (shaped like the broadcast output) back down to `target` shape.
pub fn reduce_to(grad: &Tensor, target: &[usize]) -> Result<Tensor> {
    if grad.shape() == target {
        return Ok(grad.clone());
    }
    let inner: usize = if grad.ndim() == 2 { 1 } else { grad.shape()[2] * grad.shape()[3] };
    let c = target[0];
    let mut out = vec![0.0f64; c];
    for (i, &g) in grad.data().iter().enumerate() {
        out[(i / inner) % c] += g;
    }
    Tensor::new(target.to_vec(), out)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "elementwise-multiply")?;
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), out)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "divide")?;
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x / y).collect();
    Tensor::new(a.shape().to_vec(), out)
}

fn same_shape(a: &Tensor, b: &Tensor, name: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{name}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ----------------------------------------------------------- reductions

/// Sum over one axis (removing it) or over everything (axis = None).
pub fn sum_axis(x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    match axis {
        None => Ok(Tensor::scalar(x.data().iter().sum())),
        Some(ax) => {
            if ax >= x.ndim() {
                return Err(Error::Shape(format!("axis {ax} out of range for {:?}", x.shape())));
            }
            let outer: usize = x.shape()[..ax].iter().product();
            let mid = x.shape()[ax];
            let inner: usize = x.shape()[ax + 1..].iter().product();
            let mut out = vec![0.0f64; outer * inner];
            let xd = x.data();
            for o in 0..outer {
                for m in 0..mid {
                    let base = (o * mid + m) * inner;
                    let obase = o * inner;
                    for i in 0..inner {
                        out[obase + i] += xd[base + i];
                    }
                }
            }
            let mut shape: Vec<usize> = x.shape().to_vec();
            shape.remove(ax);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::new(shape, out)
        }
    }
}

/// Broadcast a reduced gradient back along the removed axis.
pub fn expand_axis(grad: &Tensor, full_shape: &[usize], axis: Option<usize>) -> Result<Tensor> {
    match axis {
        None => Ok(Tensor::full(full_shape, grad.item())),
        Some(ax) => {
            let outer: usize = full_shape[..ax].iter().product();
            let mid = full_shape[ax];
            let inner: usize = full_shape[ax + 1..].iter().product();
            let gd = grad.data();
            let mut out = vec![0.0f64; outer * mid * inner];
            for o in 0..outer {
                for m in 0..mid {
                    let base = (o * mid + m) * inner;
                    let gbase = o * inner;
                    out[base..base + inner].copy_from_slice(&gd[gbase..gbase + inner]);
                }
            }
            Tensor::new(full_shape.to_vec(), out)
        }
    }
}

pub fn reduced_count(shape: &[usize], axis: Option<usize>) -> usize {
    match axis {
        None => shape.iter().product(),
        Some(ax) => shape[ax],
    }
}

// ----------------------------------------------------------- batch norm

/// Per-channel count for batch-norm statistics: everything except axis 1.
fn bn_group(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("batchnorm needs >= 2-D input, got {shape:?}")));
    }
    let n = shape[0];
    let c = shape[1];
    let spatial: usize = shape[2..].iter().product();
    Ok((n, c, spatial))
}

pub struct BnForward {
    pub output: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
}

/// Training-mode batch norm: normalize with this call's batch statistics
/// (biased variance) and return them for running-average updates.
pub fn batchnorm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<BnForward> {
    let (n, c, spatial) = bn_group(x.shape())?;
    check_bn_params(c, gamma, beta)?;
    let count = (n * spatial) as f64;
    let xd = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for bi in 0..n {
        for ci in 0..c {
            let base = (bi * c + ci) * spatial;
            for s in 0..spatial {
                mean[ci] += xd[base + s];
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    for bi in 0..n {
        for ci in 0..c {
            let base = (bi * c + ci) * spatial;
            for s in 0..spatial {
                let d = xd[base + s] - mean[ci];
                var[ci] += d * d;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= count;
    }
    let output = bn_apply(x, gamma, beta, &mean, &var, eps)?;
    Ok(BnForward {
        output,
        mean: Tensor::new(vec![c], mean)?,
        var: Tensor::new(vec![c], var)?,
    })
}

pub fn batchnorm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let (_, c, _) = bn_group(x.shape())?;
    check_bn_params(c, gamma, beta)?;
    if mean.len() != c || var.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm running stats must have {c} entries, got {} and {}",
            mean.len(),
            var.len()
        )));
    }
    bn_apply(x, gamma, beta, mean.data(), var.data(), eps)
}

fn check_bn_params(c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm gamma/beta must have {c} entries, got {} and {}",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

fn bn_apply(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let (n, c, spatial) = bn_group(x.shape())?;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0f64; xd.len()];
    for ci in 0..c {
        let invstd = 1.0 / (var[ci] + eps).sqrt();
        let scale = gd[ci] * invstd;
        let shift = bd[ci] - mean[ci] * scale;
        for bi in 0..n {
            let base = (bi * c + ci) * spatial;
            for s in 0..spatial {
                out[base + s] = xd[base + s] * scale + shift;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub struct BnGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

/// Backward through training-mode batch norm (gradient flows through the
/// batch statistics).
pub fn batchnorm_train_backward(
    x: &Tensor,
    gamma: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
    grad: &Tensor,
) -> Result<BnGrads> {
    let (n, c, spatial) = bn_group(x.shape())?;
    let count = (n * spatial) as f64;
    let xd = x.data();
    let gd = grad.data();
    let md = mean.data();
    let vd = var.data();
    let gammad = gamma.data();
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for bi in 0..n {
        for ci in 0..c {
            let invstd = 1.0 / (vd[ci] + eps).sqrt();
            let base = (bi * c + ci) * spatial;
            for s in 0..spatial {
                let xhat = (xd[base + s] - md[ci]) * invstd;
                dgamma[ci] += gd[base + s] * xhat;
                dbeta[ci] += gd[base + s];
            }
        }
    }
    let mut dx = vec![0.0f64; xd.len()];
    for bi in 0..n {
        for ci in 0..c {
            let invstd = 1.0 / (vd[ci] + eps).sqrt();
            let base = (bi * c + ci) * spatial;
            for s in 0..spatial {
                let xhat = (xd[base + s] - md[ci]) * invstd;
                dx[base + s] = gammad[ci]
                    * invstd
                    * (gd[base + s] - dbeta[ci] / count - xhat * dgamma[ci] / count);
            }
        }
    }
    Ok(BnGrads {
        dx: Tensor::new(x.shape().to_vec(), dx)?,
        dgamma: Tensor::new(vec![c], dgamma)?,
        dbeta: Tensor::new(vec![c], dbeta)?,
    })
}

/// Backward through eval-mode batch norm (running stats are constants).
pub fn batchnorm_eval_backward(
    x: &Tensor,
    gamma: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
    grad: &Tensor,
) -> Result<BnGrads> {
    let (n, c, spatial) = bn_group(x.shape())?;
    let xd = x.data();
    let gd = grad.data();
    let md = mean.data();
    let vd = var.data();
    let gammad = gamma.data();
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut dx = vec![0.0f64; xd.len()];
    for bi in 0..n {
        for ci in 0..c {
            let invstd = 1.0 / (vd[ci] + eps).sqrt();
            let base = (bi * c + ci) * spatial;
            for s in 0..spatial {
                let xhat = (xd[base + s] - md[ci]) * invstd;
                dgamma[ci] += gd[base + s] * xhat;
                dbeta[ci] += gd[base + s];
                dx[base + s] = gd[base + s] * gammad[ci] * invstd;
            }
        }
    }
    Ok(BnGrads {
        dx: Tensor::new(x.shape().to_vec(), dx)?,
        dgamma: Tensor::new(vec![c], dgamma)?,
        dbeta: Tensor::new(vec![c], dbeta)?,
    })
}

// ---------------------------------------------------------- avg pooling

/// Global average pooling over spatial dims: (N, C, H, W) -> (N, C).
pub fn avgpool_global(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(Error::Shape(format!("global avg pool expects 4-D input, got {:?}", x.shape())));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let spatial = (h * w) as f64;
    let xd = x.data();
    let mut out = vec![0.0f64; n * c];
    for i in 0..n * c {
        let base = i * h * w;
        let mut acc = 0.0;
        for s in 0..h * w {
            acc += xd[base + s];
        }
        out[i] = acc / spatial;
    }
    Tensor::new(vec![n, c], out)
}

pub fn avgpool_global_backward(x_shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let spatial = (h * w) as f64;
    let gd = grad.data();
    let mut dx = vec![0.0f64; n * c * h * w];
    for i in 0..n * c {
        let g = gd[i] / spatial;
        let base = i * h * w;
        for s in 0..h * w {
            dx[base + s] = g;
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

// -------------------------------------------------------- cross entropy

/// Mean softmax cross-entropy over the batch, with integer class labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = ce_dims(logits, labels)?;
    let ld = logits.data();
    let mut total = 0.0;
    for bi in 0..b {
        let row = &ld[bi * k..(bi + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[labels[bi]];
    }
    Ok(Tensor::scalar(total / b as f64))
}

pub fn cross_entropy_backward(logits: &Tensor, labels: &[usize], grad: f64) -> Result<Tensor> {
    let (b, k) = ce_dims(logits, labels)?;
    let ld = logits.data();
    let mut dl = vec![0.0f64; b * k];
    let scale = grad / b as f64;
    for bi in 0..b {
        let row = &ld[bi * k..(bi + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
        let denom: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        for j in 0..k {
            let p = (row[j] - m).exp() / denom;
            dl[bi * k + j] = scale * (p - if j == labels[bi] { 1.0 } else { 0.0 });
        }
    }
    Tensor::new(logits.shape().to_vec(), dl)
}

fn ce_dims(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.ndim() != 2 {
        return Err(Error::Shape(format!("cross-entropy expects 2-D logits, got {:?}", logits.shape())));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
    }
    Ok((b, k))
}
