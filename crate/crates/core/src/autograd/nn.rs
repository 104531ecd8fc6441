//! Convolution, batch normalization and pooling.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to the variance inside every batch-norm denominator.
pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics observed by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Elements per channel that entered the statistics.
    pub count: usize,
}

impl BnBatchStats {
    /// Bessel-corrected variance, the estimate stored in running statistics.
    pub fn unbiased_var(&self) -> Vec<f64> {
        if self.count < 2 {
            return self.var.clone();
        }
        let c = self.count as f64 / (self.count - 1) as f64;
        self.var.iter().map(|v| v * c).collect()
    }
}

fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Dimension("conv2d: stride must be positive".into()));
    }
    if k > extent + 2 * pad {
        return Err(Error::Dimension(format!(
            "conv2d: kernel {k} exceeds padded input {}",
            extent + 2 * pad
        )));
    }
    Ok((extent + 2 * pad - k) / stride + 1)
}

/// Splits an `[N, C, ...]` shape into (N, C, spatial size).
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape.get(1).copied().unwrap_or(1);
    let s = shape.iter().skip(2).product::<usize>();
    (n, c, s)
}

impl Tape {
    /// Cross-correlation of `x: [N,C,H,W]` with `w: [F,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 4 || wv.rank() != 4 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::Dimension(format!(
                "conv2d: input {:?}, kernel {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let [n, c, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let [f, _, kh, kw] = [wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]];
        let oh = conv_out(h, kh, stride, padding)?;
        let ow = conv_out(wd, kw, stride, padding)?;
        let (xd, wdata) = (xv.data(), wv.data());
        let mut out = vec![0.0; n * f * oh * ow];
        for b in 0..n {
            for fo in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += xd[((b * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * wdata[((fo * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((b * f + fo) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, f, oh, ow], out)?;
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            },
        )
    }

    /// Normalizes with the batch's own statistics. The returned stats let the
    /// caller update running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BnBatchStats)> {
        let (n, c, s) = self.bn_check(x, gamma, beta)?;
        let xd = self.value(x).data();
        let m = n * s;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for b in 0..n {
                for i in 0..s {
                    acc += xd[(b * c + ch) * s + i];
                }
            }
            mean[ch] = acc / m as f64;
            let mut sq = 0.0;
            for b in 0..n {
                for i in 0..s {
                    let d = xd[(b * c + ch) * s + i] - mean[ch];
                    sq += d * d;
                }
            }
            var[ch] = sq / m as f64;
        }
        let degenerate = var.iter().filter(|v| **v < super::PROB_EPS).count();
        self.flag_eps(degenerate);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: true,
        };
        let v = self.push(out, op)?;
        Ok((
            v,
            BnBatchStats {
                mean,
                var,
                count: m,
            },
        ))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let (_, c, _) = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Dimension(format!(
                "batchnorm: {c} channels, running stats of {}/{}",
                running_mean.len(),
                running_var.len()
            )));
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v.max(0.0) + BN_EPS).sqrt())
            .collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, running_mean, &inv_std)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: false,
        };
        self.push(out, op)
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.value(x).shape();
        if shape.len() < 2 {
            return Err(Error::Dimension(format!("batchnorm: input {shape:?}")));
        }
        let (n, c, s) = channel_layout(shape);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Dimension(format!(
                "batchnorm: {c} channels, γ/β of {}/{}",
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        Ok((n, c, s))
    }

    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> Result<(Tensor, Vec<f64>)> {
        let xv = self.value(x);
        let (n, c, s) = channel_layout(xv.shape());
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..s {
                    let idx = (b * c + ch) * s + i;
                    xhat[idx] = (xv.data()[idx] - mean[ch]) * inv_std[ch];
                    out[idx] = g[ch] * xhat[idx] + bt[ch];
                }
            }
        }
        Ok((Tensor::new(xv.shape().to_vec(), out)?, xhat))
    }

    /// Non-overlapping average pooling over `kernel × kernel` windows.
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w, oh, ow) = pool_dims(xv.shape(), kernel)?;
        let mut out = vec![0.0; n * c * oh * ow];
        let area = (kernel * kernel) as f64;
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            acc += xv.data()[(p * h + oy * kernel + ky) * w + ox * kernel + kx];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = acc / area;
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(t, Op::AvgPool { x, kernel })
    }

    /// Non-overlapping max pooling; ties route the gradient to the first maximum.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w, oh, ow) = pool_dims(xv.shape(), kernel)?;
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0; out.len()];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = (p * h + oy * kernel + ky) * w + ox * kernel + kx;
                            if best == usize::MAX || xv.data()[idx] > xv.data()[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out[o] = xv.data()[best];
                    argmax[o] = best;
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(t, Op::MaxPool { x, argmax })
    }
}

fn pool_dims(shape: &[usize], kernel: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if shape.len() != 4 || kernel == 0 || shape[2] < kernel || shape[3] < kernel {
        return Err(Error::Dimension(format!("pool{kernel}: input {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    Ok((n, c, h, w, h / kernel, w / kernel))
}

pub(super) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [f, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let (xd, wdata) = (x.data(), w.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wdata.len()];
    for b in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[((b * f + fo) * oh + oy) * ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * c + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((fo * c + ci) * kh + ky) * kw + kx;
                                gx[xi] += go * wdata[wi];
                                gw[wi] += go * xd[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

pub(super) fn batchnorm_backward(
    shape: &[usize],
    gamma: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, s) = channel_layout(shape);
    let m = (n * s) as f64;
    let mut gx = vec![0.0; g.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..n {
            for i in 0..s {
                let idx = (b * c + ch) * s + i;
                sum_g += g[idx];
                sum_gx += g[idx] * xhat[idx];
            }
        }
        gg[ch] = sum_gx;
        gb[ch] = sum_g;
        for b in 0..n {
            for i in 0..s {
                let idx = (b * c + ch) * s + i;
                gx[idx] = if batch_stats {
                    gamma[ch] * inv_std[ch] / m * (m * g[idx] - sum_g - xhat[idx] * sum_gx)
                } else {
                    gamma[ch] * inv_std[ch] * g[idx]
                };
            }
        }
    }
    (gx, gg, gb)
}

pub(super) fn avg_pool_backward(shape: &[usize], kernel: usize, g: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / kernel, w / kernel);
    let area = (kernel * kernel) as f64;
    let mut gx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g[(p * oh + oy) * ow + ox] / area;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        gx[(p * h + oy * kernel + ky) * w + ox * kernel + kx] += go;
                    }
                }
            }
        }
    }
    gx
}
