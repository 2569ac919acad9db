//! Convolution, pooling and batch statistics ops over `[B, H, W, C]` tensors.

use super::gemm;
use super::tape::{Op, Tape, Var};
use super::{ShapeError, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Output extent plus leading pad for one spatial axis.
fn axis_geometry(input: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            (out, total / 2)
        }
        Padding::Valid => ((input - k) / stride + 1, 0),
    }
}

fn check_rank4<E: Scalar>(
    tape: &Tape<E>,
    op: &'static str,
    v: Var,
) -> Result<(usize, usize, usize, usize), ShapeError> {
    let s = tape.shape(v);
    if s.len() != 4 {
        return Err(ShapeError::Rank {
            op,
            expected: 4,
            shape: s.to_vec(),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Gather the kernel-sized patch under every output position into rows of
/// `[B*OH*OW, k*k*Cin]`; out-of-bounds cells stay zero.
#[allow(clippy::too_many_arguments)]
fn im2row<E: Scalar>(
    input: &[E],
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_t: usize,
    pad_l: usize,
) -> Vec<E> {
    let krow = k * k * cin;
    let mut p = vec![E::zero(); b * oh * ow * krow];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * krow;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad_t as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad_l as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * cin;
                        let dst = row + (ky * k + kx) * cin;
                        p[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
                    }
                }
            }
        }
    }
    p
}

impl<E: Scalar> Tape<E> {
    /// Cross-correlation of `input[B,H,W,Cin]` with `kernel[k,k,Cin,Cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, ShapeError> {
        let (b, h, w, cin) = check_rank4(self, "conv2d", input)?;
        let ks = self.shape(kernel);
        if ks.len() != 4 || ks[0] != ks[1] {
            return Err(ShapeError::Rank {
                op: "conv2d",
                expected: 4,
                shape: ks.to_vec(),
            });
        }
        let (k, kcin, cout) = (ks[0], ks[2], ks[3]);
        if k < 1 || stride < 1 {
            return Err(ShapeError::Invalid {
                op: "conv2d",
                msg: format!("kernel size {k} and stride {stride} must be >= 1"),
            });
        }
        if kcin != cin {
            return Err(ShapeError::DimMismatch {
                op: "conv2d",
                axis: 3,
                lhs: cin,
                rhs: kcin,
            });
        }
        if padding == Padding::Valid && (h < k || w < k) {
            return Err(ShapeError::Invalid {
                op: "conv2d",
                msg: format!("valid padding needs input >= kernel, got {h}x{w} vs {k}"),
            });
        }
        let (oh, pad_t) = axis_geometry(h, k, stride, padding);
        let (ow, pad_l) = axis_geometry(w, k, stride, padding);

        let p = im2row(self.data(input), b, h, w, cin, k, stride, oh, ow, pad_t, pad_l);
        let rows = b * oh * ow;
        let krow = k * k * cin;
        let mut out = vec![E::zero(); rows * cout];
        gemm::mm_acc(&p, self.data(kernel), &mut out, rows, krow, cout);

        Ok(self.push_op(
            Tensor::new(vec![b, oh, ow, cout], out)?,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    /// Add a per-channel bias over the last axis.
    pub fn bias_add_channel(&mut self, x: Var, bias: Var) -> Result<Var, ShapeError> {
        let c = *self.shape(x).last().ok_or(ShapeError::Rank {
            op: "bias_add_channel",
            expected: 1,
            shape: vec![],
        })?;
        if self.value(bias).numel() != c {
            return Err(ShapeError::DimMismatch {
                op: "bias_add_channel",
                axis: 3,
                lhs: c,
                rhs: self.value(bias).numel(),
            });
        }
        let bv = self.data(bias);
        let data: Vec<E> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % c])
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(t, Op::BiasAddChannel(x, bias)))
    }

    /// Per-window maximum; the gradient routes to the first maximal element
    /// in scan order.
    pub fn maxpool2d(
        &mut self,
        input: Var,
        window: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, ShapeError> {
        let (b, h, w, c) = check_rank4(self, "maxpool2d", input)?;
        if window < 1 || stride < 1 {
            return Err(ShapeError::Invalid {
                op: "maxpool2d",
                msg: format!("window {window} and stride {stride} must be >= 1"),
            });
        }
        if padding == Padding::Valid && (h < window || w < window) {
            return Err(ShapeError::Invalid {
                op: "maxpool2d",
                msg: format!("valid padding needs input >= window, got {h}x{w} vs {window}"),
            });
        }
        let (oh, pad_t) = axis_geometry(h, window, stride, padding);
        let (ow, pad_l) = axis_geometry(w, window, stride, padding);

        let x = self.data(input);
        let mut out = vec![E::zero(); b * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ci in 0..c {
                        let mut best = E::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for ky in 0..window {
                            let iy = (oy * stride + ky) as isize - pad_t as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..window {
                                let ix = (ox * stride + kx) as isize - pad_l as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = ((bi * h + iy as usize) * w + ix as usize) * c + ci;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((bi * oh + oy) * ow + ox) * c + ci;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        Ok(self.push_op(
            Tensor::new(vec![b, oh, ow, c], out)?,
            Op::MaxPool2d { input, argmax },
        ))
    }

    /// Per-channel batch normalization. In training mode the statistics come
    /// from the batch (retrievable via [`Tape::batchnorm_stats`] for running
    /// averages); in eval mode the caller supplies them.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: E,
        running: Option<(&[E], &[E])>,
    ) -> Result<Var, ShapeError> {
        let (_, _, _, c) = check_rank4(self, "batchnorm", x)?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(ShapeError::DimMismatch {
                op: "batchnorm",
                axis: 3,
                lhs: c,
                rhs: self.value(gamma).numel(),
            });
        }
        let xv = self.data(x);
        let n_per_c = xv.len() / c;
        let (mean, var, training) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let mut mean = vec![E::zero(); c];
                let mut var = vec![E::zero(); c];
                for (i, &v) in xv.iter().enumerate() {
                    mean[i % c] += v;
                }
                let inv_n = E::one() / E::from_f64(n_per_c as f64);
                for m in mean.iter_mut() {
                    *m *= inv_n;
                }
                for (i, &v) in xv.iter().enumerate() {
                    let d = v - mean[i % c];
                    var[i % c] += d * d;
                }
                for v in var.iter_mut() {
                    *v *= inv_n;
                }
                (mean, var, true)
            }
        };
        let gv = self.data(gamma);
        let bv = self.data(beta);
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let data: Vec<E> = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ci = i % c;
                gv[ci] * (v - mean[ci]) * inv_std[ci] + bv[ci]
            })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
                training,
            },
        ))
    }

    /// Batch statistics recorded by a training-mode `batchnorm` node.
    pub fn batchnorm_stats(&self, v: Var) -> Option<(&[E], &[E])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, training: true, .. } => Some((mean, var)),
            _ => None,
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_conv2d<E: Scalar>(
    tape: &Tape<E>,
    input: Var,
    kernel: Var,
    stride: usize,
    padding: Padding,
    out_shape: &[usize],
    g: &[E],
    grads: &mut [Option<Vec<E>>],
) {
    let is = tape.shape(input);
    let (b, h, w, cin) = (is[0], is[1], is[2], is[3]);
    let k = tape.shape(kernel)[0];
    let cout = tape.shape(kernel)[3];
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let (_, pad_t) = axis_geometry(h, k, stride, padding);
    let (_, pad_l) = axis_geometry(w, k, stride, padding);
    let rows = b * oh * ow;
    let krow = k * k * cin;

    if tape.needs(kernel) {
        let p = im2row(tape.val(input), b, h, w, cin, k, stride, oh, ow, pad_t, pad_l);
        tape.with_grad_buf(grads, kernel, |dk| {
            gemm::mm_at_b_acc(&p, g, dk, rows, krow, cout);
        });
    }
    if tape.needs(input) {
        // dP = g * W^T, then scatter patches back onto the input grid.
        let mut dp = vec![E::zero(); rows * krow];
        gemm::mm_a_bt_acc(g, tape.val(kernel), &mut dp, rows, cout, krow);
        tape.with_grad_buf(grads, input, |dx| {
            for bi in 0..b {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = ((bi * oh + oy) * ow + ox) * krow;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad_t as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad_l as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let dst = ((bi * h + iy as usize) * w + ix as usize) * cin;
                                let src = row + (ky * k + kx) * cin;
                                gemm::axpy(E::one(), &dp[src..src + cin], &mut dx[dst..dst + cin]);
                            }
                        }
                    }
                }
            }
        });
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_batchnorm<E: Scalar>(
    tape: &Tape<E>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: E,
    mean: &[E],
    var: &[E],
    training: bool,
    g: &[E],
    grads: &mut [Option<Vec<E>>],
) {
    let c = mean.len();
    let xv = tape.val(x);
    let gv = tape.val(gamma);
    let n_per_c = xv.len() / c;
    let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();

    let mut sum_g = vec![E::zero(); c];
    let mut sum_gx = vec![E::zero(); c];
    for (i, &gi) in g.iter().enumerate() {
        let ci = i % c;
        sum_g[ci] += gi;
        sum_gx[ci] += gi * (xv[i] - mean[ci]) * inv_std[ci];
    }
    tape.with_grad_buf(grads, beta, |db| {
        for (d, &s) in db.iter_mut().zip(&sum_g) {
            *d += s;
        }
    });
    tape.with_grad_buf(grads, gamma, |dg| {
        for (d, &s) in dg.iter_mut().zip(&sum_gx) {
            *d += s;
        }
    });
    let inv_n = E::one() / E::from_f64(n_per_c as f64);
    tape.with_grad_buf(grads, x, |dx| {
        if training {
            for (i, d) in dx.iter_mut().enumerate() {
                let ci = i % c;
                let xhat = (xv[i] - mean[ci]) * inv_std[ci];
                *d += gv[ci]
                    * inv_std[ci]
                    * (g[i] - sum_g[ci] * inv_n - xhat * sum_gx[ci] * inv_n);
            }
        } else {
            for (i, d) in dx.iter_mut().enumerate() {
                let ci = i % c;
                *d += g[i] * gv[ci] * inv_std[ci];
            }
        }
    });
}
