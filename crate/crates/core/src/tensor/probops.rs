#![allow(clippy::needless_range_loop)]
//! Fused diagonal-Gaussian ops: reparameterized sampling, log densities and
//! closed-form KL. Fusing these keeps episode graphs small; the distribution
//! semantics live in the `gaussian` module on top of these primitives.

use super::gemm;
use super::tape::{Op, Tape, Var};
use super::{ShapeError, Tensor};
use crate::scalar::Scalar;

fn ln_2pi<E: Scalar>() -> E {
    E::from_f64((2.0 * std::f64::consts::PI).ln())
}

/// log N(x; mu, exp(lv)) for one diagonal row pair.
fn log_normal_row<E: Scalar>(x: &[E], mu: &[E], lv: &[E]) -> E {
    let half = E::from_f64(0.5);
    let mut s = E::zero();
    for ((&xd, &md), &ld) in x.iter().zip(mu).zip(lv) {
        let d = xd - md;
        s += ln_2pi::<E>() + ld + d * d * (-ld).exp();
    }
    -half * s
}

impl<E: Scalar> Tape<E> {
    fn check_gauss_pair(
        &self,
        op: &'static str,
        means: Var,
        logvars: Var,
    ) -> Result<(usize, usize), ShapeError> {
        let (sm, sl) = (self.shape(means), self.shape(logvars));
        if sm != sl || sm.len() != 2 {
            return Err(ShapeError::Invalid {
                op,
                msg: format!("means/logvars must share a [A,d] shape, got {sm:?} vs {sl:?}"),
            });
        }
        Ok((sm[0], sm[1]))
    }

    /// Reparameterized draws from a bank of diagonal Gaussians: row `l` of
    /// the output is `means[c_l] + exp(0.5 * logvars[c_l]) * noise[l]`.
    pub fn mixture_rsample(
        &mut self,
        means: Var,
        logvars: Var,
        noise: Vec<E>,
        comp_of_row: Vec<usize>,
    ) -> Result<Var, ShapeError> {
        let (a, d) = self.check_gauss_pair("mixture_rsample", means, logvars)?;
        let l = comp_of_row.len();
        if noise.len() != l * d {
            return Err(ShapeError::Invalid {
                op: "mixture_rsample",
                msg: format!("noise length {} != L*d = {}", noise.len(), l * d),
            });
        }
        if comp_of_row.iter().any(|&c| c >= a) {
            return Err(ShapeError::Invalid {
                op: "mixture_rsample",
                msg: format!("component index out of range (mixture has {a} components)"),
            });
        }
        let half = E::from_f64(0.5);
        let (mv, lv) = (self.data(means), self.data(logvars));
        let mut out = vec![E::zero(); l * d];
        for (li, &c) in comp_of_row.iter().enumerate() {
            for k in 0..d {
                out[li * d + k] =
                    mv[c * d + k] + (half * lv[c * d + k]).exp() * noise[li * d + k];
            }
        }
        Ok(self.push_op(
            Tensor::new(vec![l, d], out)?,
            Op::MixtureRsample {
                means,
                logvars,
                noise,
                comp_of_row,
            },
        ))
    }

    /// Log density of each row of `xs` under the mixture
    /// `sum_a w_a N(mu_a, exp(lv_a))`, via log-sum-exp. `log_weights` of
    /// `None` means uniform weights 1/A.
    pub fn gauss_mix_log_density(
        &mut self,
        xs: Var,
        means: Var,
        logvars: Var,
        log_weights: Option<Var>,
    ) -> Result<Var, ShapeError> {
        let (a, d) = self.check_gauss_pair("gauss_mix_log_density", means, logvars)?;
        let (l, dx) = {
            let s = self.shape(xs);
            (s[0], s[1])
        };
        if dx != d {
            return Err(ShapeError::DimMismatch {
                op: "gauss_mix_log_density",
                axis: 1,
                lhs: dx,
                rhs: d,
            });
        }
        if let Some(w) = log_weights {
            if self.value(w).numel() != a {
                return Err(ShapeError::DimMismatch {
                    op: "gauss_mix_log_density",
                    axis: 0,
                    lhs: self.value(w).numel(),
                    rhs: a,
                });
            }
        }
        let uniform = -E::from_f64((a as f64).ln());
        let mut out = vec![E::zero(); l];
        for li in 0..l {
            let x = &self.data(xs)[li * d..(li + 1) * d];
            let mut max = E::neg_infinity();
            let mut terms = vec![E::zero(); a];
            for ai in 0..a {
                let lw = match log_weights {
                    Some(w) => self.data(w)[ai],
                    None => uniform,
                };
                let t = lw
                    + log_normal_row(
                        x,
                        &self.data(means)[ai * d..(ai + 1) * d],
                        &self.data(logvars)[ai * d..(ai + 1) * d],
                    );
                terms[ai] = t;
                max = max.max(t);
            }
            let sum: E = terms.iter().map(|&t| (t - max).exp()).sum();
            out[li] = max + sum.ln();
        }
        Ok(self.push_op(
            Tensor::vector(out),
            Op::GaussMixLogDensity {
                xs,
                means,
                logvars,
                log_weights,
            },
        ))
    }

    /// `out[l,q] = log N(xs[l]; means[q], exp(logvars[q]))`.
    pub fn gauss_log_density_mat(
        &mut self,
        xs: Var,
        means: Var,
        logvars: Var,
    ) -> Result<Var, ShapeError> {
        let (q, d) = self.check_gauss_pair("gauss_log_density_mat", means, logvars)?;
        let (l, dx) = {
            let s = self.shape(xs);
            (s[0], s[1])
        };
        if dx != d {
            return Err(ShapeError::DimMismatch {
                op: "gauss_log_density_mat",
                axis: 1,
                lhs: dx,
                rhs: d,
            });
        }
        let mut out = vec![E::zero(); l * q];
        for li in 0..l {
            let x = &self.data(xs)[li * d..(li + 1) * d];
            for qi in 0..q {
                out[li * q + qi] = log_normal_row(
                    x,
                    &self.data(means)[qi * d..(qi + 1) * d],
                    &self.data(logvars)[qi * d..(qi + 1) * d],
                );
            }
        }
        Ok(self.push_op(
            Tensor::new(vec![l, q], out)?,
            Op::GaussLogDensityMat { xs, means, logvars },
        ))
    }

    /// Closed-form `KL(q || p_i)` of one diagonal Gaussian against a batch of
    /// diagonal Gaussians, one output per row of `p_means`.
    pub fn gauss_kl_batch(
        &mut self,
        q_mean: Var,
        q_logvar: Var,
        p_means: Var,
        p_logvars: Var,
    ) -> Result<Var, ShapeError> {
        let (q, d) = self.check_gauss_pair("gauss_kl_batch", p_means, p_logvars)?;
        if self.value(q_mean).numel() != d || self.value(q_logvar).numel() != d {
            return Err(ShapeError::DimMismatch {
                op: "gauss_kl_batch",
                axis: 0,
                lhs: self.value(q_mean).numel(),
                rhs: d,
            });
        }
        let half = E::from_f64(0.5);
        let (qm, qv) = (self.data(q_mean), self.data(q_logvar));
        let mut out = vec![E::zero(); q];
        for qi in 0..q {
            let pm = &self.data(p_means)[qi * d..(qi + 1) * d];
            let pv = &self.data(p_logvars)[qi * d..(qi + 1) * d];
            let mut s = E::zero();
            for k in 0..d {
                let diff = qm[k] - pm[k];
                s += pv[k] - qv[k] + (qv[k].exp() + diff * diff) * (-pv[k]).exp() - E::one();
            }
            out[qi] = half * s;
        }
        Ok(self.push_op(
            Tensor::vector(out),
            Op::GaussKlBatch {
                q_mean,
                q_logvar,
                p_means,
                p_logvars,
            },
        ))
    }
}

pub(crate) fn backward_mixture_rsample<E: Scalar>(
    tape: &Tape<E>,
    means: Var,
    logvars: Var,
    noise: &[E],
    comp_of_row: &[usize],
    g: &[E],
    grads: &mut [Option<Vec<E>>],
) {
    let d = tape.shape(means)[1];
    let half = E::from_f64(0.5);
    let lv = tape.val(logvars);
    tape.with_grad_buf(grads, means, |dm| {
        for (li, &c) in comp_of_row.iter().enumerate() {
            gemm::axpy(E::one(), &g[li * d..(li + 1) * d], &mut dm[c * d..(c + 1) * d]);
        }
    });
    tape.with_grad_buf(grads, logvars, |dl| {
        for (li, &c) in comp_of_row.iter().enumerate() {
            for k in 0..d {
                let std = (half * lv[c * d + k]).exp();
                dl[c * d + k] += g[li * d + k] * half * std * noise[li * d + k];
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_mix_log_density<E: Scalar>(
    tape: &Tape<E>,
    xs: Var,
    means: Var,
    logvars: Var,
    log_weights: Option<Var>,
    out: &[E],
    g: &[E],
    grads: &mut [Option<Vec<E>>],
) {
    let (a, d) = {
        let s = tape.shape(means);
        (s[0], s[1])
    };
    let l = tape.shape(xs)[0];
    let half = E::from_f64(0.5);
    let uniform = -E::from_f64((a as f64).ln());
    let (xv, mv, lv) = (tape.val(xs), tape.val(means), tape.val(logvars));

    // Component responsibilities, then the chain rule through log-sum-exp.
    let mut dxs = vec![E::zero(); l * d];
    let mut dmeans = vec![E::zero(); a * d];
    let mut dlogvars = vec![E::zero(); a * d];
    let mut dlw = vec![E::zero(); a];
    for li in 0..l {
        if g[li] == E::zero() {
            continue;
        }
        let x = &xv[li * d..(li + 1) * d];
        for ai in 0..a {
            let lw = match log_weights {
                Some(w) => tape.val(w)[ai],
                None => uniform,
            };
            let mu = &mv[ai * d..(ai + 1) * d];
            let lvr = &lv[ai * d..(ai + 1) * d];
            let r = (lw + log_normal_row(x, mu, lvr) - out[li]).exp();
            let gr = g[li] * r;
            dlw[ai] += gr;
            for k in 0..d {
                let prec = (-lvr[k]).exp();
                let diff = x[k] - mu[k];
                dxs[li * d + k] -= gr * diff * prec;
                dmeans[ai * d + k] += gr * diff * prec;
                dlogvars[ai * d + k] += gr * half * (diff * diff * prec - E::one());
            }
        }
    }
    tape.with_grad_buf(grads, xs, |b| gemm::axpy(E::one(), &dxs, b));
    tape.with_grad_buf(grads, means, |b| gemm::axpy(E::one(), &dmeans, b));
    tape.with_grad_buf(grads, logvars, |b| gemm::axpy(E::one(), &dlogvars, b));
    if let Some(w) = log_weights {
        tape.with_grad_buf(grads, w, |b| gemm::axpy(E::one(), &dlw, b));
    }
}

pub(crate) fn backward_log_density_mat<E: Scalar>(
    tape: &Tape<E>,
    xs: Var,
    means: Var,
    logvars: Var,
    g: &[E],
    grads: &mut [Option<Vec<E>>],
) {
    let (q, d) = {
        let s = tape.shape(means);
        (s[0], s[1])
    };
    let l = tape.shape(xs)[0];
    let half = E::from_f64(0.5);
    let (xv, mv, lv) = (tape.val(xs), tape.val(means), tape.val(logvars));

    let mut dxs = vec![E::zero(); l * d];
    let mut dmeans = vec![E::zero(); q * d];
    let mut dlogvars = vec![E::zero(); q * d];
    for li in 0..l {
        for qi in 0..q {
            let gv = g[li * q + qi];
            if gv == E::zero() {
                continue;
            }
            for k in 0..d {
                let prec = (-lv[qi * d + k]).exp();
                let diff = xv[li * d + k] - mv[qi * d + k];
                dxs[li * d + k] -= gv * diff * prec;
                dmeans[qi * d + k] += gv * diff * prec;
                dlogvars[qi * d + k] += gv * half * (diff * diff * prec - E::one());
            }
        }
    }
    tape.with_grad_buf(grads, xs, |b| gemm::axpy(E::one(), &dxs, b));
    tape.with_grad_buf(grads, means, |b| gemm::axpy(E::one(), &dmeans, b));
    tape.with_grad_buf(grads, logvars, |b| gemm::axpy(E::one(), &dlogvars, b));
}

pub(crate) fn backward_kl_batch<E: Scalar>(
    tape: &Tape<E>,
    q_mean: Var,
    q_logvar: Var,
    p_means: Var,
    p_logvars: Var,
    g: &[E],
    grads: &mut [Option<Vec<E>>],
) {
    let (q, d) = {
        let s = tape.shape(p_means);
        (s[0], s[1])
    };
    let half = E::from_f64(0.5);
    let (qm, qv, pm, pv) = (
        tape.val(q_mean),
        tape.val(q_logvar),
        tape.val(p_means),
        tape.val(p_logvars),
    );
    let mut dqm = vec![E::zero(); d];
    let mut dqv = vec![E::zero(); d];
    let mut dpm = vec![E::zero(); q * d];
    let mut dpv = vec![E::zero(); q * d];
    for qi in 0..q {
        let gv = g[qi];
        if gv == E::zero() {
            continue;
        }
        for k in 0..d {
            let prec = (-pv[qi * d + k]).exp();
            let diff = qm[k] - pm[qi * d + k];
            dqm[k] += gv * diff * prec;
            dqv[k] += gv * half * ((qv[k] - pv[qi * d + k]).exp() - E::one());
            dpm[qi * d + k] -= gv * diff * prec;
            dpv[qi * d + k] += gv * half * (E::one() - (qv[k].exp() + diff * diff) * prec);
        }
    }
    tape.with_grad_buf(grads, q_mean, |b| gemm::axpy(E::one(), &dqm, b));
    tape.with_grad_buf(grads, q_logvar, |b| gemm::axpy(E::one(), &dqv, b));
    tape.with_grad_buf(grads, p_means, |b| gemm::axpy(E::one(), &dpm, b));
    tape.with_grad_buf(grads, p_logvars, |b| gemm::axpy(E::one(), &dpv, b));
}

pub(crate) fn backward_cos_dist<E: Scalar>(
    tape: &Tape<E>,
    x: Var,
    y: Var,
    g: &[E],
    grads: &mut [Option<Vec<E>>],
) {
    let (q, d) = {
        let s = tape.shape(x);
        (s[0], s[1])
    };
    let n = tape.shape(y)[0];
    let eps = E::from_f64(1e-12);
    let (xv, yv) = (tape.val(x), tape.val(y));
    let xnorm: Vec<E> = (0..q)
        .map(|i| gemm::dot(&xv[i * d..(i + 1) * d], &xv[i * d..(i + 1) * d]).sqrt().max(eps))
        .collect();
    let ynorm: Vec<E> = (0..n)
        .map(|i| gemm::dot(&yv[i * d..(i + 1) * d], &yv[i * d..(i + 1) * d]).sqrt().max(eps))
        .collect();

    let mut dx = vec![E::zero(); q * d];
    let mut dy = vec![E::zero(); n * d];
    for qi in 0..q {
        let xr = &xv[qi * d..(qi + 1) * d];
        for ni in 0..n {
            let gv = g[qi * n + ni];
            if gv == E::zero() {
                continue;
            }
            let yr = &yv[ni * d..(ni + 1) * d];
            let sim = gemm::dot(xr, yr) / (xnorm[qi] * ynorm[ni]);
            for k in 0..d {
                // d(1 - sim)/dx = sim*x/|x|^2 - y/(|x||y|)
                dx[qi * d + k] +=
                    gv * (sim * xr[k] / (xnorm[qi] * xnorm[qi]) - yr[k] / (xnorm[qi] * ynorm[ni]));
                dy[ni * d + k] +=
                    gv * (sim * yr[k] / (ynorm[ni] * ynorm[ni]) - xr[k] / (xnorm[qi] * ynorm[ni]));
            }
        }
    }
    tape.with_grad_buf(grads, x, |b| gemm::axpy(E::one(), &dx, b));
    tape.with_grad_buf(grads, y, |b| gemm::axpy(E::one(), &dy, b));
}
