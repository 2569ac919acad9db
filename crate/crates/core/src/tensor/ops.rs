//! Forward builders for the general-purpose tape operations.

use super::tape::{split_axis, Op, Tape, Var};
use super::{ShapeError, Tensor};
use crate::scalar::Scalar;
use rand::Rng;

impl<E: Scalar> Tape<E> {
    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), ShapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(ShapeError::Invalid {
                op,
                msg: format!("operand shapes differ: {sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    fn check_rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize), ShapeError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(ShapeError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        Ok(self.push_op(with_shape(self.shape(a), data), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        Ok(self.push_op(with_shape(self.shape(a), data), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        Ok(self.push_op(with_shape(self.shape(a), data), Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| -x).collect();
        self.push_op(with_shape(self.shape(a), data), Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let data = self.data(a).iter().map(|&x| c * x).collect();
        self.push_op(with_shape(self.shape(a), data), Op::Scale(a, c))
    }

    /// Broadcast-add a scalar node to every element of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.item(s);
        let data = self.data(x).iter().map(|&v| v + sv).collect();
        self.push_op(with_shape(self.shape(x), data), Op::AddScalar { x, s })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x.exp()).collect();
        self.push_op(with_shape(self.shape(a), data), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x.ln()).collect();
        self.push_op(with_shape(self.shape(a), data), Op::Ln(a))
    }

    pub fn clamp_min(&mut self, a: Var, c: E) -> Var {
        let data = self.data(a).iter().map(|&x| x.max(c)).collect();
        self.push_op(with_shape(self.shape(a), data), Op::ClampMin(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x.max(E::zero())).collect();
        self.push_op(with_shape(self.shape(a), data), Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let data = self
            .data(a)
            .iter()
            .map(|&x| if x > E::zero() { x } else { x.exp() - E::one() })
            .collect();
        self.push_op(with_shape(self.shape(a), data), Op::Elu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: E) -> Var {
        let data = self
            .data(a)
            .iter()
            .map(|&x| if x > E::zero() { x } else { slope * x })
            .collect();
        self.push_op(with_shape(self.shape(a), data), Op::LeakyRelu(a, slope))
    }

    /// Inverted dropout. `rate` is the probability of dropping a unit; kept
    /// units are scaled by 1/(1-rate). Identity when `training` is false.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, ShapeError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(ShapeError::Invalid {
                op: "dropout",
                msg: format!("rate must be in [0,1), got {rate}"),
            });
        }
        if !training || rate == 0.0 {
            let data = self.data(x).to_vec();
            let mask = vec![E::one(); data.len()];
            return Ok(self.push_op(with_shape(self.shape(x), data), Op::Dropout { x, mask }));
        }
        let keep = E::from_f64(1.0 - rate);
        let inv = E::one() / keep;
        let mask: Vec<E> = (0..self.data(x).len())
            .map(|_| {
                if E::uniform(rng) < keep {
                    inv
                } else {
                    E::zero()
                }
            })
            .collect();
        let data = zip_map(self.data(x), &mask, |v, m| v * m);
        Ok(self.push_op(with_shape(self.shape(x), data), Op::Dropout { x, mask }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, ShapeError> {
        let t = Tensor::new(shape, self.data(a).to_vec())?;
        Ok(self.push_op(t, Op::Reshape(a)))
    }

    /// Flatten to `[rows, rest]`.
    pub fn flatten_rows(&mut self, a: Var) -> Result<Var, ShapeError> {
        let s = self.shape(a);
        let rows = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(a, vec![rows, rest])
    }

    /// Stack rank-1 vars of equal length into `[n, d]`.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let d = self.value(parts[0]).numel();
        let mut data = Vec::with_capacity(parts.len() * d);
        for p in parts {
            if self.value(*p).numel() != d {
                return Err(ShapeError::Invalid {
                    op: "stack_rows",
                    msg: "rows differ in length".into(),
                });
            }
            data.extend_from_slice(self.data(*p));
        }
        let t = Tensor::new(vec![parts.len(), d], data)?;
        Ok(self.push_op(t, Op::StackRows(parts.to_vec())))
    }

    /// Build `[n, d]` by taking row `r_i` of each rank-2 source.
    pub fn gather_stack_rows(&mut self, parts: &[(Var, usize)]) -> Result<Var, ShapeError> {
        let d = self.check_rank2("gather_stack_rows", parts[0].0)?.1;
        let mut data = Vec::with_capacity(parts.len() * d);
        for (v, r) in parts {
            let (rows, cols) = self.check_rank2("gather_stack_rows", *v)?;
            if cols != d || *r >= rows {
                return Err(ShapeError::Invalid {
                    op: "gather_stack_rows",
                    msg: format!("row {r} of shape [{rows},{cols}] incompatible with d={d}"),
                });
            }
            data.extend_from_slice(&self.data(*v)[r * d..(r + 1) * d]);
        }
        let t = Tensor::new(vec![parts.len(), d], data)?;
        Ok(self.push_op(t, Op::GatherStackRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (ra, ca) = self.check_rank2("concat_cols", a)?;
        let (rb, cb) = self.check_rank2("concat_cols", b)?;
        if ra != rb {
            return Err(ShapeError::DimMismatch {
                op: "concat_cols",
                axis: 0,
                lhs: ra,
                rhs: rb,
            });
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&self.data(a)[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.data(b)[r * cb..(r + 1) * cb]);
        }
        let t = Tensor::new(vec![ra, ca + cb], data)?;
        Ok(self.push_op(t, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var, ShapeError> {
        let (rows, cols) = self.check_rank2("slice_cols", x)?;
        if from >= to || to > cols {
            return Err(ShapeError::Invalid {
                op: "slice_cols",
                msg: format!("range {from}..{to} out of {cols} columns"),
            });
        }
        let w = to - from;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&self.data(x)[r * cols + from..r * cols + to]);
        }
        let t = Tensor::new(vec![rows, w], data)?;
        Ok(self.push_op(t, Op::SliceCols { x, from, to }))
    }

    pub fn slice_rows(&mut self, x: Var, from: usize, to: usize) -> Result<Var, ShapeError> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || from >= to || to > s[0] {
            return Err(ShapeError::Invalid {
                op: "slice_rows",
                msg: format!("range {from}..{to} out of shape {s:?}"),
            });
        }
        let w: usize = s[1..].iter().product();
        let data = self.data(x)[from * w..to * w].to_vec();
        let mut shape = s;
        shape[0] = to - from;
        let t = Tensor::new(shape, data)?;
        Ok(self.push_op(t, Op::SliceRows { x, from, to }))
    }

    pub fn repeat_row(&mut self, v: Var, n: usize) -> Result<Var, ShapeError> {
        let d = self.value(v).numel();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(self.data(v));
        }
        let t = Tensor::new(vec![n, d], data)?;
        Ok(self.push_op(t, Op::RepeatRow { v, n }))
    }

    /// Mean over axis 0 of a rank-2 tensor.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, ShapeError> {
        let (rows, cols) = self.check_rank2("mean_rows", a)?;
        let scale = E::one() / E::from_f64(rows as f64);
        let mut data = vec![E::zero(); cols];
        for r in 0..rows {
            for (d, &x) in data.iter_mut().zip(&self.data(a)[r * cols..(r + 1) * cols]) {
                *d += x;
            }
        }
        for d in data.iter_mut() {
            *d *= scale;
        }
        Ok(self.push_op(Tensor::vector(data), Op::MeanRows(a)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: E = self.data(a).iter().copied().sum();
        self.push_op(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s: E = self.data(a).iter().copied().sum();
        self.push_op(
            Tensor::scalar(s / E::from_f64(n as f64)),
            Op::MeanAll(a),
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, ShapeError> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let data = softmax_values(self.data(x), &shape, axis, false);
        Ok(self.push_op(Tensor::new(shape, data)?, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, ShapeError> {
        let shape = self.shape(x).to_vec();
        check_axis("log_softmax", &shape, axis)?;
        let data = softmax_values(self.data(x), &shape, axis, true);
        Ok(self.push_op(Tensor::new(shape, data)?, Op::LogSoftmax { x, axis }))
    }

    /// x / sum(x) for a rank-1 tensor. The caller is responsible for the
    /// normalizer being usable; see the rote-recall fallback.
    pub fn normalize_sum(&mut self, x: Var) -> Var {
        let s: E = self.data(x).iter().copied().sum();
        let data = self.data(x).iter().map(|&v| v / s).collect();
        self.push_op(with_shape(self.shape(x), data), Op::NormalizeSum(x))
    }

    /// Negative log-likelihood: sum over rows of `-logp[i, targets[i]]`.
    pub fn pick_neg_sum(&mut self, logp: Var, targets: &[usize]) -> Result<Var, ShapeError> {
        let (rows, cols) = self.check_rank2("pick_neg_sum", logp)?;
        if targets.len() != rows {
            return Err(ShapeError::DimMismatch {
                op: "pick_neg_sum",
                axis: 0,
                lhs: rows,
                rhs: targets.len(),
            });
        }
        let mut s = E::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(ShapeError::Invalid {
                    op: "pick_neg_sum",
                    msg: format!("target {t} out of {cols} classes"),
                });
            }
            s -= self.data(logp)[i * cols + t];
        }
        Ok(self.push_op(
            Tensor::scalar(s),
            Op::PickNegSum {
                logp,
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (m, ka) = self.check_rank2("matmul", a)?;
        let (kb, n) = self.check_rank2("matmul", b)?;
        if ka != kb {
            return Err(ShapeError::DimMismatch {
                op: "matmul",
                axis: 1,
                lhs: ka,
                rhs: kb,
            });
        }
        let mut data = vec![E::zero(); m * n];
        super::gemm::mm_acc(self.data(a), self.data(b), &mut data, m, ka, n);
        Ok(self.push_op(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b)))
    }

    /// Affine map: `x[B,din] * w[din,dout] + bias[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, ShapeError> {
        let (bsz, din) = self.check_rank2("linear", x)?;
        let (dw, dout) = self.check_rank2("linear", w)?;
        if din != dw {
            return Err(ShapeError::DimMismatch {
                op: "linear",
                axis: 1,
                lhs: din,
                rhs: dw,
            });
        }
        if self.value(b).numel() != dout {
            return Err(ShapeError::DimMismatch {
                op: "linear",
                axis: 1,
                lhs: dout,
                rhs: self.value(b).numel(),
            });
        }
        let mut data = Vec::with_capacity(bsz * dout);
        for _ in 0..bsz {
            data.extend_from_slice(self.data(b));
        }
        super::gemm::mm_acc(self.data(x), self.data(w), &mut data, bsz, din, dout);
        Ok(self.push_op(Tensor::new(vec![bsz, dout], data)?, Op::Linear { x, w, b }))
    }

    /// `m[r,c] * v[c] -> [r]`
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var, ShapeError> {
        let (rows, cols) = self.check_rank2("matvec", m)?;
        if self.value(v).numel() != cols {
            return Err(ShapeError::DimMismatch {
                op: "matvec",
                axis: 1,
                lhs: cols,
                rhs: self.value(v).numel(),
            });
        }
        let data = (0..rows)
            .map(|r| super::gemm::dot(&self.data(m)[r * cols..(r + 1) * cols], self.data(v)))
            .collect();
        Ok(self.push_op(Tensor::vector(data), Op::MatVec(m, v)))
    }

    /// `v[r] * m[r,c] -> [c]`
    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var, ShapeError> {
        let (rows, cols) = self.check_rank2("vecmat", m)?;
        if self.value(v).numel() != rows {
            return Err(ShapeError::DimMismatch {
                op: "vecmat",
                axis: 0,
                lhs: rows,
                rhs: self.value(v).numel(),
            });
        }
        let mut data = vec![E::zero(); cols];
        for r in 0..rows {
            super::gemm::axpy(
                self.data(v)[r],
                &self.data(m)[r * cols..(r + 1) * cols],
                &mut data,
            );
        }
        Ok(self.push_op(Tensor::vector(data), Op::VecMat(v, m)))
    }

    /// Squared Euclidean distances between rows: `[Q,d] x [N,d] -> [Q,N]`.
    pub fn pairwise_sqdist(&mut self, x: Var, y: Var) -> Result<Var, ShapeError> {
        let (q, dx) = self.check_rank2("pairwise_sqdist", x)?;
        let (n, dy) = self.check_rank2("pairwise_sqdist", y)?;
        if dx != dy {
            return Err(ShapeError::DimMismatch {
                op: "pairwise_sqdist",
                axis: 1,
                lhs: dx,
                rhs: dy,
            });
        }
        let mut data = vec![E::zero(); q * n];
        for qi in 0..q {
            let xr = &self.data(x)[qi * dx..(qi + 1) * dx];
            for ni in 0..n {
                let yr = &self.data(y)[ni * dx..(ni + 1) * dx];
                let mut s = E::zero();
                for (&a, &b) in xr.iter().zip(yr) {
                    let d = a - b;
                    s += d * d;
                }
                data[qi * n + ni] = s;
            }
        }
        Ok(self.push_op(Tensor::new(vec![q, n], data)?, Op::PairwiseSqDist(x, y)))
    }

    /// Cosine distances `1 - cos(x_q, y_n)` between rows.
    pub fn pairwise_cosdist(&mut self, x: Var, y: Var) -> Result<Var, ShapeError> {
        let (q, dx) = self.check_rank2("pairwise_cosdist", x)?;
        let (n, dy) = self.check_rank2("pairwise_cosdist", y)?;
        if dx != dy {
            return Err(ShapeError::DimMismatch {
                op: "pairwise_cosdist",
                axis: 1,
                lhs: dx,
                rhs: dy,
            });
        }
        let eps = E::from_f64(1e-12);
        let mut data = vec![E::zero(); q * n];
        for qi in 0..q {
            let xr = &self.data(x)[qi * dx..(qi + 1) * dx];
            let nx = super::gemm::dot(xr, xr).sqrt().max(eps);
            for ni in 0..n {
                let yr = &self.data(y)[ni * dx..(ni + 1) * dx];
                let ny = super::gemm::dot(yr, yr).sqrt().max(eps);
                data[qi * n + ni] = E::one() - super::gemm::dot(xr, yr) / (nx * ny);
            }
        }
        Ok(self.push_op(Tensor::new(vec![q, n], data)?, Op::PairwiseCosDist(x, y)))
    }
}

fn with_shape<E: Scalar>(shape: &[usize], data: Vec<E>) -> Tensor<E> {
    Tensor::new(shape.to_vec(), data).expect("shape-preserving op")
}

fn zip_map<E: Scalar>(a: &[E], b: &[E], f: impl Fn(E, E) -> E) -> Vec<E> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(), ShapeError> {
    if axis >= shape.len() {
        return Err(ShapeError::Invalid {
            op,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

fn softmax_values<E: Scalar>(x: &[E], shape: &[usize], axis: usize, log: bool) -> Vec<E> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![E::zero(); x.len()];
    for o in 0..outer {
        for ii in 0..inner {
            let base = o * len * inner + ii;
            let mut max = E::neg_infinity();
            for a in 0..len {
                max = max.max(x[base + a * inner]);
            }
            let mut sum = E::zero();
            for a in 0..len {
                sum += (x[base + a * inner] - max).exp();
            }
            if log {
                let lse = max + sum.ln();
                for a in 0..len {
                    let f = base + a * inner;
                    out[f] = x[f] - lse;
                }
            } else {
                for a in 0..len {
                    let f = base + a * inner;
                    out[f] = (x[f] - max).exp() / sum;
                }
            }
        }
    }
    out
}
