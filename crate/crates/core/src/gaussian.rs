//! Diagonal Gaussians, reparameterized sampling, KL divergences and finite
//! mixtures. These carry the latent-memory and prototype posteriors, so every
//! quantity here lives on a [`Tape`] and is differentiable.

use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tape, Tensor, Var};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GaussianError {
    #[error("mixture has no components")]
    EmptyMixture,
    #[error("mixture weights must be nonnegative and sum to 1 (sum = {0})")]
    WeightsOffSimplex(f64),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Independent Gaussian per dimension, parameterized by mean and log-variance
/// nodes of identical shape.
#[derive(Debug, Clone, Copy)]
pub struct DiagonalGaussian {
    pub mean: Var,
    pub log_var: Var,
}

impl DiagonalGaussian {
    /// Wrap mean/log-variance nodes, clamping the variance from below when a
    /// floor is given.
    pub fn new<E: Scalar>(
        tape: &mut Tape<E>,
        mean: Var,
        log_var: Var,
        variance_floor: Option<E>,
    ) -> Result<Self, GaussianError> {
        if tape.shape(mean) != tape.shape(log_var) {
            return Err(ShapeError::Invalid {
                op: "diagonal_gaussian",
                msg: format!(
                    "mean shape {:?} != log_var shape {:?}",
                    tape.shape(mean),
                    tape.shape(log_var)
                ),
            }
            .into());
        }
        let log_var = match variance_floor {
            Some(floor) => tape.clamp_min(log_var, floor.ln()),
            None => log_var,
        };
        Ok(DiagonalGaussian { mean, log_var })
    }

    pub fn dim<E: Scalar>(&self, tape: &Tape<E>) -> usize {
        tape.value(self.mean).numel()
    }

    /// Constant-parameter distribution (useful in tests and oracles).
    pub fn constant<E: Scalar>(tape: &mut Tape<E>, mean: &[f64], log_var: &[f64]) -> Self {
        let m = tape.constant(Tensor::from_f64(vec![mean.len()], mean).unwrap());
        let lv = tape.constant(Tensor::from_f64(vec![log_var.len()], log_var).unwrap());
        DiagonalGaussian { mean: m, log_var: lv }
    }
}

/// One reparameterized draw: `mean + exp(0.5 log_var) * eps`, with gradients
/// flowing into both parameters.
pub fn rsample<E: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<E>,
    dist: &DiagonalGaussian,
    rng: &mut R,
) -> Var {
    let d = tape.value(dist.mean).numel();
    let noise: Vec<E> = (0..d).map(|_| E::std_normal(rng)).collect();
    rsample_with_noise(tape, dist, &noise)
}

/// `rsample` with caller-supplied standard-normal noise.
pub fn rsample_with_noise<E: Scalar>(
    tape: &mut Tape<E>,
    dist: &DiagonalGaussian,
    noise: &[E],
) -> Var {
    let shape = tape.shape(dist.mean).to_vec();
    let half_lv = tape.scale(dist.log_var, E::from_f64(0.5));
    let std = tape.exp(half_lv);
    let eps = tape.constant(Tensor::new(shape, noise.to_vec()).unwrap());
    let scaled = tape.mul(std, eps).expect("rsample shapes");
    tape.add(dist.mean, scaled).expect("rsample shapes")
}

/// Closed-form KL(q || p) between diagonal Gaussians; scalar node, >= 0.
pub fn kl_gaussian<E: Scalar>(
    tape: &mut Tape<E>,
    q: &DiagonalGaussian,
    p: &DiagonalGaussian,
) -> Result<Var, GaussianError> {
    let d = q.dim(tape);
    if p.dim(tape) != d {
        return Err(ShapeError::DimMismatch {
            op: "kl_gaussian",
            axis: 0,
            lhs: d,
            rhs: p.dim(tape),
        }
        .into());
    }
    let pm = tape.reshape(p.mean, vec![1, d])?;
    let pv = tape.reshape(p.log_var, vec![1, d])?;
    let kl = tape.gauss_kl_batch(q.mean, q.log_var, pm, pv)?;
    Ok(tape.sum_all(kl))
}

/// Finite mixture of diagonal Gaussians with stacked component banks.
///
/// `weights` holds the detached simplex values used for ancestral sampling;
/// `log_weights`, when present, is the differentiable node feeding the
/// mixture density (None means exactly uniform).
#[derive(Debug, Clone)]
pub struct GaussianMixture<E> {
    pub weights: Vec<E>,
    pub log_weights: Option<Var>,
    pub means: Var,
    pub log_vars: Var,
    pub dim: usize,
}

impl<E: Scalar> GaussianMixture<E> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn stack_components(
        tape: &mut Tape<E>,
        components: &[DiagonalGaussian],
    ) -> Result<(Var, Var, usize), GaussianError> {
        if components.is_empty() {
            return Err(GaussianError::EmptyMixture);
        }
        let d = components[0].dim(tape);
        let means: Vec<Var> = components.iter().map(|c| c.mean).collect();
        let lvs: Vec<Var> = components.iter().map(|c| c.log_var).collect();
        let means = tape.stack_rows(&means)?;
        let log_vars = tape.stack_rows(&lvs)?;
        Ok((means, log_vars, d))
    }

    /// Mixture from explicit simplex weights.
    pub fn from_components(
        tape: &mut Tape<E>,
        weights: &[E],
        components: &[DiagonalGaussian],
    ) -> Result<Self, GaussianError> {
        if weights.len() != components.len() {
            return Err(ShapeError::DimMismatch {
                op: "gaussian_mixture",
                axis: 0,
                lhs: weights.len(),
                rhs: components.len(),
            }
            .into());
        }
        validate_simplex(weights)?;
        let (means, log_vars, d) = Self::stack_components(tape, components)?;
        let lw = Tensor::vector(weights.iter().map(|&w| w.ln()).collect());
        let log_weights = tape.constant(lw);
        Ok(GaussianMixture {
            weights: weights.to_vec(),
            log_weights: Some(log_weights),
            means,
            log_vars,
            dim: d,
        })
    }

    /// Equally weighted mixture.
    pub fn uniform(
        tape: &mut Tape<E>,
        components: &[DiagonalGaussian],
    ) -> Result<Self, GaussianError> {
        let (means, log_vars, d) = Self::stack_components(tape, components)?;
        let n = components.len();
        Ok(GaussianMixture {
            weights: vec![E::one() / E::from_f64(n as f64); n],
            log_weights: None,
            means,
            log_vars,
            dim: d,
        })
    }

    /// Mixture over pre-stacked `[A,d]` banks with a differentiable
    /// log-weight node (e.g. the log-softmax of addressing logits).
    pub fn from_banks(
        tape: &Tape<E>,
        log_weights: Var,
        means: Var,
        log_vars: Var,
    ) -> Result<Self, GaussianError> {
        let a = tape.value(log_weights).numel();
        if a == 0 {
            return Err(GaussianError::EmptyMixture);
        }
        let weights: Vec<E> = tape.data(log_weights).iter().map(|&l| l.exp()).collect();
        validate_simplex(&weights)?;
        Ok(GaussianMixture {
            weights,
            log_weights: Some(log_weights),
            means,
            log_vars,
            dim: tape.shape(means)[1],
        })
    }

    /// Draw a component index from the detached weights.
    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = E::uniform(rng);
        let mut acc = E::zero();
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }
}

fn validate_simplex<E: Scalar>(weights: &[E]) -> Result<(), GaussianError> {
    if weights.is_empty() {
        return Err(GaussianError::EmptyMixture);
    }
    let sum: f64 = weights.iter().map(|w| w.as_f64()).sum();
    if weights.iter().any(|w| w.as_f64() < 0.0) || (sum - 1.0).abs() > 1e-5 {
        return Err(GaussianError::WeightsOffSimplex(sum));
    }
    Ok(())
}

/// Ancestral sample: draw a component, then reparameterize within it.
/// Returns the chosen index and a `[d]` sample node.
pub fn mixture_sample<E: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<E>,
    mix: &GaussianMixture<E>,
    rng: &mut R,
) -> Result<(usize, Var), GaussianError> {
    if mix.is_empty() {
        return Err(GaussianError::EmptyMixture);
    }
    let comp = mix.sample_component(rng);
    let noise: Vec<E> = (0..mix.dim).map(|_| E::std_normal(rng)).collect();
    let s = tape.mixture_rsample(mix.means, mix.log_vars, noise, vec![comp])?;
    let s = tape.reshape(s, vec![mix.dim])?;
    Ok((comp, s))
}

/// `J` ancestral samples as a `[J,d]` node plus the chosen indices.
pub fn mixture_sample_batch<E: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<E>,
    mix: &GaussianMixture<E>,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Var), GaussianError> {
    if mix.is_empty() {
        return Err(GaussianError::EmptyMixture);
    }
    let comps: Vec<usize> = (0..n).map(|_| mix.sample_component(rng)).collect();
    let noise: Vec<E> = (0..n * mix.dim).map(|_| E::std_normal(rng)).collect();
    let s = tape.mixture_rsample(mix.means, mix.log_vars, noise, comps.clone())?;
    Ok((comps, s))
}

/// log sum_a w_a N(x; mu_a, sigma_a^2), scalar node.
pub fn mixture_log_density<E: Scalar>(
    tape: &mut Tape<E>,
    mix: &GaussianMixture<E>,
    x: Var,
) -> Result<Var, GaussianError> {
    if mix.is_empty() {
        return Err(GaussianError::EmptyMixture);
    }
    let xs = tape.reshape(x, vec![1, mix.dim])?;
    let ld = tape.gauss_mix_log_density(xs, mix.means, mix.log_vars, mix.log_weights)?;
    Ok(tape.sum_all(ld))
}

/// Monte-Carlo `KL(mixture || p)`: average of `log q(x_j) - log p(x_j)` over
/// reparameterized mixture draws. Differentiable through both the samples
/// and the densities.
pub fn kl_mixture_vs_gaussian_mc<E: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<E>,
    mix: &GaussianMixture<E>,
    p: &DiagonalGaussian,
    n_samples: usize,
    rng: &mut R,
) -> Result<Var, GaussianError> {
    if mix.is_empty() {
        return Err(GaussianError::EmptyMixture);
    }
    let (_, xs) = mixture_sample_batch(tape, mix, n_samples, rng)?;
    kl_mc_from_samples(tape, mix, p, xs)
}

/// The MC KL estimator over externally drawn mixture samples `xs: [n,d]`.
pub fn kl_mc_from_samples<E: Scalar>(
    tape: &mut Tape<E>,
    mix: &GaussianMixture<E>,
    p: &DiagonalGaussian,
    xs: Var,
) -> Result<Var, GaussianError> {
    let d = mix.dim;
    let log_q = tape.gauss_mix_log_density(xs, mix.means, mix.log_vars, mix.log_weights)?;
    let pm = tape.reshape(p.mean, vec![1, d])?;
    let pv = tape.reshape(p.log_var, vec![1, d])?;
    let log_p = tape.gauss_mix_log_density(xs, pm, pv, None)?;
    let diff = tape.sub(log_q, log_p)?;
    Ok(tape.mean_all(diff))
}
