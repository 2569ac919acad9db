//! Prototype-based classification and the variational prototype objective.
//!
//! Covers the deterministic mean-prototype baseline and the memory-free
//! variational model where each class prototype is a single diagonal
//! Gaussian inferred from the support set.

use crate::gaussian::DiagonalGaussian;
use crate::networks::{posterior_z, prior_z_batch, GaussianNetVars};
use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("prototype set needs at least one class")]
    NoClasses,
    #[error("class {0} has an empty support set")]
    EmptySupport(usize),
    #[error("sample count must be >= 1")]
    NoSamples,
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    SquaredEuclidean,
    Cosine,
}

/// Per-class prototype representation: one vector per class, or a bank of
/// `L` sampled prototypes per class.
#[derive(Debug, Clone)]
pub enum PrototypeSet {
    /// `[N, d]` matrix of class means.
    Deterministic(Var),
    /// One `[L, d]` sample bank per class.
    Sampled(Vec<Var>),
}

impl PrototypeSet {
    pub fn n_classes<E: Scalar>(&self, tape: &Tape<E>) -> usize {
        match self {
            PrototypeSet::Deterministic(v) => tape.shape(*v)[0],
            PrototypeSet::Sampled(banks) => banks.len(),
        }
    }
}

/// Class means of the encoded support sets: the deterministic baseline.
pub fn protonet_prototypes<E: Scalar>(
    tape: &mut Tape<E>,
    support_features: &[Var],
) -> Result<PrototypeSet, ProtoError> {
    if support_features.is_empty() {
        return Err(ProtoError::NoClasses);
    }
    let mut means = Vec::with_capacity(support_features.len());
    for (i, &f) in support_features.iter().enumerate() {
        if tape.shape(f)[0] == 0 {
            return Err(ProtoError::EmptySupport(i));
        }
        means.push(tape.mean_rows(f)?);
    }
    Ok(PrototypeSet::Deterministic(tape.stack_rows(&means)?))
}

fn distance_logits<E: Scalar>(
    tape: &mut Tape<E>,
    query_features: Var,
    protos: Var,
    distance: Distance,
) -> Result<Var, ShapeError> {
    let d = match distance {
        Distance::SquaredEuclidean => tape.pairwise_sqdist(query_features, protos)?,
        Distance::Cosine => tape.pairwise_cosdist(query_features, protos)?,
    };
    Ok(tape.neg(d))
}

/// Likelihood pieces shared by training and evaluation.
pub struct ClassificationTerms {
    /// `(1/L) * sum_l sum_i -log p_l(y_i | x_i)`, the cross-entropy term.
    pub nll: Var,
    /// `[Q, N]` matrix of per-query class scores: log-probabilities for a
    /// deterministic set, the L-averaged log-likelihood for a sampled set.
    pub mean_log_probs: Var,
}

/// Log-softmax over negated distances to the prototypes; for sampled
/// prototypes the log-likelihood is averaged over the per-class sample banks
/// (sample `l` of every class forms one prototype matrix).
pub fn classification_terms<E: Scalar>(
    tape: &mut Tape<E>,
    query_features: Var,
    protos: &PrototypeSet,
    targets: &[usize],
    distance: Distance,
) -> Result<ClassificationTerms, ProtoError> {
    match protos {
        PrototypeSet::Deterministic(p) => {
            let logits = distance_logits(tape, query_features, *p, distance)?;
            let logp = tape.log_softmax(logits, 1)?;
            let nll = tape.pick_neg_sum(logp, targets)?;
            Ok(ClassificationTerms {
                nll,
                mean_log_probs: logp,
            })
        }
        PrototypeSet::Sampled(banks) => {
            if banks.is_empty() {
                return Err(ProtoError::NoClasses);
            }
            let l = tape.shape(banks[0])[0];
            if l == 0 {
                return Err(ProtoError::NoSamples);
            }
            let inv_l = E::one() / E::from_f64(l as f64);
            let mut nll_sum: Option<Var> = None;
            let mut score_sum: Option<Var> = None;
            for li in 0..l {
                let rows: Vec<(Var, usize)> = banks.iter().map(|&b| (b, li)).collect();
                let protos_l = tape.gather_stack_rows(&rows)?;
                let logits = distance_logits(tape, query_features, protos_l, distance)?;
                let logp = tape.log_softmax(logits, 1)?;
                let nll_l = tape.pick_neg_sum(logp, targets)?;
                nll_sum = Some(match nll_sum {
                    Some(acc) => tape.add(acc, nll_l)?,
                    None => nll_l,
                });
                score_sum = Some(match score_sum {
                    Some(acc) => tape.add(acc, logp)?,
                    None => logp,
                });
            }
            Ok(ClassificationTerms {
                nll: tape.scale(nll_sum.unwrap(), inv_l),
                mean_log_probs: tape.scale(score_sum.unwrap(), inv_l),
            })
        }
    }
}

/// Class log-probabilities `[Q, N]` for prediction. Sampled prototype scores
/// are renormalized with a final log-softmax so rows always exponentiate to
/// one; the argmax matches the averaged log-likelihood.
pub fn classify<E: Scalar>(
    tape: &mut Tape<E>,
    query_features: Var,
    protos: &PrototypeSet,
    distance: Distance,
) -> Result<Var, ProtoError> {
    let q = tape.shape(query_features)[0];
    let terms = classification_terms(tape, query_features, protos, &vec![0; q], distance)?;
    match protos {
        PrototypeSet::Deterministic(_) => Ok(terms.mean_log_probs),
        PrototypeSet::Sampled(_) => Ok(tape.log_softmax(terms.mean_log_probs, 1)?),
    }
}

/// Count argmax hits of a `[Q, N]` score matrix against targets.
pub fn count_correct<E: Scalar>(tape: &Tape<E>, scores: Var, targets: &[usize]) -> usize {
    let n = tape.shape(scores)[1];
    targets
        .iter()
        .enumerate()
        .filter(|(i, &t)| {
            let row = &tape.data(scores)[i * n..(i + 1) * n];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            best == t
        })
        .count()
}

/// Everything the trainer needs from one variational-prototype objective.
pub struct ElboTerms {
    /// Cross-entropy plus KL, the loss to differentiate.
    pub loss: Var,
    pub nll: Var,
    /// Sum over queries of `KL(q(z|S_n) || p(z|x_i))`.
    pub kl: Var,
    pub mean_log_probs: Var,
    pub posteriors: Vec<DiagonalGaussian>,
    pub sample_banks: Vec<Var>,
}

/// ELBO of the conditional log-likelihood for single-Gaussian prototype
/// posteriors `q(z | cond_n, h_S_n)`.
///
/// The per-class conditioning feature is the support mean itself in the
/// memory-free model, or an addressed-memory readout in the rote/transformed
/// variants. `class_query_rows` gives each class's row range inside
/// `query_features`; the prototype prior is evaluated per query and the KL
/// appears once per query, in closed form.
#[allow(clippy::too_many_arguments)]
pub fn conditioned_elbo<E: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<E>,
    q_net: &GaussianNetVars,
    p_net: &GaussianNetVars,
    cond: &[Var],
    h_bars: &[Var],
    query_features: Var,
    class_query_rows: &[(usize, usize)],
    targets: &[usize],
    l_samples: usize,
    variance_floor: Option<E>,
    distance: Distance,
    rng: &mut R,
) -> Result<ElboTerms, ProtoError> {
    if l_samples == 0 {
        return Err(ProtoError::NoSamples);
    }
    let n_way = cond.len();
    if n_way == 0 {
        return Err(ProtoError::NoClasses);
    }
    let d = tape.value(h_bars[0]).numel();

    // Per class: posterior from concat(cond, h_bar), then L reparameterized
    // prototype draws.
    let mut posteriors = Vec::with_capacity(n_way);
    let mut banks = Vec::with_capacity(n_way);
    for n in 0..n_way {
        let q = posterior_z(tape, q_net, cond[n], h_bars[n], variance_floor)?;
        let means = tape.reshape(q.mean, vec![1, d])?;
        let logvars = tape.reshape(q.log_var, vec![1, d])?;
        let noise: Vec<E> = (0..l_samples * d).map(|_| E::std_normal(rng)).collect();
        let bank = tape.mixture_rsample(means, logvars, noise, vec![0; l_samples])?;
        posteriors.push(q);
        banks.push(bank);
    }

    let protos = PrototypeSet::Sampled(banks.clone());
    let terms = classification_terms(tape, query_features, &protos, targets, distance)?;

    // Closed-form KL against the per-query prior, one term per query.
    let (pri_means, pri_logvars) = prior_z_batch(tape, p_net, query_features, variance_floor)?;
    let mut kl_sum: Option<Var> = None;
    for (n, &(from, to)) in class_query_rows.iter().enumerate() {
        let pm = tape.slice_rows(pri_means, from, to)?;
        let pv = tape.slice_rows(pri_logvars, from, to)?;
        let kls = tape.gauss_kl_batch(posteriors[n].mean, posteriors[n].log_var, pm, pv)?;
        let s = tape.sum_all(kls);
        kl_sum = Some(match kl_sum {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let kl = kl_sum.unwrap();
    let loss = tape.add(terms.nll, kl)?;
    Ok(ElboTerms {
        loss,
        nll: terms.nll,
        kl,
        mean_log_probs: terms.mean_log_probs,
        posteriors,
        sample_banks: banks,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::networks::GaussianNet;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feat_matrix(tape: &mut Tape<f64>, rows: &[Vec<f64>]) -> Var {
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        tape.constant(Tensor::new(vec![rows.len(), d], data).unwrap())
    }

    #[test]
    fn single_shot_prototype_is_the_support_feature() {
        let mut tape: Tape<f64> = Tape::new();
        let s = feat_matrix(&mut tape, &[vec![0.3, -0.7, 1.2]]);
        let protos = protonet_prototypes(&mut tape, &[s]).unwrap();
        let PrototypeSet::Deterministic(p) = protos else {
            panic!()
        };
        assert_eq!(tape.data(p), &[0.3, -0.7, 1.2]);
    }

    #[test]
    fn two_support_mean() {
        let mut tape: Tape<f64> = Tape::new();
        let s = feat_matrix(&mut tape, &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let protos = protonet_prototypes(&mut tape, &[s]).unwrap();
        let PrototypeSet::Deterministic(p) = protos else {
            panic!()
        };
        assert_eq!(tape.data(p), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn prototypes_match_independent_mean_and_ignore_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| f64::std_normal(&mut rng)).collect())
            .collect();
        let mut want = vec![0.0; 4];
        for r in &rows {
            for (w, &v) in want.iter_mut().zip(r) {
                *w += v / 5.0;
            }
        }
        let mut tape: Tape<f64> = Tape::new();
        let s = feat_matrix(&mut tape, &rows);
        let mut shuffled = rows.clone();
        shuffled.reverse();
        let s2 = feat_matrix(&mut tape, &shuffled);
        let p1 = protonet_prototypes(&mut tape, &[s]).unwrap();
        let p2 = protonet_prototypes(&mut tape, &[s2]).unwrap();
        let (PrototypeSet::Deterministic(a), PrototypeSet::Deterministic(b)) = (p1, p2) else {
            panic!()
        };
        for ((&x, &y), &w) in tape.data(a).iter().zip(tape.data(b)).zip(&want) {
            assert!((x - w).abs() < 1e-12);
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn equidistant_query_gets_uniform_distribution() {
        let mut tape: Tape<f64> = Tape::new();
        let q = feat_matrix(&mut tape, &[vec![0.0, 0.0]]);
        let protos = feat_matrix(
            &mut tape,
            &[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]],
        );
        let logp = classify(
            &mut tape,
            q,
            &PrototypeSet::Deterministic(protos),
            Distance::SquaredEuclidean,
        )
        .unwrap();
        for &v in tape.data(logp) {
            assert!((v.exp() - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn query_at_prototype_two_wins() {
        let mut tape: Tape<f64> = Tape::new();
        let q = feat_matrix(&mut tape, &[vec![5.0, 5.0]]);
        let protos = feat_matrix(&mut tape, &[vec![0.0, 0.0], vec![-3.0, 2.0], vec![5.0, 5.0]]);
        let logp = classify(
            &mut tape,
            q,
            &PrototypeSet::Deterministic(protos),
            Distance::SquaredEuclidean,
        )
        .unwrap();
        let best = tape
            .data(logp)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(best, 2);
    }

    #[test]
    fn two_class_distance_softmax_matches_formula() {
        // Squared distances (1.0, 3.0): softmax([-1,-3]) = (0.8808, 0.1192).
        let mut tape: Tape<f64> = Tape::new();
        let q = feat_matrix(&mut tape, &[vec![0.0]]);
        let protos = feat_matrix(&mut tape, &[vec![1.0], vec![3.0f64.sqrt()]]);
        let logp = classify(
            &mut tape,
            q,
            &PrototypeSet::Deterministic(protos),
            Distance::SquaredEuclidean,
        )
        .unwrap();
        assert!((tape.data(logp)[0].exp() - 0.8808).abs() < 1e-4);
        assert!((tape.data(logp)[1].exp() - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn sampled_classify_rows_are_valid_log_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape: Tape<f64> = Tape::new();
        let q = feat_matrix(
            &mut tape,
            &[vec![0.1, 0.2, 0.3], vec![-0.5, 0.0, 0.5]],
        );
        let banks: Vec<Var> = (0..3)
            .map(|_| {
                let data: Vec<f64> = (0..4 * 3).map(|_| f64::std_normal(&mut rng)).collect();
                tape.constant(Tensor::new(vec![4, 3], data).unwrap())
            })
            .collect();
        let logp = classify(
            &mut tape,
            q,
            &PrototypeSet::Sampled(banks),
            Distance::SquaredEuclidean,
        )
        .unwrap();
        for r in 0..2 {
            let s: f64 = tape.data(logp)[r * 3..(r + 1) * 3].iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_distance_is_scale_invariant_for_classification() {
        let mut tape: Tape<f64> = Tape::new();
        let q = feat_matrix(&mut tape, &[vec![2.0, 0.0]]);
        let protos = feat_matrix(&mut tape, &[vec![10.0, 0.1], vec![0.1, 10.0]]);
        let logp = classify(
            &mut tape,
            q,
            &PrototypeSet::Deterministic(protos),
            Distance::Cosine,
        )
        .unwrap();
        assert!(tape.data(logp)[0] > tape.data(logp)[1]);
    }

    /// Forced-floor posterior with mean tied to the support mean reproduces
    /// the deterministic prototype decisions episode for episode.
    #[test]
    fn floored_variational_prototypes_match_protonet_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut tape: Tape<f64> = Tape::new();
            let d = 8;
            let n_way = 4;
            let support: Vec<Var> = (0..n_way)
                .map(|_| {
                    let data: Vec<f64> = (0..3 * d).map(|_| f64::std_normal(&mut rng)).collect();
                    tape.constant(Tensor::new(vec![3, d], data).unwrap())
                })
                .collect();
            let queries: Vec<f64> = (0..6 * d).map(|_| f64::std_normal(&mut rng)).collect();
            let q = tape.constant(Tensor::new(vec![6, d], queries).unwrap());

            let det = protonet_prototypes(&mut tape, &support).unwrap();
            let det_scores = classify(&mut tape, q, &det, Distance::SquaredEuclidean).unwrap();

            let mut banks = Vec::new();
            for &s in &support {
                let mean = tape.mean_rows(s).unwrap();
                let means = tape.reshape(mean, vec![1, d]).unwrap();
                let lv = tape.constant(Tensor::full(vec![1, d], 1e-6f64.ln()));
                let noise: Vec<f64> = (0..5 * d).map(|_| f64::std_normal(&mut rng)).collect();
                let bank = tape.mixture_rsample(means, lv, noise, vec![0; 5]).unwrap();
                banks.push(bank);
            }
            let var_scores = classify(
                &mut tape,
                q,
                &PrototypeSet::Sampled(banks),
                Distance::SquaredEuclidean,
            )
            .unwrap();
            for r in 0..6 {
                let amax = |v: &[f64]| {
                    v.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0
                };
                assert_eq!(
                    amax(&tape.data(det_scores)[r * n_way..(r + 1) * n_way]),
                    amax(&tape.data(var_scores)[r * n_way..(r + 1) * n_way]),
                );
            }
        }
    }

    /// Monte-Carlo likelihood noise shrinks like sqrt(L).
    #[test]
    fn likelihood_average_stabilizes_with_more_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 3;
        let stds = |l: usize, rng: &mut ChaCha8Rng| {
            let mut vals = Vec::new();
            for _ in 0..40 {
                let mut tape: Tape<f64> = Tape::new();
                let q = feat_matrix(&mut tape, &[vec![0.2, -0.1, 0.4]]);
                let banks: Vec<Var> = (0..2)
                    .map(|c| {
                        let mean = if c == 0 { 0.0 } else { 1.0 };
                        let means = tape.constant(Tensor::full(vec![1, d], mean));
                        let lv = tape.constant(Tensor::full(vec![1, d], 0.0));
                        let noise: Vec<f64> =
                            (0..l * d).map(|_| f64::std_normal(rng)).collect();
                        tape.mixture_rsample(means, lv, noise, vec![0; l]).unwrap()
                    })
                    .collect();
                let terms = classification_terms(
                    &mut tape,
                    q,
                    &PrototypeSet::Sampled(banks),
                    &[0],
                    Distance::SquaredEuclidean,
                )
                .unwrap();
                vals.push(tape.item(terms.nll));
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64).sqrt()
        };
        let s100 = stds(100, &mut rng);
        let s1000 = stds(1000, &mut rng);
        let ratio = s100 / s1000;
        assert!(
            (2.0..5.0).contains(&ratio),
            "std ratio {ratio} should be near sqrt(10)"
        );
    }

    /// Straight-line plain-array reimplementation of the memory-free ELBO on
    /// a tiny episode, sharing parameters and noise with the tape version.
    #[test]
    fn elbo_matches_straight_line_reimplementation() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q_net: GaussianNet<f64> = GaussianNet::new(2 * d, d, d, &mut rng);
        let p_net: GaussianNet<f64> = GaussianNet::new(d, d, d, &mut rng);
        let h_bars_data: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..d).map(|_| f64::std_normal(&mut rng)).collect())
            .collect();
        let queries: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..d).map(|_| f64::std_normal(&mut rng)).collect())
            .collect();
        let targets = [0usize, 0, 1, 1];
        let l_samples = 3;

        // The tape draws one [L*d] noise block per class, in class order.
        let mut noise_rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape: Tape<f64> = Tape::new();
        let qv = q_net.bind(&mut tape);
        let pv = p_net.bind(&mut tape);
        let h_bars: Vec<Var> = h_bars_data
            .iter()
            .map(|h| tape.constant(Tensor::vector(h.clone())))
            .collect();
        let qf = feat_matrix(&mut tape, &queries);
        let terms = conditioned_elbo(
            &mut tape,
            &qv,
            &pv,
            &h_bars,
            &h_bars,
            qf,
            &[(0, 2), (2, 4)],
            &targets,
            l_samples,
            Some(1e-6),
            Distance::SquaredEuclidean,
            &mut noise_rng,
        )
        .unwrap();
        let got = tape.item(terms.loss);

        // Independent reimplementation with plain loops.
        let elu = |x: f64| if x > 0.0 { x } else { x.exp() - 1.0 };
        let forward = |net: &GaussianNet<f64>, x: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let lin = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
                let (di, do_) = (w.shape()[0], w.shape()[1]);
                (0..do_)
                    .map(|j| {
                        b.data()[j]
                            + (0..di).map(|i| x[i] * w.data()[i * do_ + j]).sum::<f64>()
                    })
                    .collect()
            };
            let h1: Vec<f64> = lin(x, &net.w1, &net.b1).into_iter().map(elu).collect();
            let h2: Vec<f64> = lin(&h1, &net.w2, &net.b2).into_iter().map(elu).collect();
            let head = lin(&h2, &net.w3, &net.b3);
            let floor = 1e-6f64.ln();
            (
                head[..d].to_vec(),
                head[d..].iter().map(|&v| v.max(floor)).collect(),
            )
        };
        let mut check_rng = ChaCha8Rng::seed_from_u64(99);
        let mut z: Vec<Vec<Vec<f64>>> = Vec::new(); // [class][l][d]
        let mut posteriors = Vec::new();
        for h in &h_bars_data {
            let x: Vec<f64> = h.iter().chain(h.iter()).copied().collect();
            let (mu, lv) = forward(&q_net, &x);
            let mut class_samples = Vec::new();
            for _ in 0..l_samples {
                let s: Vec<f64> = (0..d)
                    .map(|k| {
                        mu[k] + (0.5 * lv[k]).exp() * f64::std_normal(&mut check_rng)
                    })
                    .collect();
                class_samples.push(s);
            }
            z.push(class_samples);
            posteriors.push((mu, lv));
        }
        let mut nll = 0.0;
        for l in 0..l_samples {
            for (qi, qx) in queries.iter().enumerate() {
                let logits: Vec<f64> = (0..2)
                    .map(|n| -qx.iter().zip(&z[n][l]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .collect();
                let m = logits[0].max(logits[1]);
                let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
                nll -= logits[targets[qi]] - lse;
            }
        }
        nll /= l_samples as f64;
        let mut kl = 0.0;
        for (qi, qx) in queries.iter().enumerate() {
            let (pm, plv) = forward(&p_net, qx);
            let (qm, qlv) = &posteriors[targets[qi]];
            for k in 0..d {
                let diff = qm[k] - pm[k];
                kl += 0.5
                    * (plv[k] - qlv[k] + (qlv[k].exp() + diff * diff) * (-plv[k]).exp() - 1.0);
            }
        }
        let want = nll + kl;
        assert!(
            (got - want).abs() < 1e-6,
            "tape {got} vs straight-line {want}"
        );
    }
}
