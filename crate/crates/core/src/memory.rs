//! Long-term semantic memory: one slot per seen class, content addressing by
//! dot product, recall as inference of a latent memory variable from the
//! addressed mixture, and slot consolidation by graph attention over each
//! episode's features.
//!
//! Slots are constants once written. To still train the attention vector,
//! each slot remembers its last write (old value + episode features); when a
//! store is bound to a tape in training mode the slot value is rebuilt from
//! those constants and the current attention vector, so gradients reach the
//! attention weights through the next episodes' recalls while the chain is
//! truncated at the previous slot value.

use crate::gaussian::GaussianMixture;
use crate::networks::{memory_net_batch, posterior_z_batch, GaussianNetVars};
use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("memory is cold (no slots yet)")]
    ColdStore,
    #[error("class {0} not present in memory")]
    UnknownClass(i64),
    #[error("class {0} already has a memory slot")]
    DuplicateClass(i64),
    #[error("update needs at least one feature")]
    EmptyFeatures,
    #[error("feature dimension {got} does not match memory dimension {want}")]
    DimMismatch { want: usize, got: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Gaussian(#[from] crate::gaussian::GaussianError),
}

/// Nonlinearity applied to the attention-pooled slot summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotActivation {
    Softmax,
    Identity,
}

const LEAKY_SLOPE: f64 = 0.2;

/// Record of a slot's most recent attention write: row 0 is the slot value
/// at write time, the remaining rows are that episode's class features.
#[derive(Debug, Clone)]
pub struct SlotWrite<E> {
    pub features: Tensor<E>,
    pub alpha: E,
    pub sigma: SlotActivation,
}

#[derive(Debug, Clone)]
pub struct MemorySlot<E> {
    pub class_id: i64,
    /// Value before the last write (the truncation point).
    pub base: Tensor<E>,
    pub write: Option<SlotWrite<E>>,
}

/// Ordered per-class key store plus the attention parameters of the
/// consolidation rule.
#[derive(Debug, Clone)]
pub struct MemoryStore<E> {
    slots: Vec<MemorySlot<E>>,
    pub dim: usize,
    pub alpha: E,
    pub capacity: usize,
    pub sigma: SlotActivation,
    /// Similarity vector of the single-layer attention net, length 2d.
    pub attention_w: Tensor<E>,
}

impl<E: Scalar> MemoryStore<E> {
    pub fn new<R: Rng>(
        dim: usize,
        alpha: E,
        capacity: usize,
        sigma: SlotActivation,
        rng: &mut R,
    ) -> Self {
        MemoryStore {
            slots: Vec::new(),
            dim,
            alpha,
            capacity,
            sigma,
            attention_w: crate::init::fan_in_tensor(rng, vec![2 * dim], 2 * dim, 1.0),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[MemorySlot<E>] {
        &self.slots
    }

    pub fn class_ids(&self) -> Vec<i64> {
        self.slots.iter().map(|s| s.class_id).collect()
    }

    pub fn contains(&self, class_id: i64) -> bool {
        self.slots.iter().any(|s| s.class_id == class_id)
    }

    fn slot_index(&self, class_id: i64) -> Option<usize> {
        self.slots.iter().position(|s| s.class_id == class_id)
    }

    /// Materialized value of a slot under the current attention vector.
    pub fn slot_value(&self, slot: &MemorySlot<E>) -> Tensor<E> {
        match &slot.write {
            None => slot.base.clone(),
            Some(w) if w.alpha == E::one() => slot.base.clone(),
            Some(w) => {
                let (_, pooled) = attention_pool(
                    self.attention_w.data(),
                    &w.features,
                    E::from_f64(LEAKY_SLOPE),
                    w.sigma,
                );
                let mut out = slot.base.clone();
                let keep = w.alpha;
                let add = E::one() - w.alpha;
                for (o, &p) in out.data_mut().iter_mut().zip(&pooled) {
                    *o = keep * *o + add * p;
                }
                out
            }
        }
    }

    /// All slot values as an `[A, d]` matrix.
    pub fn materialized_keys(&self) -> Tensor<E> {
        let mut data = Vec::with_capacity(self.slots.len() * self.dim);
        for slot in &self.slots {
            data.extend_from_slice(self.slot_value(slot).data());
        }
        Tensor::new(vec![self.slots.len(), self.dim], data).expect("key matrix")
    }

    /// Rebuild a store from serialized keys; write history is not retained.
    pub fn from_keys(
        class_ids: Vec<i64>,
        keys: Tensor<E>,
        alpha: E,
        capacity: usize,
        sigma: SlotActivation,
        attention_w: Tensor<E>,
    ) -> Self {
        let dim = attention_w.numel() / 2;
        let slots = class_ids
            .into_iter()
            .enumerate()
            .map(|(i, class_id)| MemorySlot {
                class_id,
                base: Tensor::new(vec![dim], keys.row(i).to_vec()).expect("key row"),
                write: None,
            })
            .collect();
        MemoryStore {
            slots,
            dim,
            alpha,
            capacity,
            sigma,
            attention_w,
        }
    }

    /// Append a new class slot with its mean feature as the key. Returns
    /// false (and leaves the store unchanged) when the store is at capacity.
    pub fn append_class(
        &mut self,
        class_id: i64,
        mean_feature: Tensor<E>,
    ) -> Result<bool, MemoryError> {
        if self.contains(class_id) {
            return Err(MemoryError::DuplicateClass(class_id));
        }
        if mean_feature.numel() != self.dim {
            return Err(MemoryError::DimMismatch {
                want: self.dim,
                got: mean_feature.numel(),
            });
        }
        if self.slots.len() >= self.capacity {
            return Ok(false);
        }
        self.slots.push(MemorySlot {
            class_id,
            base: mean_feature,
            write: None,
        });
        Ok(true)
    }

    /// Graph-attention consolidation: freeze the slot's current value, then
    /// blend it with the attention-pooled summary of `{slot} U features`.
    pub fn attention_update(
        &mut self,
        class_id: i64,
        features: &[Tensor<E>],
    ) -> Result<(), MemoryError> {
        if features.is_empty() {
            return Err(MemoryError::EmptyFeatures);
        }
        let idx = self
            .slot_index(class_id)
            .ok_or(MemoryError::UnknownClass(class_id))?;
        for f in features {
            if f.numel() != self.dim {
                return Err(MemoryError::DimMismatch {
                    want: self.dim,
                    got: f.numel(),
                });
            }
        }
        let old = self.slot_value(&self.slots[idx]);
        let mut rows: Vec<E> = Vec::with_capacity((features.len() + 1) * self.dim);
        rows.extend_from_slice(old.data());
        for f in features {
            rows.extend_from_slice(f.data());
        }
        let features =
            Tensor::new(vec![features.len() + 1, self.dim], rows).expect("write features");
        let slot = &mut self.slots[idx];
        slot.base = old;
        slot.write = Some(SlotWrite {
            features,
            alpha: self.alpha,
            sigma: self.sigma,
        });
        Ok(())
    }

    /// Ablation update: unweighted mean of the episode features (the slot
    /// itself excluded) in place of the attention pool, then the same blend.
    pub fn mean_update(
        &mut self,
        class_id: i64,
        features: &[Tensor<E>],
    ) -> Result<(), MemoryError> {
        if features.is_empty() {
            return Err(MemoryError::EmptyFeatures);
        }
        let idx = self
            .slot_index(class_id)
            .ok_or(MemoryError::UnknownClass(class_id))?;
        let old = self.slot_value(&self.slots[idx]);
        let inv = E::one() / E::from_f64(features.len() as f64);
        let mut mean = vec![E::zero(); self.dim];
        for f in features {
            if f.numel() != self.dim {
                return Err(MemoryError::DimMismatch {
                    want: self.dim,
                    got: f.numel(),
                });
            }
            for (m, &v) in mean.iter_mut().zip(f.data()) {
                *m += v * inv;
            }
        }
        let slot = &mut self.slots[idx];
        let keep = self.alpha;
        let add = E::one() - self.alpha;
        let mut base = old;
        if self.alpha < E::one() {
            for (b, &m) in base.data_mut().iter_mut().zip(&mean) {
                *b = keep * *b + add * m;
            }
        }
        slot.base = base;
        slot.write = None;
        Ok(())
    }
}

/// Data-level attention pool shared by materialization and tests: softmax of
/// LeakyReLU similarity coefficients over all nodes (slot first), then the
/// weighted feature sum through the slot activation. Returns (beta, pooled).
pub fn attention_pool<E: Scalar>(
    w: &[E],
    features: &Tensor<E>,
    slope: E,
    sigma: SlotActivation,
) -> (Vec<E>, Vec<E>) {
    let n = features.shape()[0];
    let d = features.shape()[1];
    let slot = features.row(0);
    let (w_left, w_right) = w.split_at(d);
    let slot_dot: E = slot.iter().zip(w_left).map(|(&a, &b)| a * b).sum();
    let mut e: Vec<E> = (0..n)
        .map(|i| {
            let h: E = features.row(i).iter().zip(w_right).map(|(&a, &b)| a * b).sum();
            let v = slot_dot + h;
            if v > E::zero() {
                v
            } else {
                slope * v
            }
        })
        .collect();
    let max = e.iter().copied().fold(E::neg_infinity(), E::max);
    let mut sum = E::zero();
    for v in e.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in e.iter_mut() {
        *v /= sum;
    }
    let mut pooled = vec![E::zero(); d];
    for (i, &b) in e.iter().enumerate() {
        for (p, &f) in pooled.iter_mut().zip(features.row(i)) {
            *p += b * f;
        }
    }
    let pooled = apply_sigma(pooled, sigma);
    (e, pooled)
}

fn apply_sigma<E: Scalar>(mut v: Vec<E>, sigma: SlotActivation) -> Vec<E> {
    match sigma {
        SlotActivation::Identity => v,
        SlotActivation::Softmax => {
            let max = v.iter().copied().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for x in v.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in v.iter_mut() {
                *x /= sum;
            }
            v
        }
    }
}

/// A store bound onto a tape: the `[A, d]` slot matrix plus slot ids.
#[derive(Debug, Clone)]
pub struct BoundMemory {
    pub slot_matrix: Var,
    pub class_ids: Vec<i64>,
}

/// Bind the store for one episode. With `attention_w_var` present, slots
/// carrying a write record are rebuilt on-tape from their frozen inputs so
/// the attention vector receives gradients; otherwise the materialized
/// values enter as constants.
pub fn bind_store<E: Scalar>(
    tape: &mut Tape<E>,
    store: &MemoryStore<E>,
    attention_w_var: Option<Var>,
) -> Result<BoundMemory, MemoryError> {
    if store.is_empty() {
        return Err(MemoryError::ColdStore);
    }
    let slot_matrix = match attention_w_var {
        None => tape.constant(store.materialized_keys()),
        Some(w_var) => {
            let mut rows = Vec::with_capacity(store.len());
            for slot in store.slots() {
                rows.push(bind_slot(tape, store, slot, w_var)?);
            }
            tape.stack_rows(&rows)?
        }
    };
    Ok(BoundMemory {
        slot_matrix,
        class_ids: store.class_ids(),
    })
}

fn bind_slot<E: Scalar>(
    tape: &mut Tape<E>,
    store: &MemoryStore<E>,
    slot: &MemorySlot<E>,
    w_var: Var,
) -> Result<Var, MemoryError> {
    match &slot.write {
        None => Ok(tape.constant(slot.base.clone())),
        Some(w) if w.alpha == E::one() => Ok(tape.constant(slot.base.clone())),
        Some(w) => {
            let n = w.features.shape()[0];
            let d = store.dim;
            // [n, 2d] rows of [slot, h_i] for the similarity coefficients.
            let mut full = Vec::with_capacity(n * 2 * d);
            for i in 0..n {
                full.extend_from_slice(w.features.row(0));
                full.extend_from_slice(w.features.row(i));
            }
            let full = tape.constant(Tensor::new(vec![n, 2 * d], full).expect("attn rows"));
            let feats = tape.constant(w.features.clone());
            let e = tape.matvec(full, w_var)?;
            let e = tape.leaky_relu(e, E::from_f64(LEAKY_SLOPE));
            let beta = tape.softmax(e, 0)?;
            let pooled = tape.vecmat(beta, feats)?;
            let pooled = match w.sigma {
                SlotActivation::Identity => pooled,
                SlotActivation::Softmax => tape.softmax(pooled, 0)?,
            };
            let scaled = tape.scale(pooled, E::one() - w.alpha);
            let kept = tape.constant({
                let mut t = slot.base.clone();
                for v in t.data_mut() {
                    *v *= w.alpha;
                }
                t
            });
            Ok(tape.add(scaled, kept)?)
        }
    }
}

/// Content addressing: softmax over slot-key dot products with the support
/// mean (Gumbel-free path).
pub struct AddressWeights {
    pub logits: Var,
    pub weights: Var,
    pub log_weights: Var,
}

pub fn address<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &BoundMemory,
    h_bar: Var,
) -> Result<AddressWeights, MemoryError> {
    let logits = tape.matvec(bound.slot_matrix, h_bar)?;
    let weights = tape.softmax(logits, 0)?;
    let log_weights = tape.log_softmax(logits, 0)?;
    Ok(AddressWeights {
        logits,
        weights,
        log_weights,
    })
}

/// Gumbel-softmax relaxation of the categorical address at the given
/// temperature; differentiable in the logits.
pub fn address_gumbel<E: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<E>,
    bound: &BoundMemory,
    h_bar: Var,
    temperature: f64,
    rng: &mut R,
) -> Result<AddressWeights, MemoryError> {
    assert!(temperature > 0.0, "gumbel temperature must be positive");
    let logits = tape.matvec(bound.slot_matrix, h_bar)?;
    let a = tape.value(logits).numel();
    let gumbel: Vec<E> = (0..a)
        .map(|_| {
            let u: E = E::uniform(rng);
            let tiny = E::from_f64(1e-12);
            -(-(u + tiny).ln()).max(tiny).ln()
        })
        .collect();
    let noise = tape.constant(Tensor::vector(gumbel));
    let noisy = tape.add(logits, noise)?;
    let scaled = tape.scale(noisy, E::from_f64(1.0 / temperature));
    let weights = tape.softmax(scaled, 0)?;
    let log_weights = tape.log_softmax(scaled, 0)?;
    Ok(AddressWeights {
        logits: scaled,
        weights,
        log_weights,
    })
}

/// Result of a memory recall: the addressed latent-memory mixture and `J`
/// ancestral samples from it.
pub struct Recall<E> {
    pub address: AddressWeights,
    pub mixture: GaussianMixture<E>,
    pub samples: Var,
    pub component_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub enum Addressing {
    Softmax,
    Gumbel { temperature: f64 },
}

/// Build the latent-memory mixture (addressing weights over the
/// memory-conditional components, usually from [`memory_components`]) and
/// draw `J` reparameterized samples.
#[allow(clippy::too_many_arguments)]
pub fn recall<E: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<E>,
    bound: &BoundMemory,
    h_bar: Var,
    comp_means: Var,
    comp_logvars: Var,
    j_samples: usize,
    addressing: Addressing,
    rng: &mut R,
) -> Result<Recall<E>, MemoryError> {
    assert!(j_samples >= 1, "recall needs at least one sample");
    let addr = match addressing {
        Addressing::Softmax => address(tape, bound, h_bar)?,
        Addressing::Gumbel { temperature } => {
            address_gumbel(tape, bound, h_bar, temperature, rng)?
        }
    };
    let mixture =
        GaussianMixture::from_banks(tape, addr.log_weights, comp_means, comp_logvars)?;
    let (component_indices, samples) =
        crate::gaussian::mixture_sample_batch(tape, &mixture, j_samples, rng)?;
    Ok(Recall {
        address: addr,
        mixture,
        samples,
        component_indices,
    })
}

/// The latent-memory mixture components: the shared-parameter network over
/// every slot key.
pub fn memory_components<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &BoundMemory,
    mem_net: &GaussianNetVars,
    floor: Option<E>,
) -> Result<(Var, Var), MemoryError> {
    Ok(memory_net_batch(tape, mem_net, bound.slot_matrix, floor)?)
}

/// Hierarchical prototype bank: `L` draws from the equally-weighted mixture
/// of posteriors conditioned on the `J` latent-memory samples (sample `l`
/// uses component `l mod J`).
pub struct PrototypeBank {
    pub post_means: Var,
    pub post_logvars: Var,
    pub samples: Var,
}

pub fn hierarchical_prototype<E: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<E>,
    q_net: &GaussianNetVars,
    m_samples: Var,
    h_bar: Var,
    l_samples: usize,
    floor: Option<E>,
    rng: &mut R,
) -> Result<PrototypeBank, MemoryError> {
    let j = tape.shape(m_samples)[0];
    let d = tape.value(h_bar).numel();
    let (post_means, post_logvars) = posterior_z_batch(tape, q_net, m_samples, h_bar, floor)?;
    let comp_of_row: Vec<usize> = (0..l_samples).map(|l| l % j).collect();
    let noise: Vec<E> = (0..l_samples * d).map(|_| E::std_normal(rng)).collect();
    let samples = tape.mixture_rsample(post_means, post_logvars, noise, comp_of_row)?;
    Ok(PrototypeBank {
        post_means,
        post_logvars,
        samples,
    })
}

/// Rote recall: the un-exponentiated similarity-normalized key average. A
/// non-positive normalizer falls back to softmax weights (logged). Returns
/// the readout and whether the fallback fired.
pub fn recall_rote<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &BoundMemory,
    h_bar: Var,
) -> Result<(Var, bool), MemoryError> {
    let logits = tape.matvec(bound.slot_matrix, h_bar)?;
    let normalizer: E = tape.data(logits).iter().copied().sum();
    let fallback = normalizer <= E::from_f64(1e-9);
    let weights = if fallback {
        log::warn!(
            "rote recall: non-positive similarity normalizer {normalizer:?}, using softmax"
        );
        tape.softmax(logits, 0)?
    } else {
        tape.normalize_sum(logits)
    };
    Ok((tape.vecmat(weights, bound.slot_matrix)?, fallback))
}

/// Learnable affine readout transformation for the transformed-memory
/// ablation; identity-initializable so the rote variant is its zero point.
#[derive(Debug, Clone)]
pub struct Transform<E> {
    pub w: Tensor<E>,
    pub b: Tensor<E>,
}

impl<E: Scalar> Transform<E> {
    pub fn identity(dim: usize) -> Self {
        let mut w = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = E::one();
        }
        Transform {
            w,
            b: Tensor::zeros(vec![dim]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> TransformVars {
        TransformVars {
            w: tape.param(&self.w),
            b: tape.param(&self.b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TransformVars {
    pub w: Var,
    pub b: Var,
}

/// Rote recall followed by the learnable transformation.
pub fn recall_transformed<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &BoundMemory,
    h_bar: Var,
    transform: &TransformVars,
) -> Result<(Var, bool), MemoryError> {
    let (m_bar, fallback) = recall_rote(tape, bound, h_bar)?;
    let d = tape.value(m_bar).numel();
    let row = tape.reshape(m_bar, vec![1, d])?;
    let out = tape.linear(row, transform.w, transform.b)?;
    Ok((tape.reshape(out, vec![d])?, fallback))
}
