//! Episodic training: the full hierarchical variational objective, the Adam
//! loop over task batches, memory update scheduling, and evaluation.

use crate::data::{
    sample_episode, split_synthetic, synth_gaussian_clusters, ClassDataset, DataError, Episode,
    Split, SplitDatasets,
};
use crate::gaussian::GaussianError;
use crate::memory::{
    bind_store, memory_components, recall, recall_rote, recall_transformed, Addressing,
    MemoryError, MemoryStore, SlotActivation, Transform, TransformVars,
};
use crate::networks::{
    encode, memory_net, prior_z_batch, BnBatchStats, EncoderArch, EncoderVars, GaussianNetVars,
    Networks,
};
use crate::proto::{
    classification_terms, conditioned_elbo, count_correct, protonet_prototypes, Distance,
    ProtoError, PrototypeSet,
};
use crate::rng::{derive, stream};
use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tape, TapeError, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {field}: {message}")]
    Config { field: &'static str, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite loss (ce={ce}, kl_z={kl_z}, kl_m={kl_m})")]
    NonFinite { ce: f64, kl_z: f64, kl_m: f64 },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Protonet,
    Vpn,
    Vsm,
    Rote,
    Transformed,
    MeanUpdate,
    Gumbel,
}

impl AblationMode {
    pub fn uses_memory(self) -> bool {
        !matches!(self, AblationMode::Protonet | AblationMode::Vpn)
    }

    /// Modes whose recall goes through the latent-memory mixture.
    pub fn hierarchical(self) -> bool {
        matches!(
            self,
            AblationMode::Vsm | AblationMode::MeanUpdate | AblationMode::Gumbel
        )
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AblationMode::Protonet => "protonet",
            AblationMode::Vpn => "vpn",
            AblationMode::Vsm => "vsm",
            AblationMode::Rote => "rote",
            AblationMode::Transformed => "transformed",
            AblationMode::MeanUpdate => "mean_update",
            AblationMode::Gumbel => "gumbel",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// How the z-space KL against the per-query prior is estimated in the
/// hierarchical model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// Reparameterized Monte-Carlo estimate through the posterior mixture.
    Mc,
    /// Average of closed-form Gaussian KLs over the per-sample posteriors.
    AvgGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub min_temperature: f64,
    /// Exponential decay rate per iteration.
    pub anneal: f64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            temperature: 1.0,
            min_temperature: 0.5,
            anneal: 1e-4,
        }
    }
}

impl GumbelConfig {
    pub fn tau_at(&self, iteration: u64) -> f64 {
        (self.temperature * (-self.anneal * iteration as f64).exp()).max(self.min_temperature)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Gaussian-blob classes rendered as small images.
    Synthetic {
        classes: usize,
        train: usize,
        val: usize,
        test: usize,
        image_size: usize,
        samples_per_class: usize,
        spread: f64,
    },
    /// Directory of per-class image folders.
    ImageFolder {
        path: String,
        train: crate::data::SplitSize,
        val: crate::data::SplitSize,
        test: crate::data::SplitSize,
        image_size: usize,
        channels: usize,
        #[serde(default)]
        augment_rotations: bool,
    },
}

impl DatasetConfig {
    pub fn image_size(&self) -> usize {
        match self {
            DatasetConfig::Synthetic { image_size, .. } => *image_size,
            DatasetConfig::ImageFolder { image_size, .. } => *image_size,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            DatasetConfig::Synthetic { .. } => 1,
            DatasetConfig::ImageFolder { channels, .. } => *channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub blocks: usize,
    #[serde(default)]
    pub pool_valid: bool,
    /// Dropout value as written in the architecture tables.
    pub dropout: f64,
    /// Whether `dropout` is a keep-probability (the original framework's
    /// convention) or a drop-probability.
    #[serde(default = "default_true")]
    pub dropout_is_keep_prob: bool,
    #[serde(default)]
    pub batch_norm: bool,
}

fn default_true() -> bool {
    true
}

impl EncoderConfig {
    pub fn arch(&self, dataset: &DatasetConfig) -> EncoderArch {
        let rate = if self.dropout_is_keep_prob {
            1.0 - self.dropout
        } else {
            self.dropout
        };
        EncoderArch {
            image_size: dataset.image_size(),
            in_channels: dataset.channels(),
            channels: self.channels,
            blocks: self.blocks,
            pool_valid: self.pool_valid,
            dropout_rate: rate,
            batch_norm: self.batch_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    #[serde(default = "default_queries")]
    pub queries_per_class: usize,
    pub tasks_per_batch: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    /// Monte-Carlo samples for the latent memory.
    #[serde(default = "default_j")]
    pub j_samples: usize,
    /// Monte-Carlo samples for the prototypes.
    #[serde(default = "default_l")]
    pub l_samples: usize,
    /// Memory retention factor in (0, 1].
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_capacity")]
    pub memory_capacity: usize,
    pub mode: AblationMode,
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default = "default_floor")]
    pub variance_floor: f64,
    #[serde(default = "default_distance")]
    pub distance: Distance,
    #[serde(default = "default_sigma")]
    pub slot_activation: SlotActivation,
    #[serde(default)]
    pub gumbel: GumbelConfig,
    #[serde(default = "default_kl_mode")]
    pub kl_mode: KlMode,
    /// Rebuild written slots on-tape so the attention vector trains.
    #[serde(default = "default_true")]
    pub train_attention: bool,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    /// Worker threads for the episodes of one batch; 0 picks the rayon
    /// default. Any setting is bitwise reproducible.
    #[serde(default)]
    pub workers: usize,
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
}

fn default_queries() -> usize {
    15
}
fn default_j() -> usize {
    10
}
fn default_l() -> usize {
    10
}
fn default_alpha() -> f64 {
    0.7
}
fn default_capacity() -> usize {
    4096
}
fn default_precision() -> Precision {
    Precision::F32
}
fn default_floor() -> f64 {
    1e-6
}
fn default_distance() -> Distance {
    Distance::SquaredEuclidean
}
fn default_sigma() -> SlotActivation {
    SlotActivation::Softmax
}
fn default_kl_mode() -> KlMode {
    KlMode::Mc
}
fn default_eval_interval() -> u64 {
    500
}
fn default_eval_episodes() -> usize {
    600
}
fn default_bn_momentum() -> f64 {
    0.9
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |field: &'static str, message: String| Err(TrainError::Config { field, message });
        if self.n_way < 2 {
            return fail("n_way", format!("need at least 2 classes, got {}", self.n_way));
        }
        if self.k_shot < 1 {
            return fail("k_shot", "need at least one support sample".into());
        }
        if self.queries_per_class < 1 {
            return fail("queries_per_class", "need at least one query".into());
        }
        if self.tasks_per_batch < 1 {
            return fail("tasks_per_batch", "need at least one task".into());
        }
        if self.learning_rate <= 0.0 {
            return fail("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if self.j_samples < 1 || self.l_samples < 1 {
            return fail("j_samples/l_samples", "sample counts must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) && self.mode != AblationMode::Protonet {
            // The ablation grid includes alpha = 0 explicitly; allow it.
            if self.alpha != 0.0 {
                return fail("alpha", format!("must lie in [0, 1], got {}", self.alpha));
            }
        }
        if self.alpha < 0.0 || self.alpha > 1.0 {
            return fail("alpha", format!("must lie in [0, 1], got {}", self.alpha));
        }
        if self.memory_capacity < 1 {
            return fail("memory_capacity", "must be >= 1".into());
        }
        if self.variance_floor < 0.0 {
            return fail("variance_floor", "must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.encoder.dropout) && self.encoder.dropout != 1.0 {
            return fail("encoder.dropout", format!("must lie in [0, 1], got {}", self.encoder.dropout));
        }
        let arch = self.encoder.arch(&self.dataset);
        if !(0.0..1.0).contains(&arch.dropout_rate) {
            return fail(
                "encoder.dropout",
                format!("effective drop rate {} outside [0, 1)", arch.dropout_rate),
            );
        }
        if self.gumbel.temperature <= 0.0 || self.gumbel.min_temperature <= 0.0 {
            return fail("gumbel", "temperatures must be positive".into());
        }
        let mut probe = self.dataset.image_size();
        for _ in 0..self.encoder.blocks {
            if probe < 2 {
                return fail("encoder.blocks", "too many blocks for the image size".into());
            }
            probe = if self.encoder.pool_valid {
                (probe - 2) / 2 + 1
            } else {
                probe.div_ceil(2)
            };
        }
        Ok(())
    }

    pub fn variance_floor_opt<E: Scalar>(&self) -> Option<E> {
        (self.variance_floor > 0.0).then(|| E::from_f64(self.variance_floor))
    }

    /// Build the dataset this config describes.
    pub fn load_dataset<E: Scalar>(&self) -> Result<SplitDatasets<E>, TrainError> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                train,
                val,
                test,
                image_size,
                samples_per_class,
                spread,
            } => {
                let mut rng = derive(self.seed, &[stream::SYNTH]);
                let ds = synth_gaussian_clusters::<E, _>(
                    *classes,
                    *image_size,
                    *samples_per_class,
                    *spread,
                    &mut rng,
                )?;
                Ok(split_synthetic(ds, *train, *val, *test)?)
            }
            DatasetConfig::ImageFolder {
                path,
                train,
                val,
                test,
                image_size,
                channels,
                augment_rotations,
            } => {
                let spec = crate::data::SplitSpec {
                    train: *train,
                    val: *val,
                    test: *test,
                };
                let opts = crate::data::LoadOptions {
                    image_size: *image_size,
                    channels: *channels,
                    seed: self.seed,
                };
                let loaded =
                    crate::data::load_image_folder::<E>(std::path::Path::new(path), &spec, &opts)?;
                if *augment_rotations {
                    Ok(SplitDatasets {
                        train: crate::data::augment_rotations(&loaded.train)?,
                        val: crate::data::augment_rotations(&loaded.val)?,
                        test: crate::data::augment_rotations(&loaded.test)?,
                    })
                } else {
                    Ok(loaded)
                }
            }
        }
    }
}

/// One evaluation record: accuracy with a 95% confidence half-width over the
/// eval episodes, mean loss components, and the memory occupancy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub episode: u64,
    pub split: Split,
    pub accuracy: f64,
    pub half_width: f64,
    pub ce: f64,
    pub kl_z: f64,
    pub kl_m: f64,
    pub memory_slots: usize,
    /// Set when the half-width is degenerate (fewer than two episodes).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

/// All trainable state of a run.
#[derive(Debug, Clone)]
pub struct Models<E> {
    pub networks: Networks<E>,
    pub transform: Transform<E>,
}

impl<E: Scalar> Models<E> {
    pub fn new(arch: EncoderArch, rng: &mut ChaCha8Rng) -> Self {
        let networks = Networks::new(arch, rng);
        let d = networks.feature_dim();
        Models {
            networks,
            transform: Transform::identity(d),
        }
    }
}

/// Canonical parameter order shared by the optimizer, gradient collection
/// and checkpoints: encoder blocks, posterior, prior, memory net, transform,
/// attention vector.
pub fn param_names<E: Scalar>(models: &Models<E>) -> Vec<String> {
    let mut names = Vec::new();
    for (i, block) in models.networks.encoder.blocks.iter().enumerate() {
        names.push(format!("encoder.block{i}.kernel"));
        names.push(format!("encoder.block{i}.bias"));
        if block.bn.is_some() {
            names.push(format!("encoder.block{i}.bn_gamma"));
            names.push(format!("encoder.block{i}.bn_beta"));
        }
    }
    for net in ["posterior", "prior", "memory"] {
        for layer in ["w1", "b1", "w2", "b2", "w3", "b3"] {
            names.push(format!("{net}.{layer}"));
        }
    }
    names.push("transform.w".into());
    names.push("transform.b".into());
    names.push("memory_store.attention_w".into());
    names
}

fn net_params<E: Scalar>(net: &crate::networks::GaussianNet<E>) -> Vec<&Tensor<E>> {
    vec![&net.w1, &net.b1, &net.w2, &net.b2, &net.w3, &net.b3]
}

pub fn param_tensors<'a, E: Scalar>(
    models: &'a Models<E>,
    store: &'a MemoryStore<E>,
) -> Vec<&'a Tensor<E>> {
    let mut out = Vec::new();
    for block in &models.networks.encoder.blocks {
        out.push(&block.kernel);
        out.push(&block.bias);
        if let Some(bn) = &block.bn {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
    }
    out.extend(net_params(&models.networks.posterior));
    out.extend(net_params(&models.networks.prior));
    out.extend(net_params(&models.networks.memory));
    out.push(&models.transform.w);
    out.push(&models.transform.b);
    out.push(&store.attention_w);
    out
}

pub fn param_tensors_mut<'a, E: Scalar>(
    models: &'a mut Models<E>,
    store: &'a mut MemoryStore<E>,
) -> Vec<&'a mut Tensor<E>> {
    let mut out: Vec<&mut Tensor<E>> = Vec::new();
    for block in &mut models.networks.encoder.blocks {
        out.push(&mut block.kernel);
        out.push(&mut block.bias);
        if let Some(bn) = &mut block.bn {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
    }
    for net in [
        &mut models.networks.posterior,
        &mut models.networks.prior,
        &mut models.networks.memory,
    ] {
        out.push(&mut net.w1);
        out.push(&mut net.b1);
        out.push(&mut net.w2);
        out.push(&mut net.b2);
        out.push(&mut net.w3);
        out.push(&mut net.b3);
    }
    out.push(&mut models.transform.w);
    out.push(&mut models.transform.b);
    out.push(&mut store.attention_w);
    out
}

/// Tape bindings for every parameter, in canonical order.
#[derive(Debug)]
pub struct BoundParams {
    pub encoder: EncoderVars,
    pub posterior: GaussianNetVars,
    pub prior: GaussianNetVars,
    pub memory: GaussianNetVars,
    pub transform: TransformVars,
    pub attention_w: Var,
    pub ordered: Vec<Var>,
}

pub fn bind_params<E: Scalar>(
    tape: &mut Tape<E>,
    models: &Models<E>,
    store: &MemoryStore<E>,
) -> BoundParams {
    let encoder = models.networks.encoder.bind(tape);
    let posterior = models.networks.posterior.bind(tape);
    let prior = models.networks.prior.bind(tape);
    let memory = models.networks.memory.bind(tape);
    let transform = models.transform.bind(tape);
    let attention_w = tape.param(&store.attention_w);
    let mut ordered = Vec::new();
    for b in &encoder.blocks {
        ordered.push(b.kernel);
        ordered.push(b.bias);
        if let Some((g, bb)) = b.bn {
            ordered.push(g);
            ordered.push(bb);
        }
    }
    for net in [&posterior, &prior, &memory] {
        ordered.extend([net.w1, net.b1, net.w2, net.b2, net.w3, net.b3]);
    }
    ordered.push(transform.w);
    ordered.push(transform.b);
    ordered.push(attention_w);
    BoundParams {
        encoder,
        posterior,
        prior,
        memory,
        transform,
        attention_w,
        ordered,
    }
}

/// Adam with the paper defaults; gradients of one batch are summed before a
/// single step.
#[derive(Debug, Clone)]
pub struct Adam<E> {
    pub lr: E,
    pub beta1: E,
    pub beta2: E,
    pub eps: E,
    pub t: u64,
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(lr: f64, shapes: &[&Tensor<E>]) -> Self {
        Adam {
            lr: E::from_f64(lr),
            beta1: E::from_f64(0.9),
            beta2: E::from_f64(0.999),
            eps: E::from_f64(1e-8),
            t: 0,
            m: shapes.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
            v: shapes.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<E>], grads: &[Option<Tensor<E>>]) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = E::one() - self.beta1.powi(t);
        let bc2 = E::one() - self.beta2.powi(t);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let zero = Tensor::zeros(param.shape().to_vec());
            let g = grad.as_ref().unwrap_or(&zero);
            for ((p, &gi), (mi, vi)) in param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = self.beta1 * *mi + (E::one() - self.beta1) * gi;
                *vi = self.beta2 * *vi + (E::one() - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Per-call context for one episode pass.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeCtx {
    pub training: bool,
    pub compute_grads: bool,
    pub gumbel_tau: f64,
}

/// Diagnostics and (optionally) gradients from one episode.
#[derive(Debug)]
pub struct EpisodeOutcome<E> {
    pub loss: f64,
    pub ce: f64,
    pub kl_z: f64,
    pub kl_m: f64,
    pub correct: usize,
    pub total: usize,
    pub grads: Option<Vec<Option<Tensor<E>>>>,
    pub bn_stats: Vec<BnBatchStats<E>>,
    /// Per-query class log-scores, for prototype dumps and prediction.
    pub mean_log_probs: Tensor<E>,
    /// Posterior means per class (sampled-prototype modes only).
    pub posterior_means: Vec<Tensor<E>>,
    /// Prototype sample banks per class, `[L, d]` each.
    pub sample_banks: Vec<Tensor<E>>,
}

fn batch_images<E: Scalar>(images: &[&Tensor<E>]) -> Tensor<E> {
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(full, data).expect("image batch")
}

/// The loss of one episode under the configured ablation mode.
///
/// Model-noise draw order (one ChaCha stream per episode): query-encoder
/// dropout masks block by block, then per class in episode order: Gumbel
/// noise (gumbel mode), J component picks, J*d latent-memory noise, L*d
/// prototype noise. Memory-free paths draw only the per-class prototype
/// noise, so a cold-memory episode consumes the stream exactly like the
/// memory-free model.
pub fn episode_loss<E: Scalar, R: Rng + ?Sized>(
    models: &Models<E>,
    store: &MemoryStore<E>,
    episode: &Episode<E>,
    cfg: &TrainConfig,
    ctx: EpisodeCtx,
    rng: &mut R,
) -> Result<EpisodeOutcome<E>, TrainError> {
    let mut tape: Tape<E> = Tape::new();
    let bound = bind_params(&mut tape, models, store);
    let floor = cfg.variance_floor_opt::<E>();
    let enc = &models.networks.encoder;

    // Support features per class in eval-mode encoding (dropout off), then
    // the class means.
    let mut support_feats = Vec::with_capacity(episode.n_way);
    let mut h_bars = Vec::with_capacity(episode.n_way);
    for class_support in &episode.support {
        let refs: Vec<&Tensor<E>> = class_support.iter().collect();
        let imgs = tape.constant(batch_images(&refs));
        let (f, _) = encode(&mut tape, enc, &bound.encoder, imgs, false, rng)?;
        h_bars.push(tape.mean_rows(f)?);
        support_feats.push(f);
    }

    // Query batch, class-grouped.
    let mut query_refs: Vec<&Tensor<E>> = Vec::new();
    let mut targets = Vec::new();
    let mut class_query_rows = Vec::with_capacity(episode.n_way);
    for (n, class_queries) in episode.query.iter().enumerate() {
        let from = query_refs.len();
        for q in class_queries {
            query_refs.push(q);
            targets.push(n);
        }
        class_query_rows.push((from, query_refs.len()));
    }
    let query_imgs = tape.constant(batch_images(&query_refs));
    let (query_feats, bn_stats) = encode(
        &mut tape,
        enc,
        &bound.encoder,
        query_imgs,
        ctx.training,
        rng,
    )?;

    let memory_live = cfg.mode.uses_memory() && !store.is_empty();
    let zero = tape.constant(Tensor::scalar(E::zero()));

    let (loss, nll, kl_z, kl_m, mean_log_probs, posteriors, banks) = if cfg.mode
        == AblationMode::Protonet
    {
        let protos = protonet_prototypes(&mut tape, &support_feats)?;
        let terms = classification_terms(&mut tape, query_feats, &protos, &targets, cfg.distance)?;
        (terms.nll, terms.nll, zero, zero, terms.mean_log_probs, vec![], vec![])
    } else if !memory_live || !cfg.mode.hierarchical() {
        // Single-Gaussian posterior paths: the memory-free model
        // (self-conditioned) and the rote/transformed readout variants.
        let cond: Vec<Var> = if !memory_live {
            h_bars.clone()
        } else {
            let w_var = (ctx.training && cfg.train_attention).then_some(bound.attention_w);
            let mem = bind_store(&mut tape, store, w_var)?;
            let mut cond = Vec::with_capacity(episode.n_way);
            for &h in &h_bars {
                let readout = match cfg.mode {
                    AblationMode::Rote => recall_rote(&mut tape, &mem, h)?.0,
                    AblationMode::Transformed => {
                        recall_transformed(&mut tape, &mem, h, &bound.transform)?.0
                    }
                    _ => unreachable!("non-hierarchical memory mode"),
                };
                cond.push(readout);
            }
            cond
        };
        let terms = conditioned_elbo(
            &mut tape,
            &bound.posterior,
            &bound.prior,
            &cond,
            &h_bars,
            query_feats,
            &class_query_rows,
            &targets,
            cfg.l_samples,
            floor,
            cfg.distance,
            rng,
        )?;
        let post = terms.posteriors.iter().map(|p| p.mean).collect();
        (
            terms.loss,
            terms.nll,
            terms.kl,
            zero,
            terms.mean_log_probs,
            post,
            terms.sample_banks,
        )
    } else {
        // Full hierarchical model: latent-memory mixture recall per class.
        let w_var = (ctx.training && cfg.train_attention).then_some(bound.attention_w);
        let mem = bind_store(&mut tape, store, w_var)?;
        let (comp_means, comp_logvars) =
            memory_components(&mut tape, &mem, &bound.memory, floor)?;
        let addressing = if cfg.mode == AblationMode::Gumbel {
            Addressing::Gumbel {
                temperature: ctx.gumbel_tau,
            }
        } else {
            Addressing::Softmax
        };

        let mut banks = Vec::with_capacity(episode.n_way);
        let mut post_means = Vec::with_capacity(episode.n_way);
        let mut post_logvars = Vec::with_capacity(episode.n_way);
        let mut kl_m_sum: Option<Var> = None;
        for &h in &h_bars {
            let rec = recall(
                &mut tape,
                &mem,
                h,
                comp_means,
                comp_logvars,
                cfg.j_samples,
                addressing,
                rng,
            )?;
            let bank = crate::memory::hierarchical_prototype(
                &mut tape,
                &bound.posterior,
                rec.samples,
                h,
                cfg.l_samples,
                floor,
                rng,
            )?;

            // KL of the addressed mixture against the support-conditioned
            // memory prior, estimated over the J samples.
            let log_mix = tape.gauss_mix_log_density(
                rec.samples,
                comp_means,
                comp_logvars,
                Some(rec.address.log_weights),
            )?;
            let p_s = memory_net(&mut tape, &bound.memory, h, floor)?;
            let d = tape.value(p_s.mean).numel();
            let psm = tape.reshape(p_s.mean, vec![1, d])?;
            let psv = tape.reshape(p_s.log_var, vec![1, d])?;
            let log_p = tape.gauss_mix_log_density(rec.samples, psm, psv, None)?;
            let diff = tape.sub(log_mix, log_p)?;
            let klm = tape.mean_all(diff);
            kl_m_sum = Some(match kl_m_sum {
                Some(acc) => tape.add(acc, klm)?,
                None => klm,
            });

            banks.push(bank.samples);
            post_means.push(bank.post_means);
            post_logvars.push(bank.post_logvars);
        }

        let protos = PrototypeSet::Sampled(banks.clone());
        let terms = classification_terms(&mut tape, query_feats, &protos, &targets, cfg.distance)?;

        // Per-query KL between the prototype mixture and the prior.
        let (pri_means, pri_logvars) =
            prior_z_batch(&mut tape, &bound.prior, query_feats, floor)?;
        let mut kl_z_sum: Option<Var> = None;
        for (n, &(from, to)) in class_query_rows.iter().enumerate() {
            let n_queries = to - from;
            let pm = tape.slice_rows(pri_means, from, to)?;
            let pv = tape.slice_rows(pri_logvars, from, to)?;
            let klz = match cfg.kl_mode {
                KlMode::Mc => {
                    let log_q = tape.gauss_mix_log_density(
                        banks[n],
                        post_means[n],
                        post_logvars[n],
                        None,
                    )?;
                    let lq_sum = tape.sum_all(log_q);
                    let lp = tape.gauss_log_density_mat(banks[n], pm, pv)?;
                    let lp_sum = tape.sum_all(lp);
                    let l = cfg.l_samples as f64;
                    let a = tape.scale(lq_sum, E::from_f64(n_queries as f64 / l));
                    let b = tape.scale(lp_sum, E::from_f64(-1.0 / l));
                    tape.add(a, b)?
                }
                KlMode::AvgGaussian => {
                    let mut acc: Option<Var> = None;
                    for j in 0..cfg.j_samples {
                        let qm = tape.slice_rows(post_means[n], j, j + 1)?;
                        let qv = tape.slice_rows(post_logvars[n], j, j + 1)?;
                        let kls = tape.gauss_kl_batch(qm, qv, pm, pv)?;
                        let s = tape.sum_all(kls);
                        acc = Some(match acc {
                            Some(a) => tape.add(a, s)?,
                            None => s,
                        });
                    }
                    tape.scale(acc.unwrap(), E::from_f64(1.0 / cfg.j_samples as f64))
                }
            };
            kl_z_sum = Some(match kl_z_sum {
                Some(acc) => tape.add(acc, klz)?,
                None => klz,
            });
        }

        let kl_z = kl_z_sum.unwrap();
        let kl_m = kl_m_sum.unwrap();
        let partial = tape.add(terms.nll, kl_z)?;
        let loss = tape.add(partial, kl_m)?;
        let post = post_means.clone();
        (loss, terms.nll, kl_z, kl_m, terms.mean_log_probs, post, banks)
    };

    let loss_v = tape.item(loss).as_f64();
    let ce_v = tape.item(nll).as_f64();
    let kl_z_v = tape.item(kl_z).as_f64();
    let kl_m_v = tape.item(kl_m).as_f64();
    if !loss_v.is_finite() {
        return Err(TrainError::NonFinite {
            ce: ce_v,
            kl_z: kl_z_v,
            kl_m: kl_m_v,
        });
    }
    let correct = count_correct(&tape, mean_log_probs, &targets);
    let mean_log_probs_t = tape.value(mean_log_probs).clone();
    let posterior_means: Vec<Tensor<E>> =
        posteriors.iter().map(|&v| tape.value(v).clone()).collect();
    let sample_banks: Vec<Tensor<E>> = banks.iter().map(|&v| tape.value(v).clone()).collect();

    let grads = if ctx.compute_grads {
        tape.backward(loss)?;
        Some(
            bound
                .ordered
                .iter()
                .map(|&v| {
                    tape.grad(v).map(|g| {
                        Tensor::new(tape.shape(v).to_vec(), g.to_vec()).expect("grad shape")
                    })
                })
                .collect(),
        )
    } else {
        None
    };

    Ok(EpisodeOutcome {
        loss: loss_v,
        ce: ce_v,
        kl_z: kl_z_v,
        kl_m: kl_m_v,
        correct,
        total: targets.len(),
        grads,
        bn_stats,
        mean_log_probs: mean_log_probs_t,
        posterior_means,
        sample_banks,
    })
}

/// Eval-mode features of one episode, grouped by class id.
pub type ClassFeatures<E> = Vec<(i64, Vec<Tensor<E>>)>;

/// Eval-mode class features of one episode (support and query pooled), used
/// for memory writes.
fn class_update_features<E: Scalar>(
    models: &Models<E>,
    store: &MemoryStore<E>,
    episode: &Episode<E>,
    rng: &mut ChaCha8Rng,
) -> Result<ClassFeatures<E>, TrainError> {
    let mut tape: Tape<E> = Tape::new();
    let bound = bind_params(&mut tape, models, store);
    let mut out = Vec::with_capacity(episode.n_way);
    for (n, &class_id) in episode.class_ids.iter().enumerate() {
        let mut refs: Vec<&Tensor<E>> = episode.support[n].iter().collect();
        refs.extend(episode.query[n].iter());
        let imgs = tape.constant(batch_images(&refs));
        let (f, _) = encode(&mut tape, &models.networks.encoder, &bound.encoder, imgs, false, rng)?;
        let rows = tape.shape(f)[0];
        let d = tape.shape(f)[1];
        let feats: Vec<Tensor<E>> = (0..rows)
            .map(|r| {
                Tensor::new(vec![d], tape.data(f)[r * d..(r + 1) * d].to_vec()).expect("feature")
            })
            .collect();
        out.push((class_id, feats));
    }
    Ok(out)
}

fn mean_of<E: Scalar>(feats: &[Tensor<E>]) -> Tensor<E> {
    let d = feats[0].numel();
    let mut m = Tensor::zeros(vec![d]);
    let inv = E::one() / E::from_f64(feats.len() as f64);
    for f in feats {
        for (mi, &v) in m.data_mut().iter_mut().zip(f.data()) {
            *mi += v * inv;
        }
    }
    m
}

/// Apply the post-step memory schedule for one episode: append unseen
/// classes (mean feature), consolidate seen ones under the mode's rule.
pub fn apply_memory_updates<E: Scalar>(
    store: &mut MemoryStore<E>,
    mode: AblationMode,
    class_feats: &[(i64, Vec<Tensor<E>>)],
) -> Result<(), TrainError> {
    for (class_id, feats) in class_feats {
        if store.contains(*class_id) {
            match mode {
                AblationMode::MeanUpdate => store.mean_update(*class_id, feats)?,
                _ => store.attention_update(*class_id, feats)?,
            }
        } else {
            store.append_class(*class_id, mean_of(feats))?;
        }
    }
    Ok(())
}

/// Full training state.
#[derive(Debug)]
pub struct TrainerState<E> {
    pub config: TrainConfig,
    pub models: Models<E>,
    pub store: MemoryStore<E>,
    pub adam: Adam<E>,
    pub episodes_done: u64,
}

impl<E: Scalar> TrainerState<E> {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = derive(config.seed, &[stream::INIT]);
        let arch = config.encoder.arch(&config.dataset);
        let models = Models::new(arch, &mut rng);
        let d = models.networks.feature_dim();
        let store = MemoryStore::new(
            d,
            E::from_f64(config.alpha),
            config.memory_capacity,
            config.slot_activation,
            &mut rng,
        );
        let adam = {
            let params = param_tensors(&models, &store);
            Adam::new(config.learning_rate, &params)
        };
        Ok(TrainerState {
            config,
            models,
            store,
            adam,
            episodes_done: 0,
        })
    }

    pub fn clone_state(&self) -> TrainerState<E> {
        TrainerState {
            config: self.config.clone(),
            models: self.models.clone(),
            store: self.store.clone(),
            adam: self.adam.clone(),
            episodes_done: self.episodes_done,
        }
    }
}

/// Outcome of a training run: the final state, the best-validation snapshot
/// and its accuracy.
pub struct TrainOutput<E> {
    pub state: TrainerState<E>,
    pub best_state: TrainerState<E>,
    pub best_val_accuracy: f64,
}

/// Episodic training loop. Gradients of the `tasks_per_batch` episodes are
/// summed in episode order and applied in one Adam step; memory updates
/// follow the step, class by class in episode order; evaluation runs every
/// `eval_interval` iterations and once at the end, streaming rows to `sink`.
pub fn train<E: Scalar>(
    mut state: TrainerState<E>,
    data: &SplitDatasets<E>,
    mut sink: impl FnMut(&RunMetrics),
) -> Result<TrainOutput<E>, TrainError> {
    let cfg = state.config.clone();
    if data.train.n_classes() < cfg.n_way {
        return Err(DataError::NotEnoughClasses {
            needed: cfg.n_way,
            available: data.train.n_classes(),
        }
        .into());
    }
    let mut best: Option<(f64, TrainerState<E>)> = None;
    let mut eval_ordinal = 0u64;

    let run_eval = |state: &TrainerState<E>,
                        ordinal: u64,
                        sink: &mut dyn FnMut(&RunMetrics)|
     -> Result<f64, TrainError> {
        let split = if data.val.n_classes() >= cfg.n_way {
            Split::Val
        } else {
            Split::Test
        };
        let metrics = evaluate(
            &state.models,
            &state.store,
            data.get(split),
            &cfg,
            cfg.eval_episodes,
            ordinal,
            state.episodes_done,
        )?;
        sink(&metrics);
        Ok(metrics.accuracy)
    };

    for iter in 0..cfg.iterations {
        let episodes: Vec<Episode<E>> = (0..cfg.tasks_per_batch)
            .map(|t| {
                let idx = iter * cfg.tasks_per_batch as u64 + t as u64;
                let mut rng = derive(cfg.seed, &[stream::EPISODE_DATA, idx]);
                sample_episode(
                    &data.train,
                    cfg.n_way,
                    cfg.k_shot,
                    cfg.queries_per_class,
                    &mut rng,
                )
            })
            .collect::<Result<_, _>>()?;

        let ctx = EpisodeCtx {
            training: true,
            compute_grads: true,
            gumbel_tau: cfg.gumbel.tau_at(iter),
        };
        let run_one = |t: usize, episode: &Episode<E>| -> Result<EpisodeOutcome<E>, TrainError> {
            let idx = iter * cfg.tasks_per_batch as u64 + t as u64;
            let mut rng = derive(cfg.seed, &[stream::EPISODE_MODEL, idx]);
            episode_loss(&state.models, &state.store, episode, &cfg, ctx, &mut rng)
        };
        let outcomes: Vec<Result<EpisodeOutcome<E>, TrainError>> = if cfg.workers == 1 {
            episodes.iter().enumerate().map(|(t, ep)| run_one(t, ep)).collect()
        } else {
            episodes
                .par_iter()
                .enumerate()
                .map(|(t, ep)| run_one(t, ep))
                .collect()
        };

        // Sum gradients in episode order (deterministic reduction), then one
        // Adam step.
        let mut grad_sum: Option<Vec<Option<Tensor<E>>>> = None;
        let mut bn_accum: Vec<Vec<BnBatchStats<E>>> = Vec::new();
        for outcome in outcomes {
            let outcome = outcome?;
            if !outcome.bn_stats.is_empty() {
                bn_accum.push(outcome.bn_stats);
            }
            let grads = outcome.grads.expect("training episode computes grads");
            grad_sum = Some(match grad_sum {
                None => grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        match (a.as_mut(), g) {
                            (Some(at), Some(gt)) => {
                                for (x, &y) in at.data_mut().iter_mut().zip(gt.data()) {
                                    *x += y;
                                }
                            }
                            (None, Some(gt)) => *a = Some(gt),
                            _ => {}
                        }
                    }
                    acc
                }
            });
        }
        let grads = grad_sum.expect("at least one task per batch");
        {
            let mut params = param_tensors_mut(&mut state.models, &mut state.store);
            state.adam.step(&mut params, &grads);
        }
        let momentum = E::from_f64(cfg.bn_momentum);
        for stats in bn_accum {
            state.models.networks.encoder.update_bn_stats(&stats, momentum);
        }

        // Memory writes after the step, in episode order, from eval-mode
        // features under the updated parameters.
        if cfg.mode.uses_memory() {
            for (t, episode) in episodes.iter().enumerate() {
                let idx = iter * cfg.tasks_per_batch as u64 + t as u64;
                let mut rng = derive(cfg.seed, &[stream::EPISODE_MODEL, idx, 1]);
                let feats =
                    class_update_features(&state.models, &state.store, episode, &mut rng)?;
                apply_memory_updates(&mut state.store, cfg.mode, &feats)?;
            }
        }
        state.episodes_done += cfg.tasks_per_batch as u64;

        if cfg.eval_interval > 0 && (iter + 1) % cfg.eval_interval == 0 && iter + 1 < cfg.iterations
        {
            let acc = run_eval(&state, eval_ordinal, &mut sink)?;
            eval_ordinal += 1;
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, state.clone_state()));
            }
        }
    }

    let acc = run_eval(&state, eval_ordinal, &mut sink)?;
    if best.as_ref().is_none_or(|(b, _)| acc >= *b) {
        best = Some((acc, state.clone_state()));
    }
    let (best_val_accuracy, best_state) = best.unwrap();
    Ok(TrainOutput {
        state,
        best_state,
        best_val_accuracy,
    })
}

/// Frozen-memory evaluation over sampled episodes: accuracy with a 95%
/// half-width (1.96 * sample std / sqrt(n)) plus mean loss components.
pub fn evaluate<E: Scalar>(
    models: &Models<E>,
    store: &MemoryStore<E>,
    split: &ClassDataset<E>,
    cfg: &TrainConfig,
    n_episodes: usize,
    eval_ordinal: u64,
    at_episode: u64,
) -> Result<RunMetrics, TrainError> {
    if split.n_classes() < cfg.n_way {
        return Err(DataError::NotEnoughClasses {
            needed: cfg.n_way,
            available: split.n_classes(),
        }
        .into());
    }
    let ctx = EpisodeCtx {
        training: false,
        compute_grads: false,
        gumbel_tau: cfg.gumbel.min_temperature,
    };
    let accs: Vec<f64> = (0..n_episodes)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&i| -> Result<(f64, f64, f64, f64), TrainError> {
            let mut data_rng = derive(cfg.seed, &[stream::EVAL_DATA, eval_ordinal, i as u64]);
            let episode = sample_episode(
                split,
                cfg.n_way,
                cfg.k_shot,
                cfg.queries_per_class,
                &mut data_rng,
            )?;
            let mut model_rng = derive(cfg.seed, &[stream::EVAL_MODEL, eval_ordinal, i as u64]);
            let out = episode_loss(models, store, &episode, cfg, ctx, &mut model_rng)?;
            Ok((
                out.correct as f64 / out.total as f64,
                out.ce,
                out.kl_z,
                out.kl_m,
            ))
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flat_map(|(a, ce, kz, km)| [a, ce, kz, km])
        .collect();

    let n = n_episodes as f64;
    let col = |k: usize| accs.iter().skip(k).step_by(4);
    let mean = |k: usize| col(k).sum::<f64>() / n;
    let accuracy = mean(0);
    let degenerate = n_episodes < 2;
    let half_width = if degenerate {
        log::warn!("confidence half-width degenerate with {n_episodes} episode(s)");
        0.0
    } else {
        let var = col(0).map(|a| (a - accuracy).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * var.sqrt() / n.sqrt()
    };
    Ok(RunMetrics {
        episode: at_episode,
        split: split.split,
        accuracy,
        half_width,
        ce: mean(1),
        kl_z: mean(2),
        kl_m: mean(3),
        memory_slots: store.len(),
        degenerate,
    })
}

/// One grid axis of the ablation suite.
#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    Alpha(Vec<f64>),
    Modes(Vec<AblationMode>),
}

/// One comparison row: the grid label with 1-shot and 5-shot test accuracy.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub acc_1shot: f64,
    pub hw_1shot: f64,
    pub acc_5shot: f64,
    pub hw_5shot: f64,
}

/// Train and test every grid point at K = 1 and K = 5.
pub fn ablation_suite<E: Scalar>(
    base: &TrainConfig,
    grid: &GridSpec,
) -> Result<Vec<AblationRow>, TrainError> {
    let points: Vec<(String, TrainConfig)> = match grid {
        GridSpec::Alpha(alphas) => alphas
            .iter()
            .map(|&a| {
                let mut cfg = base.clone();
                cfg.alpha = a;
                (format!("alpha={a:.1}"), cfg)
            })
            .collect(),
        GridSpec::Modes(modes) => modes
            .iter()
            .map(|&m| {
                let mut cfg = base.clone();
                cfg.mode = m;
                (format!("mode={m}"), cfg)
            })
            .collect(),
    };
    let mut rows = Vec::with_capacity(points.len());
    for (label, cfg) in points {
        let mut row = AblationRow {
            label,
            acc_1shot: 0.0,
            hw_1shot: 0.0,
            acc_5shot: 0.0,
            hw_5shot: 0.0,
        };
        for k in [1usize, 5] {
            let mut cfg_k = cfg.clone();
            cfg_k.k_shot = k;
            cfg_k.validate()?;
            let data = cfg_k.load_dataset::<E>()?;
            let state = TrainerState::new(cfg_k.clone())?;
            let out = train(state, &data, |_| {})?;
            let split = if data.test.n_classes() >= cfg_k.n_way {
                Split::Test
            } else {
                Split::Val
            };
            let m = evaluate(
                &out.state.models,
                &out.state.store,
                data.get(split),
                &cfg_k,
                cfg_k.eval_episodes,
                u64::MAX,
                out.state.episodes_done,
            )?;
            if k == 1 {
                row.acc_1shot = m.accuracy;
                row.hw_1shot = m.half_width;
            } else {
                row.acc_5shot = m.accuracy;
                row.hw_5shot = m.half_width;
            }
        }
        rows.push(row);
    }
    Ok(rows)
}


/// Prebuilt micro-scale fixtures shared by integration tests across crates.
#[doc(hidden)]
pub mod tests_support {
    use super::*;

    /// 2x2 single-channel images through one 4-channel block: feature
    /// dimension 4, everything hand-checkable.
    pub fn micro_config(mode: AblationMode) -> TrainConfig {
        TrainConfig {
            n_way: 2,
            k_shot: 1,
            queries_per_class: 2,
            tasks_per_batch: 2,
            iterations: 3,
            learning_rate: 1e-3,
            j_samples: 2,
            l_samples: 3,
            alpha: 0.7,
            memory_capacity: 64,
            mode,
            seed: 42,
            precision: Precision::F64,
            variance_floor: 1e-6,
            distance: Distance::SquaredEuclidean,
            slot_activation: SlotActivation::Softmax,
            gumbel: GumbelConfig::default(),
            kl_mode: KlMode::Mc,
            train_attention: true,
            eval_interval: 0,
            eval_episodes: 4,
            bn_momentum: 0.9,
            workers: 1,
            dataset: DatasetConfig::Synthetic {
                classes: 8,
                train: 5,
                val: 2,
                test: 1,
                image_size: 2,
                samples_per_class: 8,
                spread: 0.3,
            },
            encoder: EncoderConfig {
                channels: 4,
                blocks: 1,
                pool_valid: false,
                dropout: 1.0,
                dropout_is_keep_prob: true,
                batch_norm: false,
            },
        }
    }

    /// A micro state with a warm memory (two slots, one attention write).
    pub fn micro_state(seed: u64) -> TrainerState<f64> {
        let mut cfg = micro_config(AblationMode::Vsm);
        cfg.seed = seed;
        let mut state = TrainerState::<f64>::new(cfg).unwrap();
        state
            .store
            .append_class(990, Tensor::vector(vec![0.3, -0.1, 0.5, 0.2]))
            .unwrap();
        state
            .store
            .append_class(991, Tensor::vector(vec![-0.4, 0.6, 0.1, -0.2]))
            .unwrap();
        state
            .store
            .attention_update(990, &[Tensor::vector(vec![0.2, 0.2, -0.3, 0.4])])
            .unwrap();
        state.adam.t = 17;
        state.episodes_done = 34;
        state
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop, clippy::useless_vec)]
pub(crate) mod tests {
    pub(crate) use super::tests_support::micro_config;
    use super::*;
    use crate::networks::GaussianNet;

    /// Tiny config: 2x2 single-channel images, one 4-channel conv block, so
    /// the feature dimension is 4 and everything is hand-checkable.
    pub(crate) fn micro_episode(cfg: &TrainConfig, idx: u64) -> Episode<f64> {
        let data = cfg.load_dataset::<f64>().unwrap();
        let mut rng = derive(cfg.seed, &[stream::EPISODE_DATA, idx]);
        sample_episode(
            &data.train,
            cfg.n_way,
            cfg.k_shot,
            cfg.queries_per_class,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn protonet_mode_is_pure_cross_entropy() {
        let cfg = micro_config(AblationMode::Protonet);
        let state = TrainerState::<f64>::new(cfg.clone()).unwrap();
        let episode = micro_episode(&cfg, 0);
        let ctx = EpisodeCtx {
            training: true,
            compute_grads: false,
            gumbel_tau: 1.0,
        };
        let mut rng = derive(cfg.seed, &[stream::EPISODE_MODEL, 0]);
        let out = episode_loss(&state.models, &state.store, &episode, &cfg, ctx, &mut rng).unwrap();
        assert_eq!(out.kl_z, 0.0);
        assert_eq!(out.kl_m, 0.0);
        assert!((out.loss - out.ce).abs() < 1e-12);
    }

    #[test]
    fn cold_start_vsm_equals_vpn_bitwise() {
        let vsm = micro_config(AblationMode::Vsm);
        let mut vpn = vsm.clone();
        vpn.mode = AblationMode::Vpn;
        let episode = micro_episode(&vsm, 3);
        let ctx = EpisodeCtx {
            training: true,
            compute_grads: true,
            gumbel_tau: 1.0,
        };
        let run = |cfg: &TrainConfig| {
            let state = TrainerState::<f64>::new(cfg.clone()).unwrap();
            assert!(state.store.is_empty());
            let mut rng = derive(cfg.seed, &[stream::EPISODE_MODEL, 3]);
            episode_loss(&state.models, &state.store, &episode, cfg, ctx, &mut rng).unwrap()
        };
        let a = run(&vsm);
        let b = run(&vpn);
        assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "cold vsm == vpn bitwise");
        assert_eq!(a.ce.to_bits(), b.ce.to_bits());
        assert_eq!(a.kl_z.to_bits(), b.kl_z.to_bits());
        // Gradients agree too (on parameters that both paths touch).
        for (ga, gb) in a.grads.unwrap().iter().zip(b.grads.unwrap().iter()) {
            match (ga, gb) {
                (Some(x), Some(y)) => assert_eq!(x.data(), y.data()),
                (None, None) => {}
                _ => panic!("gradient presence differs between cold vsm and vpn"),
            }
        }
    }

    #[test]
    fn single_slot_matching_support_mean_zeroes_the_memory_kl() {
        let cfg = micro_config(AblationMode::Vsm);
        let state = TrainerState::<f64>::new(cfg.clone()).unwrap();
        let episode = micro_episode(&cfg, 1);

        // Compute the support mean of class 0 the same way the loss does.
        let mut tape: Tape<f64> = Tape::new();
        let bound = bind_params(&mut tape, &state.models, &state.store);
        let refs: Vec<&Tensor<f64>> = episode.support[0].iter().collect();
        let imgs = tape.constant(batch_images(&refs));
        let mut scratch = derive(0, &[]);
        let (f, _) = encode(
            &mut tape,
            &state.models.networks.encoder,
            &bound.encoder,
            imgs,
            false,
            &mut scratch,
        )
        .unwrap();
        let h = tape.mean_rows(f).unwrap();
        let h_bar = Tensor::new(vec![4], tape.data(h).to_vec()).unwrap();

        // One-class episode whose single slot key equals the support mean.
        let mut one_class = episode.clone();
        one_class.n_way = 1;
        one_class.class_ids.truncate(1);
        one_class.support.truncate(1);
        one_class.query.truncate(1);
        let mut store = state.store.clone();
        store.append_class(one_class.class_ids[0], h_bar).unwrap();

        let ctx = EpisodeCtx {
            training: false,
            compute_grads: false,
            gumbel_tau: 1.0,
        };
        let mut rng = derive(cfg.seed, &[stream::EPISODE_MODEL, 1]);
        let out = episode_loss(&state.models, &store, &one_class, &cfg, ctx, &mut rng).unwrap();
        assert!(
            out.kl_m.abs() < 1e-12,
            "mixture equals the memory prior, kl_m = {}",
            out.kl_m
        );
    }

    /// Straight-line plain-f64 reimplementation of the full hierarchical
    /// objective on a fixed micro-episode, replaying the documented noise
    /// draw order.
    #[test]
    fn vsm_episode_loss_matches_independent_reimplementation() {
        let cfg = micro_config(AblationMode::Vsm);
        let state = TrainerState::<f64>::new(cfg.clone()).unwrap();
        let episode = micro_episode(&cfg, 2);
        let mut store = state.store.clone();
        store
            .append_class(990, Tensor::vector(vec![0.3, -0.1, 0.5, 0.2]))
            .unwrap();
        store
            .append_class(991, Tensor::vector(vec![-0.4, 0.6, 0.1, -0.2]))
            .unwrap();

        let ctx = EpisodeCtx {
            training: true,
            compute_grads: false,
            gumbel_tau: 1.0,
        };
        let mut rng = derive(cfg.seed, &[stream::EPISODE_MODEL, 2]);
        let out = episode_loss(&state.models, &store, &episode, &cfg, ctx, &mut rng).unwrap();

        // ---- independent recomputation ----
        let (j, l, d) = (cfg.j_samples, cfg.l_samples, 4usize);
        let enc = &state.models.networks.encoder;
        let kernel = enc.blocks[0].kernel.data();
        let kbias = enc.blocks[0].bias.data();
        // conv 3x3 SAME on 2x2x1, relu, 2x2 SAME pool -> 1x1x4
        let encode_img = |img: &Tensor<f64>| -> Vec<f64> {
            let px = img.data();
            let mut conv = vec![0.0; 2 * 2 * 4]; // [y][x][c]
            for y in 0..2usize {
                for x in 0..2usize {
                    for c in 0..4usize {
                        let mut s = kbias[c];
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let iy = y as isize + ky as isize - 1;
                                let ix = x as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy > 1 || ix > 1 {
                                    continue;
                                }
                                s += px[(iy * 2 + ix) as usize] * kernel[(ky * 3 + kx) * 4 + c];
                            }
                        }
                        conv[(y * 2 + x) * 4 + c] = s.max(0.0);
                    }
                }
            }
            (0..4)
                .map(|c| {
                    conv[c]
                        .max(conv[4 + c])
                        .max(conv[8 + c])
                        .max(conv[12 + c])
                })
                .collect()
        };
        let elu = |x: f64| if x > 0.0 { x } else { x.exp() - 1.0 };
        let floor = 1e-6f64.ln();
        let forward = |net: &GaussianNet<f64>, x: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let lin = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
                let (di, do_) = (w.shape()[0], w.shape()[1]);
                (0..do_)
                    .map(|jj| {
                        b.data()[jj] + (0..di).map(|i| x[i] * w.data()[i * do_ + jj]).sum::<f64>()
                    })
                    .collect()
            };
            let h1: Vec<f64> = lin(x, &net.w1, &net.b1).into_iter().map(elu).collect();
            let h2: Vec<f64> = lin(&h1, &net.w2, &net.b2).into_iter().map(elu).collect();
            let head = lin(&h2, &net.w3, &net.b3);
            (
                head[..d].to_vec(),
                head[d..].iter().map(|&v| v.max(floor)).collect(),
            )
        };
        let log_normal = |x: &[f64], mu: &[f64], lv: &[f64]| -> f64 {
            -0.5 * x
                .iter()
                .zip(mu)
                .zip(lv)
                .map(|((&xi, &mi), &li)| {
                    (2.0 * std::f64::consts::PI).ln() + li + (xi - mi).powi(2) * (-li).exp()
                })
                .sum::<f64>()
        };

        let h_bars: Vec<Vec<f64>> = episode.support.iter().map(|s| encode_img(&s[0])).collect();
        let queries: Vec<Vec<f64>> = episode
            .query
            .iter()
            .flat_map(|qs| qs.iter().map(&encode_img))
            .collect();
        let targets = [0usize, 0, 1, 1];

        let keys = [
            vec![0.3, -0.1, 0.5, 0.2],
            vec![-0.4f64, 0.6, 0.1, -0.2],
        ];
        let comps: Vec<(Vec<f64>, Vec<f64>)> = keys
            .iter()
            .map(|k| forward(&state.models.networks.memory, k))
            .collect();

        let mut check_rng = derive(cfg.seed, &[stream::EPISODE_MODEL, 2]);
        let mut z: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut posts: Vec<Vec<(Vec<f64>, Vec<f64>)>> = Vec::new();
        let mut kl_m_total = 0.0;
        for h in &h_bars {
            // addressing
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| k.iter().zip(h).map(|(a, b)| a * b).sum())
                .collect();
            let max = logits[0].max(logits[1]);
            let zsum: f64 = logits.iter().map(|g| (g - max).exp()).sum();
            let lambda: Vec<f64> = logits.iter().map(|g| (g - max).exp() / zsum).collect();
            // J component picks, then J*d noise
            let picks: Vec<usize> = (0..j)
                .map(|_| {
                    let u: f64 = f64::uniform(&mut check_rng);
                    let mut acc = 0.0;
                    let mut chosen = lambda.len() - 1;
                    for (i, &w) in lambda.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            chosen = i;
                            break;
                        }
                    }
                    chosen
                })
                .collect();
            let m_noise: Vec<f64> = (0..j * d).map(|_| f64::std_normal(&mut check_rng)).collect();
            let ms: Vec<Vec<f64>> = picks
                .iter()
                .enumerate()
                .map(|(ji, &a)| {
                    (0..d)
                        .map(|k| {
                            comps[a].0[k]
                                + (0.5 * comps[a].1[k]).exp() * m_noise[ji * d + k]
                        })
                        .collect()
                })
                .collect();
            // posterior per m, then L prototype draws cycling components
            let class_posts: Vec<(Vec<f64>, Vec<f64>)> = ms
                .iter()
                .map(|m| {
                    let x: Vec<f64> = m.iter().chain(h.iter()).copied().collect();
                    forward(&state.models.networks.posterior, &x)
                })
                .collect();
            let z_noise: Vec<f64> = (0..l * d).map(|_| f64::std_normal(&mut check_rng)).collect();
            let class_z: Vec<Vec<f64>> = (0..l)
                .map(|li| {
                    let (mu, lv) = &class_posts[li % j];
                    (0..d)
                        .map(|k| mu[k] + (0.5 * lv[k]).exp() * z_noise[li * d + k])
                        .collect()
                })
                .collect();
            // memory KL over the J samples
            let (psm, psv) = forward(&state.models.networks.memory, h);
            let mut klm = 0.0;
            for m in &ms {
                let mix: f64 = {
                    let terms: Vec<f64> = (0..2)
                        .map(|a| lambda[a].ln() + log_normal(m, &comps[a].0, &comps[a].1))
                        .collect();
                    let mx = terms[0].max(terms[1]);
                    mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
                };
                klm += mix - log_normal(m, &psm, &psv);
            }
            kl_m_total += klm / j as f64;
            z.push(class_z);
            posts.push(class_posts);
        }

        let mut nll = 0.0;
        for li in 0..l {
            for (qi, q) in queries.iter().enumerate() {
                let logits: Vec<f64> = (0..2)
                    .map(|n| {
                        -q.iter()
                            .zip(&z[n][li])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .collect();
                let mx = logits[0].max(logits[1]);
                let lse = mx + ((logits[0] - mx).exp() + (logits[1] - mx).exp()).ln();
                nll -= logits[targets[qi]] - lse;
            }
        }
        nll /= l as f64;

        let mut kl_z_total = 0.0;
        for (n, rows) in [(0usize, 0..2usize), (1usize, 2..4usize)] {
            for li in 0..l {
                let zl = &z[n][li];
                let logq = {
                    let terms: Vec<f64> = (0..j)
                        .map(|jj| {
                            -(j as f64).ln() + log_normal(zl, &posts[n][jj].0, &posts[n][jj].1)
                        })
                        .collect();
                    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
                };
                for qi in rows.clone() {
                    let (pm, pv) = forward(&state.models.networks.prior, &queries[qi]);
                    kl_z_total += (logq - log_normal(zl, &pm, &pv)) / l as f64;
                }
            }
        }

        let want = nll + kl_z_total + kl_m_total;
        assert!(
            (out.loss - want).abs() < 1e-6,
            "episode loss {} vs straight-line {}",
            out.loss,
            want
        );
        assert!((out.kl_m - kl_m_total).abs() < 1e-9);
    }
}

#[cfg(test)]
mod loop_tests {
    use super::tests::micro_config;
    use super::*;

    #[test]
    fn zero_iterations_leaves_parameters_at_init_but_still_evaluates() {
        let mut cfg = micro_config(AblationMode::Vpn);
        cfg.iterations = 0;
        let data = cfg.load_dataset::<f64>().unwrap();
        let state = TrainerState::new(cfg.clone()).unwrap();
        let init_kernel = state.models.networks.encoder.blocks[0].kernel.clone();
        let mut rows = Vec::new();
        let out = train(state, &data, |m| rows.push(m.clone())).unwrap();
        assert_eq!(rows.len(), 1, "final eval still runs");
        assert_eq!(
            out.state.models.networks.encoder.blocks[0].kernel.data(),
            init_kernel.data(),
        );
    }

    #[test]
    fn identical_seeds_reproduce_the_metric_stream() {
        let mut cfg = micro_config(AblationMode::Vsm);
        cfg.iterations = 4;
        cfg.eval_interval = 2;
        let run = || {
            let data = cfg.load_dataset::<f64>().unwrap();
            let state = TrainerState::new(cfg.clone()).unwrap();
            let mut rows = Vec::new();
            train(state, &data, |m| rows.push(m.clone())).unwrap();
            rows
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "metric streams must match bitwise");
        assert!(a.len() >= 2);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mut serial_cfg = micro_config(AblationMode::Vsm);
        serial_cfg.iterations = 2;
        let mut parallel_cfg = serial_cfg.clone();
        parallel_cfg.workers = 0;
        let run = |cfg: &TrainConfig| {
            let data = cfg.load_dataset::<f64>().unwrap();
            let state = TrainerState::new(cfg.clone()).unwrap();
            let mut rows = Vec::new();
            let out = train(state, &data, |m| rows.push(m.clone())).unwrap();
            (rows, out.state.models.networks.encoder.blocks[0].kernel.clone())
        };
        let (rows_s, kernel_s) = run(&serial_cfg);
        let (rows_p, kernel_p) = run(&parallel_cfg);
        assert_eq!(rows_s, rows_p);
        assert_eq!(kernel_s.data(), kernel_p.data());
    }

    #[test]
    fn memory_grows_monotonically_up_to_capacity() {
        let mut cfg = micro_config(AblationMode::Vsm);
        cfg.iterations = 6;
        cfg.memory_capacity = 3;
        let data = cfg.load_dataset::<f64>().unwrap();
        let state = TrainerState::new(cfg.clone()).unwrap();
        let out = train(state, &data, |_| {}).unwrap();
        assert_eq!(out.state.store.len(), 3, "capped below the 5 train classes");
    }

    #[test]
    fn evaluation_is_chance_level_at_random_init() {
        let mut cfg = micro_config(AblationMode::Vpn);
        cfg.n_way = 5;
        cfg.queries_per_class = 5;
        cfg.dataset = DatasetConfig::Synthetic {
            classes: 12,
            train: 10,
            val: 0,
            test: 2,
            image_size: 2,
            samples_per_class: 10,
            spread: 0.3,
        };
        let data = cfg.load_dataset::<f64>().unwrap();
        let state = TrainerState::new(cfg.clone()).unwrap();
        let m = evaluate(&state.models, &state.store, &data.train, &cfg, 600, 0, 0).unwrap();
        assert!(
            (m.accuracy - 0.2).abs() < 0.03,
            "random-init accuracy {} should be near chance",
            m.accuracy
        );
        assert!(!m.degenerate);
        assert!(m.half_width > 0.0);
    }

    #[test]
    fn single_episode_eval_is_flagged_degenerate() {
        let cfg = micro_config(AblationMode::Vpn);
        let data = cfg.load_dataset::<f64>().unwrap();
        let state = TrainerState::new(cfg.clone()).unwrap();
        let m = evaluate(&state.models, &state.store, &data.train, &cfg, 1, 0, 0).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.half_width, 0.0);
    }

    #[test]
    fn eval_points_report_finite_losses_and_bounded_kl() {
        let mut cfg = micro_config(AblationMode::Vsm);
        cfg.iterations = 4;
        let data = cfg.load_dataset::<f64>().unwrap();
        let state = TrainerState::new(cfg.clone()).unwrap();
        let mut rows = Vec::new();
        train(state, &data, |m| rows.push(m.clone())).unwrap();
        for row in rows {
            assert!(row.ce.is_finite() && row.kl_z.is_finite() && row.kl_m.is_finite());
            assert!(row.kl_z >= -0.05, "kl_z {} below MC noise floor", row.kl_z);
            assert!(row.kl_m >= -0.05, "kl_m {} below MC noise floor", row.kl_m);
        }
    }

    /// Finite-difference spot check through the entire episode loss in f64,
    /// on 20 randomly chosen parameters.
    #[test]
    fn episode_loss_gradient_spot_check() {
        let mut cfg = micro_config(AblationMode::Vsm);
        cfg.l_samples = 2;
        cfg.j_samples = 2;
        let mut state = TrainerState::<f64>::new(cfg.clone()).unwrap();
        state
            .store
            .append_class(990, Tensor::vector(vec![0.3, -0.1, 0.5, 0.2]))
            .unwrap();
        state
            .store
            .append_class(991, Tensor::vector(vec![-0.4, 0.6, 0.1, -0.2]))
            .unwrap();
        // A recorded write gives the attention vector a gradient path.
        state
            .store
            .attention_update(990, &[Tensor::vector(vec![0.2, 0.2, -0.3, 0.4])])
            .unwrap();
        let episode = super::tests::micro_episode(&cfg, 5);
        let ctx = EpisodeCtx {
            training: true,
            compute_grads: true,
            gumbel_tau: 1.0,
        };
        let loss_of = |state: &TrainerState<f64>| -> f64 {
            let mut rng = derive(cfg.seed, &[stream::EPISODE_MODEL, 5]);
            episode_loss(&state.models, &state.store, &episode, &cfg, ctx, &mut rng)
                .unwrap()
                .loss
        };
        let grads = {
            let mut rng = derive(cfg.seed, &[stream::EPISODE_MODEL, 5]);
            episode_loss(&state.models, &state.store, &episode, &cfg, ctx, &mut rng)
                .unwrap()
                .grads
                .unwrap()
        };

        let n_params = param_tensors(&state.models, &state.store).len();
        let mut pick_rng = derive(7, &[]);
        for _ in 0..20 {
            let p = (pick_rng.random::<u64>() as usize) % n_params;
            let numel = param_tensors(&state.models, &state.store)[p].numel();
            let i = (pick_rng.random::<u64>() as usize) % numel;
            let analytic = grads[p].as_ref().map_or(0.0, |g| g.data()[i]);
            let eps = 1e-5;
            let mut plus = state.clone_state();
            {
                let mut params = param_tensors_mut(&mut plus.models, &mut plus.store);
                params[p].data_mut()[i] += eps;
            }
            let mut minus = state.clone_state();
            {
                let mut params = param_tensors_mut(&mut minus.models, &mut minus.store);
                params[p].data_mut()[i] -= eps;
            }
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
            assert!(
                err < 1e-4,
                "param {p} elem {i}: analytic {analytic} vs numeric {numeric} (rel {err:.2e})"
            );
        }
    }

    #[test]
    fn nan_in_parameters_aborts_with_component_diagnostics() {
        let cfg = micro_config(AblationMode::Vpn);
        let mut state = TrainerState::<f64>::new(cfg.clone()).unwrap();
        state.models.networks.posterior.w1.data_mut()[0] = f64::NAN;
        let episode = super::tests::micro_episode(&cfg, 0);
        let ctx = EpisodeCtx {
            training: true,
            compute_grads: false,
            gumbel_tau: 1.0,
        };
        let mut rng = derive(cfg.seed, &[stream::EPISODE_MODEL, 0]);
        let err = episode_loss(&state.models, &state.store, &episode, &cfg, ctx, &mut rng)
            .unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }));
    }

    #[test]
    fn param_binding_matches_name_table() {
        let cfg = micro_config(AblationMode::Vsm);
        let state = TrainerState::<f64>::new(cfg).unwrap();
        let names = param_names(&state.models);
        let tensors = param_tensors(&state.models, &state.store);
        assert_eq!(names.len(), tensors.len());
        let mut tape: Tape<f64> = Tape::new();
        let bound = bind_params(&mut tape, &state.models, &state.store);
        assert_eq!(bound.ordered.len(), names.len());
        for (v, t) in bound.ordered.iter().zip(&tensors) {
            assert_eq!(tape.shape(*v), t.shape());
        }
    }

    #[test]
    fn config_validation_reports_field_diagnostics() {
        let mut cfg = micro_config(AblationMode::Vsm);
        cfg.learning_rate = 0.0;
        let err = cfg.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate"), "{msg}");

        let mut cfg2 = micro_config(AblationMode::Vsm);
        cfg2.alpha = 1.5;
        assert!(cfg2.validate().is_err());

        let mut cfg3 = micro_config(AblationMode::Vsm);
        cfg3.encoder.blocks = 9;
        assert!(cfg3.validate().is_err());
    }
}
