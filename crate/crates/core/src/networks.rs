//! The feature encoder and the three amortized Gaussian networks: the
//! prototype posterior (fed by latent memory and support mean), the
//! query-conditional prototype prior, and the memory-conditional network
//! whose parameters serve both the prior and posterior roles for the latent
//! memory.

use crate::gaussian::DiagonalGaussian;
use crate::init::fan_in_tensor;
use crate::scalar::Scalar;
use crate::tensor::{Padding, ShapeError, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Convolutional encoder layout. Every block is conv 3x3 stride 1 SAME
/// (+ optional batch norm), ReLU, dropout, 2x2 stride-2 pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub image_size: usize,
    pub in_channels: usize,
    pub channels: usize,
    pub blocks: usize,
    /// SAME pooling rounds spatial dims up, VALID rounds down. The 84x84
    /// five-block stack needs VALID to land on a 2x2x64 = 256 flatten.
    pub pool_valid: bool,
    /// Probability of dropping a unit in training mode.
    pub dropout_rate: f64,
    pub batch_norm: bool,
}

impl EncoderArch {
    /// 28x28x1, four 64-channel blocks, SAME pooling, keep-probability 0.9.
    pub fn omniglot() -> Self {
        EncoderArch {
            image_size: 28,
            in_channels: 1,
            channels: 64,
            blocks: 4,
            pool_valid: false,
            dropout_rate: 0.1,
            batch_norm: false,
        }
    }

    /// 32x32x3, four 64-channel blocks, keep-probability 0.5.
    pub fn cifar() -> Self {
        EncoderArch {
            image_size: 32,
            in_channels: 3,
            channels: 64,
            blocks: 4,
            pool_valid: false,
            dropout_rate: 0.5,
            batch_norm: false,
        }
    }

    /// 84x84x3, five 64-channel blocks, keep-probability 0.5.
    pub fn imagenet84() -> Self {
        EncoderArch {
            image_size: 84,
            in_channels: 3,
            channels: 64,
            blocks: 5,
            pool_valid: true,
            dropout_rate: 0.5,
            batch_norm: false,
        }
    }

    pub fn pool_padding(&self) -> Padding {
        if self.pool_valid {
            Padding::Valid
        } else {
            Padding::Same
        }
    }

    fn spatial_after_blocks(&self) -> usize {
        let mut s = self.image_size;
        for _ in 0..self.blocks {
            s = match self.pool_padding() {
                Padding::Same => s.div_ceil(2),
                Padding::Valid => (s - 2) / 2 + 1,
            };
        }
        s
    }

    /// Flattened feature dimension.
    pub fn feature_dim(&self) -> usize {
        let s = self.spatial_after_blocks();
        s * s * self.channels
    }
}

#[derive(Debug, Clone)]
pub struct BnParams<E> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
}

#[derive(Debug, Clone)]
pub struct ConvBlockParams<E> {
    pub kernel: Tensor<E>,
    pub bias: Tensor<E>,
    pub bn: Option<BnParams<E>>,
}

#[derive(Debug, Clone)]
pub struct Encoder<E> {
    pub arch: EncoderArch,
    pub blocks: Vec<ConvBlockParams<E>>,
}

impl<E: Scalar> Encoder<E> {
    pub fn new<R: Rng>(arch: EncoderArch, rng: &mut R) -> Self {
        let mut blocks = Vec::with_capacity(arch.blocks);
        let mut cin = arch.in_channels;
        for _ in 0..arch.blocks {
            let fan_in = 3 * 3 * cin;
            let kernel = fan_in_tensor(rng, vec![3, 3, cin, arch.channels], fan_in, 2.0);
            let bias = Tensor::zeros(vec![arch.channels]);
            let bn = arch.batch_norm.then(|| BnParams {
                gamma: Tensor::full(vec![arch.channels], E::one()),
                beta: Tensor::zeros(vec![arch.channels]),
                running_mean: Tensor::zeros(vec![arch.channels]),
                running_var: Tensor::full(vec![arch.channels], E::one()),
            });
            blocks.push(ConvBlockParams { kernel, bias, bn });
            cin = arch.channels;
        }
        Encoder { arch, blocks }
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> EncoderVars {
        let blocks = self
            .blocks
            .iter()
            .map(|b| ConvBlockVars {
                kernel: tape.param(&b.kernel),
                bias: tape.param(&b.bias),
                bn: b.bn.as_ref().map(|bn| (tape.param(&bn.gamma), tape.param(&bn.beta))),
            })
            .collect();
        EncoderVars { blocks }
    }

    /// Fold one batch's statistics into the running averages.
    pub fn update_bn_stats(&mut self, stats: &[BnBatchStats<E>], momentum: E) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            if let Some(bn) = block.bn.as_mut() {
                let keep = momentum;
                let add = E::one() - momentum;
                for (rm, &m) in bn.running_mean.data_mut().iter_mut().zip(&s.mean) {
                    *rm = keep * *rm + add * m;
                }
                for (rv, &v) in bn.running_var.data_mut().iter_mut().zip(&s.var) {
                    *rv = keep * *rv + add * v;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlockVars {
    pub kernel: Var,
    pub bias: Var,
    pub bn: Option<(Var, Var)>,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub blocks: Vec<ConvBlockVars>,
}

/// Per-block batch statistics captured during a training-mode forward.
#[derive(Debug, Clone)]
pub struct BnBatchStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

/// Run the conv stack: conv (+bn), ReLU, dropout, pool per block, flattened
/// to `[B, feature_dim]`. Dropout only fires in training mode.
pub fn encode<E: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<E>,
    encoder: &Encoder<E>,
    vars: &EncoderVars,
    images: Var,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Vec<BnBatchStats<E>>), ShapeError> {
    let arch = &encoder.arch;
    let shape = tape.shape(images);
    if shape.len() != 4 || shape[1] != arch.image_size || shape[2] != arch.image_size || shape[3] != arch.in_channels
    {
        return Err(ShapeError::Invalid {
            op: "encode",
            msg: format!(
                "expected [B,{0},{0},{1}] images, got {shape:?}",
                arch.image_size, arch.in_channels
            ),
        });
    }
    let mut x = images;
    let mut stats = Vec::new();
    for (block, params) in vars.blocks.iter().zip(&encoder.blocks) {
        x = tape.conv2d(x, block.kernel, 1, Padding::Same)?;
        x = tape.bias_add_channel(x, block.bias)?;
        if let Some((gamma, beta)) = block.bn {
            let bn = params.bn.as_ref().expect("bn params bound");
            let eps = E::from_f64(1e-5);
            if training {
                x = tape.batchnorm(x, gamma, beta, eps, None)?;
                let (m, v) = tape.batchnorm_stats(x).expect("train-mode bn stats");
                stats.push(BnBatchStats {
                    mean: m.to_vec(),
                    var: v.to_vec(),
                });
            } else {
                x = tape.batchnorm(
                    x,
                    gamma,
                    beta,
                    eps,
                    Some((bn.running_mean.data(), bn.running_var.data())),
                )?;
            }
        }
        x = tape.relu(x);
        x = tape.dropout(x, arch.dropout_rate, training, rng)?;
        x = tape.maxpool2d(x, 2, 2, arch.pool_padding())?;
    }
    Ok((tape.flatten_rows(x)?, stats))
}

/// Three fully connected layers, ELU on the hidden two, linear head emitting
/// concatenated (mean, log-variance).
#[derive(Debug, Clone)]
pub struct GaussianNet<E> {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
    pub w3: Tensor<E>,
    pub b3: Tensor<E>,
}

impl<E: Scalar> GaussianNet<E> {
    pub fn new<R: Rng>(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut R) -> Self {
        GaussianNet {
            in_dim,
            hidden,
            out_dim,
            w1: fan_in_tensor(rng, vec![in_dim, hidden], in_dim, 1.0),
            b1: Tensor::zeros(vec![hidden]),
            w2: fan_in_tensor(rng, vec![hidden, hidden], hidden, 1.0),
            b2: Tensor::zeros(vec![hidden]),
            w3: fan_in_tensor(rng, vec![hidden, 2 * out_dim], hidden, 1.0),
            b3: Tensor::zeros(vec![2 * out_dim]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> GaussianNetVars {
        GaussianNetVars {
            out_dim: self.out_dim,
            w1: tape.param(&self.w1),
            b1: tape.param(&self.b1),
            w2: tape.param(&self.w2),
            b2: tape.param(&self.b2),
            w3: tape.param(&self.w3),
            b3: tape.param(&self.b3),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GaussianNetVars {
    out_dim: usize,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

/// Batched forward: `[B, in] -> ([B, out] means, [B, out] log-variances)`.
pub fn gaussian_forward<E: Scalar>(
    tape: &mut Tape<E>,
    net: &GaussianNetVars,
    x: Var,
) -> Result<(Var, Var), ShapeError> {
    let h = tape.linear(x, net.w1, net.b1)?;
    let h = tape.elu(h);
    let h = tape.linear(h, net.w2, net.b2)?;
    let h = tape.elu(h);
    let head = tape.linear(h, net.w3, net.b3)?;
    let means = tape.slice_cols(head, 0, net.out_dim)?;
    let logvars = tape.slice_cols(head, net.out_dim, 2 * net.out_dim)?;
    Ok((means, logvars))
}

fn clamp_floor<E: Scalar>(tape: &mut Tape<E>, logvars: Var, floor: Option<E>) -> Var {
    match floor {
        Some(f) => tape.clamp_min(logvars, f.ln()),
        None => logvars,
    }
}

/// Prototype posterior `q(z | m, h_S)`: concatenate the latent memory sample
/// with the support mean (512-wide for the paper widths) and run the MLP.
pub fn posterior_z<E: Scalar>(
    tape: &mut Tape<E>,
    net: &GaussianNetVars,
    m: Var,
    h_bar: Var,
    floor: Option<E>,
) -> Result<DiagonalGaussian, ShapeError> {
    let d_m = tape.value(m).numel();
    let d_h = tape.value(h_bar).numel();
    let m2 = tape.reshape(m, vec![1, d_m])?;
    let h2 = tape.reshape(h_bar, vec![1, d_h])?;
    let x = tape.concat_cols(m2, h2)?;
    let (means, logvars) = gaussian_forward(tape, net, x)?;
    let d = tape.shape(means)[1];
    let mean = tape.reshape(means, vec![d])?;
    let logvar = tape.reshape(logvars, vec![d])?;
    let logvar = clamp_floor(tape, logvar, floor);
    Ok(DiagonalGaussian {
        mean,
        log_var: logvar,
    })
}

/// Batched posterior over `J` latent-memory samples sharing one support mean.
pub fn posterior_z_batch<E: Scalar>(
    tape: &mut Tape<E>,
    net: &GaussianNetVars,
    ms: Var,
    h_bar: Var,
    floor: Option<E>,
) -> Result<(Var, Var), ShapeError> {
    let j = tape.shape(ms)[0];
    let h_rep = tape.repeat_row(h_bar, j)?;
    let x = tape.concat_cols(ms, h_rep)?;
    let (means, logvars) = gaussian_forward(tape, net, x)?;
    let logvars = clamp_floor(tape, logvars, floor);
    Ok((means, logvars))
}

/// Query-conditional prototype prior `p(z | x)` for a batch of query features.
pub fn prior_z_batch<E: Scalar>(
    tape: &mut Tape<E>,
    net: &GaussianNetVars,
    query_features: Var,
    floor: Option<E>,
) -> Result<(Var, Var), ShapeError> {
    let (means, logvars) = gaussian_forward(tape, net, query_features)?;
    let logvars = clamp_floor(tape, logvars, floor);
    Ok((means, logvars))
}

pub fn prior_z<E: Scalar>(
    tape: &mut Tape<E>,
    net: &GaussianNetVars,
    query_feature: Var,
    floor: Option<E>,
) -> Result<DiagonalGaussian, ShapeError> {
    let d = tape.value(query_feature).numel();
    let x = tape.reshape(query_feature, vec![1, d])?;
    let (means, logvars) = prior_z_batch(tape, net, x, floor)?;
    let dout = tape.shape(means)[1];
    let mean = tape.reshape(means, vec![dout])?;
    let log_var = tape.reshape(logvars, vec![dout])?;
    Ok(DiagonalGaussian { mean, log_var })
}

/// Memory-conditional network: one parameter set serves both `p(m | M_a)`
/// (prior role, slot keys in) and `p(m | h_S)` (posterior role, support mean
/// in), so equal inputs give bitwise-equal distributions in either role.
pub fn memory_net_batch<E: Scalar>(
    tape: &mut Tape<E>,
    net: &GaussianNetVars,
    features: Var,
    floor: Option<E>,
) -> Result<(Var, Var), ShapeError> {
    let (means, logvars) = gaussian_forward(tape, net, features)?;
    let logvars = clamp_floor(tape, logvars, floor);
    Ok((means, logvars))
}

pub fn memory_net<E: Scalar>(
    tape: &mut Tape<E>,
    net: &GaussianNetVars,
    feature: Var,
    floor: Option<E>,
) -> Result<DiagonalGaussian, ShapeError> {
    let d = tape.value(feature).numel();
    let x = tape.reshape(feature, vec![1, d])?;
    let (means, logvars) = memory_net_batch(tape, net, x, floor)?;
    let dout = tape.shape(means)[1];
    let mean = tape.reshape(means, vec![dout])?;
    let log_var = tape.reshape(logvars, vec![dout])?;
    Ok(DiagonalGaussian { mean, log_var })
}

/// All trainable networks. Construction order is fixed so identical seeds
/// give identical parameters regardless of which ablation mode runs.
#[derive(Debug, Clone)]
pub struct Networks<E> {
    pub encoder: Encoder<E>,
    /// q: prototype posterior, input 2d.
    pub posterior: GaussianNet<E>,
    /// p_theta: query-conditional prototype prior, input d.
    pub prior: GaussianNet<E>,
    /// p_psi: memory-conditional net shared between prior and posterior roles.
    pub memory: GaussianNet<E>,
}

impl<E: Scalar> Networks<E> {
    pub fn new<R: Rng>(arch: EncoderArch, rng: &mut R) -> Self {
        let d = arch.feature_dim();
        let encoder = Encoder::new(arch, rng);
        let posterior = GaussianNet::new(2 * d, d, d, rng);
        let prior = GaussianNet::new(d, d, d, rng);
        let memory = GaussianNet::new(d, d, d, rng);
        Networks {
            encoder,
            posterior,
            prior,
            memory,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.arch.feature_dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> EncoderArch {
        EncoderArch {
            image_size: 8,
            in_channels: 1,
            channels: 8,
            blocks: 2,
            pool_valid: false,
            dropout_rate: 0.1,
            batch_norm: false,
        }
    }

    #[test]
    fn paper_architectures_flatten_to_256() {
        assert_eq!(EncoderArch::omniglot().feature_dim(), 256);
        assert_eq!(EncoderArch::cifar().feature_dim(), 256);
        assert_eq!(EncoderArch::imagenet84().feature_dim(), 256);
    }

    #[test]
    fn encoder_output_shape_follows_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc: Encoder<f32> = Encoder::new(EncoderArch::omniglot(), &mut rng);
        for batch in [7, 3] {
            let mut tape = Tape::new();
            let vars = enc.bind(&mut tape);
            let imgs = tape.constant(Tensor::full(vec![batch, 28, 28, 1], 0.5));
            let (f, _) = encode(&mut tape, &enc, &vars, imgs, false, &mut rng).unwrap();
            assert_eq!(tape.shape(f), &[batch, 256]);
        }
    }

    #[test]
    fn zero_input_with_zero_bias_encodes_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc: Encoder<f64> = Encoder::new(small_arch(), &mut rng);
        let mut tape = Tape::new();
        let vars = enc.bind(&mut tape);
        let imgs = tape.constant(Tensor::zeros(vec![2, 8, 8, 1]));
        let (f, _) = encode(&mut tape, &enc, &vars, imgs, false, &mut rng).unwrap();
        assert!(tape.data(f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc: Encoder<f32> = Encoder::new(small_arch(), &mut rng);
        let run = |rng: &mut ChaCha8Rng| {
            let mut tape = Tape::new();
            let vars = enc.bind(&mut tape);
            let imgs = tape.constant(Tensor::full(vec![2, 8, 8, 1], 0.3));
            let (f, _) = encode(&mut tape, &enc, &vars, imgs, false, rng).unwrap();
            tape.data(f).to_vec()
        };
        assert_eq!(run(&mut rng), run(&mut rng));
    }

    #[test]
    fn encode_rejects_wrong_image_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc: Encoder<f32> = Encoder::new(small_arch(), &mut rng);
        let mut tape = Tape::new();
        let vars = enc.bind(&mut tape);
        let imgs = tape.constant(Tensor::zeros(vec![1, 9, 9, 1]));
        assert!(encode(&mut tape, &enc, &vars, imgs, false, &mut rng).is_err());
    }

    #[test]
    fn posterior_emits_paper_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net: GaussianNet<f32> = GaussianNet::new(512, 256, 256, &mut rng);
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape);
        let m = tape.constant(Tensor::full(vec![256], 0.1));
        let h = tape.constant(Tensor::full(vec![256], -0.2));
        let q = posterior_z(&mut tape, &vars, m, h, Some(1e-6)).unwrap();
        assert_eq!(tape.value(q.mean).numel(), 256);
        assert_eq!(tape.value(q.log_var).numel(), 256);
        assert!(tape.value(q.mean).all_finite());
    }

    #[test]
    fn zero_parameter_nets_emit_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net: GaussianNet<f64> = GaussianNet::new(4, 4, 4, &mut rng);
        for t in [&mut net.w1, &mut net.w2, &mut net.w3] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape);
        let x = tape.constant(Tensor::full(vec![4], 0.7));
        let p = prior_z(&mut tape, &vars, x, None).unwrap();
        assert!(tape.data(p.mean).iter().all(|&v| v == 0.0));
        assert!(tape.data(p.log_var).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distinct_queries_give_distinct_priors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net: GaussianNet<f64> = GaussianNet::new(6, 6, 6, &mut rng);
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape);
        let a = tape.constant(Tensor::full(vec![6], 0.4));
        let b = tape.constant(Tensor::full(vec![6], -0.9));
        let pa = prior_z(&mut tape, &vars, a, None).unwrap();
        let pb = prior_z(&mut tape, &vars, b, None).unwrap();
        assert_ne!(tape.data(pa.mean), tape.data(pb.mean));
    }

    #[test]
    fn memory_net_roles_share_parameters_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net: GaussianNet<f32> = GaussianNet::new(5, 5, 5, &mut rng);
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape);
        let feat = tape.constant(Tensor::full(vec![5], 0.2));
        // Prior role (a slot key in) and posterior role (a support mean in)
        // on equal inputs must agree exactly.
        let prior_role = memory_net(&mut tape, &vars, feat, Some(1e-6)).unwrap();
        let post_role = memory_net(&mut tape, &vars, feat, Some(1e-6)).unwrap();
        assert_eq!(tape.data(prior_role.mean), tape.data(post_role.mean));
        assert_eq!(tape.data(prior_role.log_var), tape.data(post_role.log_var));
    }

    #[test]
    fn memory_net_gradient_flows_to_feature_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net: GaussianNet<f64> = GaussianNet::new(4, 4, 4, &mut rng);
        let eval = |feat: &[f64]| {
            let mut tape = Tape::new();
            let vars = net.bind(&mut tape);
            let f = tape.leaf(Tensor::vector(feat.to_vec()), true);
            let g = memory_net(&mut tape, &vars, f, None).unwrap();
            let s = tape.sum_all(g.mean);
            (tape.item(s), tape, f, s)
        };
        let x = [0.3, -0.5, 0.8, 0.1];
        let (_, mut tape, f, s) = eval(&x);
        tape.backward(s).unwrap();
        let analytic = tape.grad(f).unwrap().to_vec();
        for i in 0..4 {
            let mut plus = x;
            plus[i] += 1e-6;
            let mut minus = x;
            minus[i] -= 1e-6;
            let numeric = (eval(&plus).0 - eval(&minus).0) / 2e-6;
            assert!(
                (analytic[i] - numeric).abs() < 1e-6,
                "{} vs {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn batchnorm_running_stats_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut arch = small_arch();
        arch.batch_norm = true;
        let mut enc: Encoder<f64> = Encoder::new(arch, &mut rng);
        let mut tape = Tape::new();
        let vars = enc.bind(&mut tape);
        let imgs = tape.constant(Tensor::full(vec![2, 8, 8, 1], 0.4));
        let (_, stats) = encode(&mut tape, &enc, &vars, imgs, true, &mut rng).unwrap();
        assert_eq!(stats.len(), 2);
        let before = enc.blocks[0].bn.as_ref().unwrap().running_mean.data()[0];
        enc.update_bn_stats(&stats, 0.9);
        let after = enc.blocks[0].bn.as_ref().unwrap().running_mean.data()[0];
        assert_ne!(before, after);
    }
}
