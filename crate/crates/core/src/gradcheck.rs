//! End-to-end gradient checking: central finite differences of the total
//! loss against the recorded gradients, over every trainable parameter of a
//! small model, in 64-bit.
//!
//! The relative error measure is `|a − b| / max(1e-8, |a| + |b|)`; the
//! default tolerance is 1e-4 at ε = 1e-5. Gradients that agree within an
//! absolute 1e-8 count as matching regardless of the ratio: central
//! differences of an O(1) loss carry ~1e-11 of f64 cancellation noise, and
//! some parameters (key-projection biases, which shift every score of a
//! softmax row equally) have exactly-zero true gradients, so their FD
//! estimate is pure noise. The floor sits three orders of magnitude above
//! that noise and six below any plausible backward-rule error.

use crate::data::{MultiChannelSample, Vocabulary, RESERVED_TOKENS};
use crate::error::Result;
use crate::model::{FusionMode, Model, ModelConfig};
use crate::tensor::{NormMode, Scalar, Tape, Tensor};
use crate::training::{batch_loss, collect_grads, LossConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const GRADCHECK_EPSILON: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Absolute agreement floor (see module docs).
pub const GRADCHECK_ABS_AGREEMENT: f64 = 1e-8;

/// Relative error used throughout the gradient checks.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-8, a.abs() + b.abs())
}

/// Relative error with the absolute agreement floor applied.
pub fn check_err(analytic: f64, fd: f64) -> f64 {
    if (analytic - fd).abs() <= GRADCHECK_ABS_AGREEMENT {
        0.0
    } else {
        rel_err(analytic, fd)
    }
}

/// A small configuration suitable for finite-difference checking.
pub fn tiny_config(n_channels: usize, anchoring: bool) -> ModelConfig {
    let dims = [5usize, 4, 3];
    let anchor_counts = [3usize, 4, 2];
    ModelConfig {
        channel_dims: dims[..n_channels].to_vec(),
        d_m: 8,
        d_ff: 16,
        enc_layers: 1,
        dec_layers: 1,
        heads: 1,
        vocab_size: 11,
        anchor_classes: if anchoring {
            anchor_counts[..n_channels].to_vec()
        } else {
            vec![0; n_channels]
        },
        fusion: FusionMode::Multichannel,
        lambda_t: 1.0,
        lambda_a: if anchoring { 0.15 } else { 0.0 },
        channel_embedding: crate::embeddings::EmbeddingSwitches::channel_default(),
        word_embedding: crate::embeddings::EmbeddingSwitches::word_default(),
        t_max: 64,
    }
}

/// A vocabulary with exactly the configured size.
pub fn synthetic_vocab(size: usize) -> Vocabulary {
    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..size - 4).map(|i| format!("w{i}")));
    Vocabulary::from_tokens(tokens).expect("synthetic vocabulary")
}

/// A random micro-batch matching the configuration.
pub fn random_micro_batch<F: Scalar>(
    config: &ModelConfig,
    n_samples: usize,
    seed: u64,
) -> Vec<MultiChannelSample<F>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let anchors = config.anchors();
    (0..n_samples)
        .map(|i| {
            let channels: Vec<Tensor<F>> = config
                .channel_dims
                .iter()
                .map(|&d| {
                    let t = rng.random_range(2..5);
                    let data: Vec<F> = (0..t * d)
                        .map(|_| crate::tensor::cast(rng.random_range(-1.0..1.0)))
                        .collect();
                    Tensor::new(vec![t, d], data).expect("random features")
                })
                .collect();
            let anchor_labels: Vec<Option<Vec<usize>>> = channels
                .iter()
                .zip(&anchors)
                .map(|(feat, &g)| {
                    (g > 0).then(|| {
                        (0..feat.shape()[0]).map(|_| rng.random_range(0..g)).collect()
                    })
                })
                .collect();
            let len = rng.random_range(2..5);
            let target: Vec<String> =
                (0..len).map(|_| format!("w{}", rng.random_range(0..config.vocab_size - 4))).collect();
            MultiChannelSample { id: format!("gc{i}"), channels, anchors: anchor_labels, target }
        })
        .collect()
}

/// Outcome of one finite-difference sweep.
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Worst offenders: (address, flat index, relative error), sorted.
    pub worst: Vec<(String, usize, f64)>,
    pub checked_scalars: usize,
    pub passed: bool,
}

/// Check every trainable parameter of a model built from `config` against
/// central finite differences of the total loss on a random micro-batch.
/// `sabotage` perturbs one recorded gradient first, as a negative control
/// that the detector actually detects.
pub fn gradcheck_model(
    config: &ModelConfig,
    seed: u64,
    tolerance: f64,
    sabotage: bool,
) -> Result<GradCheckReport> {
    config.validate()?;
    let mut model = Model::<f64>::new(config.clone(), seed)?;
    let vocab = synthetic_vocab(config.vocab_size);
    let samples = random_micro_batch::<f64>(config, 2, seed ^ 0x6d6963726f);
    let batch = crate::data::make_batches(&samples, &vocab, samples.len(), 0).remove(0);
    let loss_cfg = LossConfig {
        lambda_t: config.lambda_t,
        lambda_a: config.lambda_a,
        ..Default::default()
    };

    let loss_of = |model: &Model<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let mut ctx = model.fwd(&mut tape, NormMode::Train);
        let fwd = model.forward_batch(&mut ctx, &batch)?;
        let loss = batch_loss(model, &mut ctx, &fwd, &batch, &loss_cfg)?;
        Ok(loss.total_value)
    };

    // analytic gradients
    let mut analytic = {
        let mut tape = Tape::new();
        let mut ctx = model.fwd(&mut tape, NormMode::Train);
        let fwd = model.forward_batch(&mut ctx, &batch)?;
        let loss = batch_loss(&model, &mut ctx, &fwd, &batch, &loss_cfg)?;
        let leaves = ctx.leaves().clone();
        tape.backward(loss.total)?;
        collect_grads(&tape, &leaves)
    };
    if sabotage {
        if let Some(g) = analytic.values_mut().next() {
            g[0] += 0.05;
        }
    }

    let addresses: Vec<String> = model
        .params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(a, _)| a.clone())
        .collect();
    let mut max_err = 0.0f64;
    let mut worst: Vec<(String, usize, f64)> = Vec::new();
    let mut checked = 0usize;
    for addr in addresses {
        let numel = model.params.tensor(&addr)?.numel();
        let zeros = vec![0.0; numel];
        let grad = analytic.get(&addr).unwrap_or(&zeros).clone();
        for i in 0..numel {
            let orig = model.params.tensor(&addr)?.data()[i];
            model.params.tensor_mut(&addr)?.data_mut()[i] = orig + GRADCHECK_EPSILON;
            let up = loss_of(&model)?;
            model.params.tensor_mut(&addr)?.data_mut()[i] = orig - GRADCHECK_EPSILON;
            let down = loss_of(&model)?;
            model.params.tensor_mut(&addr)?.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * GRADCHECK_EPSILON);
            let err = check_err(grad[i], fd);
            checked += 1;
            if err > max_err {
                max_err = err;
            }
            if err > tolerance {
                worst.push((addr.clone(), i, err));
            }
        }
    }
    worst.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
    worst.truncate(5);
    Ok(GradCheckReport { max_rel_err: max_err, worst, checked_scalars: checked, passed: max_err < tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_single_channel_passes() {
        let report =
            gradcheck_model(&tiny_config(1, false), 11, GRADCHECK_TOLERANCE, false).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        assert!(report.checked_scalars > 1000);
    }

    #[test]
    fn anchored_two_channel_passes() {
        let report =
            gradcheck_model(&tiny_config(2, true), 12, GRADCHECK_TOLERANCE, false).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn multi_head_passes() {
        let mut cfg = tiny_config(2, false);
        cfg.heads = 2;
        let report = gradcheck_model(&cfg, 13, GRADCHECK_TOLERANCE, false).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn late_fusion_passes() {
        let mut cfg = tiny_config(2, false);
        cfg.fusion = FusionMode::Late;
        let report = gradcheck_model(&cfg, 14, GRADCHECK_TOLERANCE, false).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn sabotaged_gradient_is_detected() {
        let report = gradcheck_model(&tiny_config(1, false), 11, GRADCHECK_TOLERANCE, true).unwrap();
        assert!(!report.passed);
        assert!(!report.worst.is_empty());
    }

    #[test]
    fn word_embedding_ablation_switches_pass() {
        // batch norm + soft-sign + scaling on the word side as well
        let mut cfg = tiny_config(1, false);
        cfg.word_embedding = crate::embeddings::EmbeddingSwitches {
            scale: true,
            batch_norm: true,
            activation: Some(crate::tensor::Activation::Softsign),
        };
        cfg.channel_embedding.scale = true;
        let report = gradcheck_model(&cfg, 15, GRADCHECK_TOLERANCE, false).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }
}
