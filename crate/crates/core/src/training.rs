//! Losses, Adam optimization, Xavier initialization, the plateau/early-stop
//! schedule, and the training loop.
//!
//! The training objective is per-token negative log-likelihood combined with
//! per-frame anchoring cross-entropies, weighted by λ_T and λ_A. The literal
//! product-form loss is kept as an evaluation-only diagnostic (its gradient
//! vanishes as any factor approaches zero, so it is not used for training).
//! Losses are normalized on the sequence level by default: sums are divided
//! by the batch size rather than the token count.

use crate::data::{make_batches, Batch, MultiChannelSample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{BatchForward, FwdCtx, Model, ParamBank};
use crate::tensor::{cast, NormMode, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;

/// Loss scale: divide batch sums by the sample count or the token count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNormalization {
    #[default]
    Sequence,
    Token,
}

/// Whether anchor targets are hard class ids or full distributions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorTargetMode {
    #[default]
    Hard,
    Soft,
}

/// Loss combination settings.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_t: f64,
    pub lambda_a: f64,
    pub normalization: LossNormalization,
    pub anchor_target_mode: AnchorTargetMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_t: 1.0,
            lambda_a: 0.15,
            normalization: LossNormalization::Sequence,
            anchor_target_mode: AnchorTargetMode::Hard,
        }
    }
}

// ── losses ───────────────────────────────────────────────────────────

/// Negative log-likelihood of one target sequence under the decoder logits,
/// summed over unmasked steps. Token normalization divides by the unmasked
/// count; sequence normalization leaves the sum (the batch assembler divides
/// by the batch size).
pub fn translation_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    targets: &[u32],
    mask: &[bool],
    normalization: LossNormalization,
) -> Result<Var> {
    let rows = tape.shape(logits)[0];
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Dim {
            op: "translation_loss",
            details: format!("{} targets / {} mask for {rows} logit rows", targets.len(), mask.len()),
        });
    }
    let real = mask.iter().filter(|&&m| m).count();
    if real == 0 {
        return Err(Error::Input("translation loss over a pad-only target".into()));
    }
    let w = match normalization {
        LossNormalization::Sequence => F::one(),
        LossNormalization::Token => cast::<F>(1.0 / real as f64),
    };
    let weights: Vec<F> = mask.iter().map(|&m| if m { w } else { F::zero() }).collect();
    let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let logp = tape.log_softmax_rows(logits)?;
    tape.nll_loss(logp, &ids, &weights)
}

/// The literal product-form translation loss, evaluation-only:
/// `1 − Π_u Σ_g p(y_u^g)·p̂(y_u^g)` with hard ground truth.
pub fn product_loss_diagnostic<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[u32],
    mask: &[bool],
) -> Result<f64> {
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Dim {
            op: "product_loss",
            details: format!("{} targets for {rows} rows", targets.len()),
        });
    }
    let mut product = 1.0;
    for u in 0..rows {
        if !mask[u] {
            continue;
        }
        let row: Vec<f64> = logits.data()[u * cols..(u + 1) * cols]
            .iter()
            .map(|v| v.to_f64().unwrap())
            .collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        product *= (row[targets[u] as usize] - max).exp() / z;
    }
    Ok(1.0 - product)
}

/// Anchor targets: external classifier ids, or full per-frame distributions.
pub enum AnchorTargets<'a, F> {
    Hard(&'a [usize]),
    Soft(&'a Tensor<F>),
}

/// Per-frame cross-entropy between softmaxed anchor logits and the channel's
/// classifier targets, summed over frames (sequence normalization; token
/// normalization divides by the frame count).
pub fn anchoring_loss<F: Scalar>(
    tape: &mut Tape<F>,
    anchor_logits: Var,
    targets: &AnchorTargets<F>,
    normalization: LossNormalization,
) -> Result<Var> {
    let rows = tape.shape(anchor_logits)[0];
    let w = match normalization {
        LossNormalization::Sequence => F::one(),
        LossNormalization::Token => cast::<F>(1.0 / rows as f64),
    };
    let weights = vec![w; rows];
    let logp = tape.log_softmax_rows(anchor_logits)?;
    match targets {
        AnchorTargets::Hard(ids) => {
            if ids.len() != rows {
                return Err(Error::Dim {
                    op: "anchoring_loss",
                    details: format!("{} labels for {rows} frames", ids.len()),
                });
            }
            tape.nll_loss(logp, ids, &weights)
        }
        AnchorTargets::Soft(dist) => {
            let cols = tape.shape(anchor_logits)[1];
            if dist.shape() != [rows, cols] {
                return Err(Error::Dim {
                    op: "anchoring_loss",
                    details: format!("distribution shape {:?} for {rows}x{cols} logits", dist.shape()),
                });
            }
            for r in 0..rows {
                let sum: f64 = dist.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|v| v.to_f64().unwrap())
                    .sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Input(format!(
                        "soft anchor target row {r} sums to {sum}, not 1"
                    )));
                }
            }
            tape.soft_ce_loss(logp, dist, &weights)
        }
    }
}

/// `λ_T·L_T + λ_A·Σ_i L_{A,i}`.
pub fn total_loss<F: Scalar>(
    tape: &mut Tape<F>,
    translation: Var,
    anchoring: &[Var],
    cfg: &LossConfig,
) -> Result<Var> {
    let t = tape.scale(translation, cast(cfg.lambda_t))?;
    if anchoring.is_empty() {
        return Ok(t);
    }
    let mut acc = anchoring[0];
    for &a in &anchoring[1..] {
        acc = tape.add(acc, a)?;
    }
    let a = tape.scale(acc, cast(cfg.lambda_a))?;
    tape.add(t, a)
}

/// Loss values of one batch forward, with the tape node of the total.
pub struct BatchLoss {
    pub total: Var,
    pub total_value: f64,
    pub translation_value: f64,
    pub anchoring_value: f64,
}

/// Assemble translation + anchoring losses over a whole batch.
pub fn batch_loss<F: Scalar>(
    model: &Model<F>,
    ctx: &mut FwdCtx<F>,
    fwd: &BatchForward,
    batch: &Batch<F>,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let b = batch.len();
    let mut per_sample = Vec::with_capacity(b);
    let mut token_count = 0usize;
    for (s, &logits) in fwd.logits.iter().enumerate() {
        let targets = batch.decoder_output(s);
        token_count += targets.len();
        let mask = vec![true; targets.len()];
        per_sample.push(translation_loss(
            ctx.tape,
            logits,
            &targets,
            &mask,
            LossNormalization::Sequence,
        )?);
    }
    let mut t_sum = per_sample[0];
    for &l in &per_sample[1..] {
        t_sum = ctx.tape.add(t_sum, l)?;
    }
    let t_scale = match cfg.normalization {
        LossNormalization::Sequence => 1.0 / b as f64,
        LossNormalization::Token => 1.0 / token_count as f64,
    };
    let l_t = ctx.tape.scale(t_sum, cast(t_scale))?;

    let anchors = model.config().anchors();
    let mut l_a = Vec::new();
    for (c, &g) in anchors.iter().enumerate() {
        if g == 0 {
            continue;
        }
        let mut sums = Vec::with_capacity(b);
        let mut frames = 0usize;
        for s in 0..b {
            let logits = fwd.anchor_logits[s][c].ok_or_else(|| {
                Error::Config(format!("channel {c} is anchored but produced no anchor logits"))
            })?;
            let labels = batch.channels[c].anchors[s].as_ref().ok_or_else(|| {
                Error::Input(format!(
                    "channel {c} is anchored but sample {} carries no anchor labels",
                    batch.ids[s]
                ))
            })?;
            if let Some(&bad) = labels.iter().find(|&&l| l >= g) {
                return Err(Error::Input(format!(
                    "anchor label {bad} out of range for {g} classes on channel {c}"
                )));
            }
            frames += labels.len();
            let loss = match cfg.anchor_target_mode {
                AnchorTargetMode::Hard => anchoring_loss(
                    ctx.tape,
                    logits,
                    &AnchorTargets::Hard(labels),
                    LossNormalization::Sequence,
                )?,
                AnchorTargetMode::Soft => {
                    // hard ids become degenerate one-hot distributions
                    let mut dist = vec![F::zero(); labels.len() * g];
                    for (t, &l) in labels.iter().enumerate() {
                        dist[t * g + l] = F::one();
                    }
                    let dist = Tensor::new(vec![labels.len(), g], dist)?;
                    anchoring_loss(
                        ctx.tape,
                        logits,
                        &AnchorTargets::Soft(&dist),
                        LossNormalization::Sequence,
                    )?
                }
            };
            sums.push(loss);
        }
        let mut a_sum = sums[0];
        for &l in &sums[1..] {
            a_sum = ctx.tape.add(a_sum, l)?;
        }
        let a_scale = match cfg.normalization {
            LossNormalization::Sequence => 1.0 / b as f64,
            LossNormalization::Token => 1.0 / frames as f64,
        };
        l_a.push(ctx.tape.scale(a_sum, cast(a_scale))?);
    }

    let translation_value = ctx.tape.scalar_value(l_t).to_f64().unwrap();
    let anchoring_value: f64 =
        l_a.iter().map(|&v| ctx.tape.scalar_value(v).to_f64().unwrap()).sum();
    let total = total_loss(ctx.tape, l_t, &l_a, cfg)?;
    let total_value = ctx.tape.scalar_value(total).to_f64().unwrap();
    Ok(BatchLoss { total, total_value, translation_value, anchoring_value })
}

// ── initialization ───────────────────────────────────────────────────

/// Xavier-uniform init: samples in ±√(6/(fan_in+fan_out)) for 2-D shapes;
/// non-2-D shapes fall back to fan-in only (±√(6/fan_in) with fan_in = first
/// dim). Deterministic per seed.
pub fn xavier_init<F: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<F>> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Dim {
            op: "xavier_init",
            details: format!("invalid shape {shape:?}"),
        });
    }
    let bound = if shape.len() == 2 {
        (6.0 / (shape[0] + shape[1]) as f64).sqrt()
    } else {
        (6.0 / shape[0] as f64).sqrt()
    };
    let numel: usize = shape.iter().product();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let data: Vec<F> = (0..numel)
        .map(|_| {
            let u: f64 = rand::Rng::random::<f64>(&mut rng);
            cast(u * 2.0 * bound - bound)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

// ── optimizer ────────────────────────────────────────────────────────

/// Adam hyperparameters. Weight decay is applied as an L2 term added to the
/// gradient before the moment updates.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clip; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.998,
            eps: 1e-8,
            weight_decay: 1e-3,
            grad_clip: None,
        }
    }
}

/// Per-parameter first/second moments plus the step counter and current
/// learning rate (the plateau scheduler halves it in place).
pub struct OptimizerState<F> {
    m: BTreeMap<String, Vec<F>>,
    v: BTreeMap<String, Vec<F>>,
    pub step: usize,
    pub lr: f64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        OptimizerState { m: BTreeMap::new(), v: BTreeMap::new(), step: 0, lr: cfg.lr }
    }
}

/// One Adam update over every trainable parameter. Parameters without a
/// gradient entry are treated as zero-gradient (weight decay still applies).
pub fn adam_step<F: Scalar>(
    bank: &mut ParamBank<F>,
    grads: &BTreeMap<String, Vec<F>>,
    state: &mut OptimizerState<F>,
    cfg: &OptimizerConfig,
) -> Result<()> {
    for (addr, g) in grads {
        let p = bank.get(addr)?;
        if g.len() != p.tensor.numel() {
            return Err(Error::Dim {
                op: "adam_step",
                details: format!("{addr}: gradient has {} entries for {}", g.len(), p.tensor.numel()),
            });
        }
    }
    let clip_factor = match cfg.grad_clip {
        Some(max_norm) if max_norm > 0.0 => {
            let sq: f64 = grads
                .values()
                .flat_map(|g| g.iter().map(|v| v.to_f64().unwrap().powi(2)))
                .sum();
            let norm = sq.sqrt();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let lr = cast::<F>(state.lr);
    let b1 = cast::<F>(cfg.beta1);
    let b2 = cast::<F>(cfg.beta2);
    let eps = cast::<F>(cfg.eps);
    let wd = cast::<F>(cfg.weight_decay);
    let clip = cast::<F>(clip_factor);
    let bias1 = F::one() - b1.powi(t);
    let bias2 = F::one() - b2.powi(t);
    let zero_grad: Vec<F> = Vec::new();
    let addresses: Vec<String> = bank
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(a, _)| a.clone())
        .collect();
    for addr in addresses {
        let numel = bank.tensor(&addr)?.numel();
        let g_raw = grads.get(&addr).map(|v| v.as_slice()).unwrap_or(&zero_grad);
        let m = state.m.entry(addr.clone()).or_insert_with(|| vec![F::zero(); numel]);
        let v = state.v.entry(addr.clone()).or_insert_with(|| vec![F::zero(); numel]);
        let theta = bank.tensor_mut(&addr)?.data_mut();
        for i in 0..numel {
            let gi = if g_raw.is_empty() { F::zero() } else { g_raw[i] * clip };
            let gi = gi + wd * theta[i];
            m[i] = b1 * m[i] + (F::one() - b1) * gi;
            v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Extract gradients for every registered parameter leaf.
pub fn collect_grads<F: Scalar>(
    tape: &Tape<F>,
    leaves: &BTreeMap<String, Var>,
) -> BTreeMap<String, Vec<F>> {
    leaves.iter().map(|(addr, &v)| (addr.clone(), tape.grad_or_zeros(v))).collect()
}

// ── schedule & loop ──────────────────────────────────────────────────

/// Batch/evaluation cadence and stopping rules.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    /// Dev evaluation every this many steps.
    pub eval_every: usize,
    /// Halve the learning rate after this many evaluations without BLEU-4
    /// improvement.
    pub patience: usize,
    /// Stop after this many evaluations without improvement.
    pub early_stop: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { batch_size: 32, max_steps: 2000, eval_every: 100, patience: 8, early_stop: 25 }
    }
}

/// Dev-set scores produced by an evaluator.
#[derive(Clone, Copy, Debug)]
pub struct EvalScores {
    pub bleu4: f64,
    pub rouge_l: f64,
}

/// Training result: the best-dev-BLEU parameters plus traces and logs.
pub struct TrainOutcome<F> {
    pub best_params: ParamBank<F>,
    pub best_bleu: f64,
    pub best_step: usize,
    pub final_bleu: f64,
    pub steps_run: usize,
    pub evals_run: usize,
    pub stopped_early: bool,
    pub loss_trace: Vec<f64>,
    pub log: Vec<String>,
}

/// Check that every anchored channel actually carries labels when λ_A > 0.
pub fn validate_anchor_coverage<F: Scalar>(
    corpus: &[MultiChannelSample<F>],
    anchors: &[usize],
    lambda_a: f64,
) -> Result<()> {
    if lambda_a <= 0.0 {
        return Ok(());
    }
    for (c, &g) in anchors.iter().enumerate() {
        if g == 0 {
            continue;
        }
        if let Some(s) = corpus.iter().find(|s| s.anchors[c].is_none()) {
            return Err(Error::Config(format!(
                "channel {c} is anchored (G_{c}={g}) but sample {} has no anchor labels",
                s.id
            )));
        }
    }
    Ok(())
}

/// Run mini-batch training with periodic dev evaluation, plateau LR halving,
/// early stopping, and best-checkpoint retention. The evaluator is injected
/// so tests can rig it; production uses greedy decoding + BLEU-4.
#[allow(clippy::too_many_arguments)]
pub fn train_loop<F: Scalar>(
    model: &mut Model<F>,
    train: &[MultiChannelSample<F>],
    dev: &[MultiChannelSample<F>],
    vocab: &Vocabulary,
    loss_cfg: &LossConfig,
    opt_cfg: &OptimizerConfig,
    sched: &ScheduleConfig,
    seed: u64,
    mut eval_fn: impl FnMut(&Model<F>, &[MultiChannelSample<F>], &Vocabulary) -> Result<EvalScores>,
    mut log_sink: impl FnMut(&str),
) -> Result<TrainOutcome<F>> {
    if train.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    validate_anchor_coverage(train, &model.config().anchors(), loss_cfg.lambda_a)?;

    let mut state = OptimizerState::<F>::new(opt_cfg);
    let mut best_params = model.params.clone();
    let mut best_bleu = f64::NEG_INFINITY;
    let mut best_step = 0;
    let mut final_bleu = 0.0;
    let mut bad_evals = 0usize;
    let mut evals_run = 0usize;
    let mut stopped_early = false;
    let mut loss_trace = Vec::new();
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut epoch = 0u64;

    'outer: while step < sched.max_steps {
        let batches = make_batches(train, vocab, sched.batch_size, seed.wrapping_add(epoch));
        epoch += 1;
        for batch in &batches {
            if step >= sched.max_steps {
                break 'outer;
            }
            let mut tape = Tape::new();
            let mut ctx = model.fwd(&mut tape, NormMode::Train);
            let numeric = |e: Error, step: usize| match e {
                Error::NonFinite { op } => Error::Numeric {
                    step,
                    details: format!("non-finite value in {op} during training forward/backward"),
                },
                other => other,
            };
            let fwd = model.forward_batch(&mut ctx, batch).map_err(|e| numeric(e, step))?;
            let loss =
                batch_loss(model, &mut ctx, &fwd, batch, loss_cfg).map_err(|e| numeric(e, step))?;
            if !loss.total_value.is_finite() {
                return Err(Error::Numeric {
                    step,
                    details: format!("loss became non-finite: {}", loss.total_value),
                });
            }
            let leaves = ctx.leaves().clone();
            let updates = std::mem::take(&mut ctx.stat_updates);
            tape.backward(loss.total).map_err(|e| numeric(e, step))?;
            let grads = collect_grads(&tape, &leaves);
            adam_step(&mut model.params, &grads, &mut state, opt_cfg)?;
            model.apply_stat_updates(updates)?;
            step += 1;
            loss_trace.push(loss.total_value);
            let line = format!(
                "step={} loss={:.6} loss_t={:.6} loss_a={:.6} lr={:e}",
                step, loss.total_value, loss.translation_value, loss.anchoring_value, state.lr
            );
            log_sink(&line);
            log.push(line);

            if step % sched.eval_every == 0 {
                let scores = eval_fn(model, dev, vocab)?;
                evals_run += 1;
                final_bleu = scores.bleu4;
                let improved = scores.bleu4 > best_bleu;
                if improved {
                    best_bleu = scores.bleu4;
                    best_step = step;
                    best_params = model.params.clone();
                    bad_evals = 0;
                } else {
                    bad_evals += 1;
                }
                let line = format!(
                    "eval step={} dev_bleu4={:.4} dev_rougel={:.4} best_bleu4={:.4} bad_evals={}",
                    step, scores.bleu4, scores.rouge_l, best_bleu, bad_evals
                );
                log_sink(&line);
                log.push(line);
                if !improved && bad_evals % sched.patience == 0 {
                    state.lr /= 2.0;
                    let line = format!("lr_halved step={} lr={:e}", step, state.lr);
                    log_sink(&line);
                    log.push(line);
                }
                if bad_evals >= sched.early_stop {
                    stopped_early = true;
                    let line = format!("early_stop step={} bad_evals={}", step, bad_evals);
                    log_sink(&line);
                    log.push(line);
                    break 'outer;
                }
            }
        }
    }

    if best_bleu == f64::NEG_INFINITY {
        // no evaluation ever ran; keep the final parameters
        best_params = model.params.clone();
        best_step = step;
    }
    Ok(TrainOutcome {
        best_params,
        best_bleu: if best_bleu == f64::NEG_INFINITY { 0.0 } else { best_bleu },
        best_step,
        final_bleu,
        steps_run: step,
        evals_run,
        stopped_early,
        loss_trace,
        log,
    })
}

/// Default decode length cap for dev evaluation and translation.
pub const DEFAULT_MAX_DECODE_LEN: usize = 60;

/// Production dev evaluator: greedy decoding, corpus BLEU-4 and ROUGE-L.
pub fn greedy_dev_scores<F: Scalar>(
    model: &Model<F>,
    dev: &[MultiChannelSample<F>],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EvalScores> {
    let hyps = crate::decoding::translate_corpus(model, dev, vocab, 0, 0.0, max_len)?;
    let pairs: Vec<crate::metrics::EvalPair> = hyps
        .into_iter()
        .zip(dev)
        .map(|(hyp, s)| crate::metrics::EvalPair { hypothesis: hyp, reference: s.target.clone() })
        .collect();
    Ok(EvalScores {
        bleu4: crate::metrics::bleu4(&pairs)?,
        rouge_l: crate::metrics::rouge_l(&pairs, crate::metrics::ROUGE_BETA)?,
    })
}
