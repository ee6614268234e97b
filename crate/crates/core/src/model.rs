//! Model assembly: configuration, the parameter bank, and the stacked
//! multi-channel encoder/decoder forward passes, including the early/late
//! fusion baseline variants.
//!
//! Parameters are stored flat, keyed by hierarchical string addresses such as
//! `enc.l0.ch1.cs.wq`. The address set is a pure function of the
//! configuration, so checkpoints can be validated structurally. Forward
//! passes register parameters as tape leaves on demand through a [`FwdCtx`];
//! batch-norm running statistics are buffers, never tape leaves, and their
//! train-mode updates are collected in the context for the caller to apply.
//!
//! Padded batches are consumed by slicing out each sample's real rows, so
//! padded positions can never influence attention; the attention functions
//! additionally accept key masks for callers that keep padding inline.

use crate::attention::{
    channel_self_attention_block, linear, masked_target_self_attention,
    multichannel_decoder_attention, multichannel_encoder_attention, AttnBlockVars, AttnProjVars,
    FeedForwardVars, KvProjVars, LayerNormVars, McDecVars,
};
use crate::data::{Batch, MultiChannelSample};
use crate::embeddings::{
    embed_channel, embed_words, EmbeddingSwitches, EmbeddingVars, NormParamVars, PositionalTable,
    DEFAULT_T_MAX,
};
use crate::error::{Error, Result};
use crate::tensor::{NormMode, Scalar, Tape, Tensor, Var};
use std::collections::BTreeMap;

/// How source channels are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Channel-wise self attention + multi-channel encoder/decoder attention.
    #[default]
    Multichannel,
    /// Per-frame feature concatenation into one channel (requires
    /// frame-synchronous channels).
    Early,
    /// Independent per-channel models fused at the decoder output.
    Late,
    /// Alias for a one-channel multichannel model.
    Single,
}

fn default_heads() -> usize {
    1
}

fn default_lambda_t() -> f64 {
    1.0
}

fn default_lambda_a() -> f64 {
    0.15
}

fn default_t_max() -> usize {
    DEFAULT_T_MAX
}

/// All architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input feature width per channel; the length is the channel count N.
    pub channel_dims: Vec<usize>,
    pub d_m: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Target vocabulary size including the 4 reserved tokens.
    pub vocab_size: usize,
    /// Anchor class count per channel; 0 disables anchoring for the channel.
    #[serde(default)]
    pub anchor_classes: Vec<usize>,
    #[serde(default)]
    pub fusion: FusionMode,
    #[serde(default = "default_lambda_t")]
    pub lambda_t: f64,
    #[serde(default = "default_lambda_a")]
    pub lambda_a: f64,
    #[serde(default = "EmbeddingSwitches::channel_default")]
    pub channel_embedding: EmbeddingSwitches,
    #[serde(default = "EmbeddingSwitches::word_default")]
    pub word_embedding: EmbeddingSwitches,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
}

impl ModelConfig {
    pub fn n_channels(&self) -> usize {
        self.channel_dims.len()
    }

    /// Anchor class counts normalized to one entry per channel.
    pub fn anchors(&self) -> Vec<usize> {
        if self.anchor_classes.is_empty() {
            vec![0; self.n_channels()]
        } else {
            self.anchor_classes.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channel_dims.is_empty() || self.channel_dims.iter().any(|&d| d == 0) {
            return fail(format!("channel_dims {:?} must be non-empty and positive", self.channel_dims));
        }
        if self.d_m == 0 || self.d_m % 2 != 0 {
            return fail(format!("d_m {} must be positive and even", self.d_m));
        }
        if self.heads == 0 || self.d_m % self.heads != 0 {
            return fail(format!("d_m {} must be divisible by {} heads", self.d_m, self.heads));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return fail("enc_layers and dec_layers must be at least 1".into());
        }
        if self.vocab_size < 5 {
            return fail(format!("vocab_size {} leaves no room beyond reserved tokens", self.vocab_size));
        }
        if !self.anchor_classes.is_empty() && self.anchor_classes.len() != self.n_channels() {
            return fail(format!(
                "{} anchor class counts for {} channels",
                self.anchor_classes.len(),
                self.n_channels()
            ));
        }
        if self.lambda_t < 0.0 || self.lambda_a < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        if self.t_max == 0 {
            return fail("t_max must be positive".into());
        }
        match self.fusion {
            FusionMode::Single if self.n_channels() != 1 => {
                fail("fusion mode 'single' requires exactly one channel".into())
            }
            FusionMode::Early | FusionMode::Late if self.anchors().iter().any(|&a| a > 0) => {
                fail("anchoring is only supported by the multichannel model".into())
            }
            _ => Ok(()),
        }
    }

    /// Channel widths as seen by the computation graph (early fusion folds
    /// all channels into one).
    pub fn graph_dims(&self) -> Vec<usize> {
        match self.fusion {
            FusionMode::Early => vec![self.channel_dims.iter().sum()],
            _ => self.channel_dims.clone(),
        }
    }
}

// ── parameter bank ───────────────────────────────────────────────────

/// How a parameter is initialized; buffers are not trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Xavier-uniform weight matrix.
    Weight,
    /// Trainable zeros (biases, norm shifts).
    Zeros,
    /// Trainable ones (norm gains).
    Ones,
    /// Running-mean buffer.
    BufZeros,
    /// Running-variance buffer.
    BufOnes,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BufZeros | ParamKind::BufOnes)
    }
}

/// One stored tensor plus its trainability.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub tensor: Tensor<F>,
    pub trainable: bool,
}

/// Flat, address-keyed store of every learned weight and buffer.
#[derive(Clone, Debug, Default)]
pub struct ParamBank<F> {
    entries: BTreeMap<String, Param<F>>,
}

impl<F: Scalar> ParamBank<F> {
    pub fn new() -> Self {
        ParamBank { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, addr: impl Into<String>, tensor: Tensor<F>, trainable: bool) {
        self.entries.insert(addr.into(), Param { tensor, trainable });
    }

    pub fn get(&self, addr: &str) -> Result<&Param<F>> {
        self.entries
            .get(addr)
            .ok_or_else(|| Error::Config(format!("unknown parameter address {addr:?}")))
    }

    pub fn tensor(&self, addr: &str) -> Result<&Tensor<F>> {
        Ok(&self.get(addr)?.tensor)
    }

    pub fn tensor_mut(&mut self, addr: &str) -> Result<&mut Tensor<F>> {
        self.entries
            .get_mut(addr)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Config(format!("unknown parameter address {addr:?}")))
    }

    pub fn set(&mut self, addr: &str, tensor: Tensor<F>) -> Result<()> {
        let p = self
            .entries
            .get_mut(addr)
            .ok_or_else(|| Error::Config(format!("unknown parameter address {addr:?}")))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::Dim {
                op: "param set",
                details: format!("{addr}: {:?} vs {:?}", p.tensor.shape(), tensor.shape()),
            });
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<F>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries (weights + buffers).
    pub fn total_scalars(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    /// Total scalar count across trainable entries.
    pub fn trainable_scalars(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.tensor.numel()).sum()
    }

    pub fn cast_into<G: Scalar>(&self) -> ParamBank<G> {
        ParamBank {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (k.clone(), Param { tensor: p.tensor.cast_into::<G>(), trainable: p.trainable })
                })
                .collect(),
        }
    }
}

// ── address layout ───────────────────────────────────────────────────

fn norm_addresses(out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, width: usize) {
    out.push((format!("{prefix}.gamma"), vec![width], ParamKind::Ones));
    out.push((format!("{prefix}.beta"), vec![width], ParamKind::Zeros));
    out.push((format!("{prefix}.run_mean"), vec![width], ParamKind::BufZeros));
    out.push((format!("{prefix}.run_var"), vec![width], ParamKind::BufOnes));
}

fn proj_addresses(out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, d_m: usize) {
    for name in ["wq", "wk", "wv"] {
        out.push((format!("{prefix}.{name}"), vec![d_m, d_m], ParamKind::Weight));
    }
    for name in ["bq", "bk", "bv"] {
        out.push((format!("{prefix}.{name}"), vec![d_m], ParamKind::Zeros));
    }
}

fn ln_addresses(out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, d_m: usize) {
    out.push((format!("{prefix}.gamma"), vec![d_m], ParamKind::Ones));
    out.push((format!("{prefix}.beta"), vec![d_m], ParamKind::Zeros));
}

fn ff_addresses(out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, d_m: usize, d_ff: usize) {
    out.push((format!("{prefix}.w1"), vec![d_m, d_ff], ParamKind::Weight));
    out.push((format!("{prefix}.b1"), vec![d_ff], ParamKind::Zeros));
    out.push((format!("{prefix}.w2"), vec![d_ff, d_m], ParamKind::Weight));
    out.push((format!("{prefix}.b2"), vec![d_m], ParamKind::Zeros));
}

fn block_addresses(out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, d_m: usize, d_ff: usize) {
    proj_addresses(out, prefix, d_m);
    ln_addresses(out, &format!("{prefix}.ln1"), d_m);
    ff_addresses(out, &format!("{prefix}.ff"), d_m, d_ff);
    ln_addresses(out, &format!("{prefix}.ln2"), d_m);
}

/// Addresses of one full encoder-decoder pipeline over the given channel
/// dims. `with_out` controls the final vocab projection (late-fusion
/// sub-models share a fused projection instead).
fn pipeline_addresses(
    out: &mut Vec<(String, Vec<usize>, ParamKind)>,
    prefix: &str,
    cfg: &ModelConfig,
    dims: &[usize],
    anchors: &[usize],
    with_out: bool,
) {
    let (d_m, d_ff) = (cfg.d_m, cfg.d_ff);
    for (c, &d) in dims.iter().enumerate() {
        out.push((format!("{prefix}emb.ch{c}.w"), vec![d, d_m], ParamKind::Weight));
        out.push((format!("{prefix}emb.ch{c}.b"), vec![d_m], ParamKind::Zeros));
        if cfg.channel_embedding.batch_norm {
            norm_addresses(out, &format!("{prefix}emb.ch{c}.norm"), d_m);
        }
    }
    out.push((format!("{prefix}emb.word.w"), vec![cfg.vocab_size, d_m], ParamKind::Weight));
    out.push((format!("{prefix}emb.word.b"), vec![d_m], ParamKind::Zeros));
    if cfg.word_embedding.batch_norm {
        norm_addresses(out, &format!("{prefix}emb.word.norm"), d_m);
    }
    for l in 0..cfg.enc_layers {
        for c in 0..dims.len() {
            block_addresses(out, &format!("{prefix}enc.l{l}.ch{c}.cs"), d_m, d_ff);
            block_addresses(out, &format!("{prefix}enc.l{l}.ch{c}.me"), d_m, d_ff);
        }
    }
    for l in 0..cfg.dec_layers {
        proj_addresses(out, &format!("{prefix}dec.l{l}.sa"), d_m);
        ln_addresses(out, &format!("{prefix}dec.l{l}.sa.ln"), d_m);
        out.push((format!("{prefix}dec.l{l}.md.wq"), vec![d_m, d_m], ParamKind::Weight));
        out.push((format!("{prefix}dec.l{l}.md.bq"), vec![d_m], ParamKind::Zeros));
        for c in 0..dims.len() {
            out.push((format!("{prefix}dec.l{l}.md.ch{c}.wk"), vec![d_m, d_m], ParamKind::Weight));
            out.push((format!("{prefix}dec.l{l}.md.ch{c}.bk"), vec![d_m], ParamKind::Zeros));
            out.push((format!("{prefix}dec.l{l}.md.ch{c}.wv"), vec![d_m, d_m], ParamKind::Weight));
            out.push((format!("{prefix}dec.l{l}.md.ch{c}.bv"), vec![d_m], ParamKind::Zeros));
        }
        ln_addresses(out, &format!("{prefix}dec.l{l}.md.ln1"), d_m);
        ff_addresses(out, &format!("{prefix}dec.l{l}.md.ff"), d_m, d_ff);
        ln_addresses(out, &format!("{prefix}dec.l{l}.md.ln2"), d_m);
    }
    if with_out {
        out.push((format!("{prefix}out.w"), vec![d_m, cfg.vocab_size], ParamKind::Weight));
        out.push((format!("{prefix}out.b"), vec![cfg.vocab_size], ParamKind::Zeros));
    }
    for (c, &g) in anchors.iter().enumerate() {
        if g > 0 {
            out.push((format!("{prefix}anchor.ch{c}.w"), vec![d_m, g], ParamKind::Weight));
            out.push((format!("{prefix}anchor.ch{c}.b"), vec![g], ParamKind::Zeros));
        }
    }
}

/// The full address layout implied by a configuration: a pure function of
/// the config, in deterministic order.
pub fn address_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let mut out = Vec::new();
    match cfg.fusion {
        FusionMode::Late => {
            for (k, &d) in cfg.channel_dims.iter().enumerate() {
                pipeline_addresses(&mut out, &format!("sub{k}."), cfg, &[d], &[0], false);
            }
            let n = cfg.n_channels();
            out.push(("fuse.w".into(), vec![n * cfg.d_m, cfg.vocab_size], ParamKind::Weight));
            out.push(("fuse.b".into(), vec![cfg.vocab_size], ParamKind::Zeros));
        }
        _ => {
            let dims = cfg.graph_dims();
            pipeline_addresses(&mut out, "", cfg, &dims, &cfg.anchors(), true);
        }
    }
    out
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Build a freshly initialized parameter bank: Xavier-uniform weights (each
/// address gets its own stream derived from the seed), zero biases, unit
/// gains, neutral running stats. Deterministic for a fixed (config, seed).
pub fn build_params<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamBank<F>> {
    cfg.validate()?;
    let mut bank = ParamBank::new();
    for (addr, shape, kind) in address_layout(cfg) {
        let tensor = match kind {
            ParamKind::Weight => crate::training::xavier_init::<F>(&shape, seed ^ fnv1a(&addr))?,
            ParamKind::Zeros | ParamKind::BufZeros => Tensor::zeros(shape),
            ParamKind::Ones | ParamKind::BufOnes => Tensor::filled(shape, F::one()),
        };
        bank.insert(addr, tensor, kind.trainable());
    }
    Ok(bank)
}

// ── forward context ──────────────────────────────────────────────────

/// Per-forward-pass state: the tape, lazily registered parameter leaves, and
/// pending batch-norm running-stat updates.
pub struct FwdCtx<'a, F: Scalar> {
    pub tape: &'a mut Tape<F>,
    pub mode: NormMode,
    bank: &'a ParamBank<F>,
    leaves: BTreeMap<String, Var>,
    pub stat_updates: Vec<(String, Tensor<F>)>,
}

impl<'a, F: Scalar> FwdCtx<'a, F> {
    pub fn new(tape: &'a mut Tape<F>, bank: &'a ParamBank<F>, mode: NormMode) -> Self {
        FwdCtx { tape, mode, bank, leaves: BTreeMap::new(), stat_updates: Vec::new() }
    }

    /// Register (once) and return the tape leaf for a parameter address.
    pub fn param(&mut self, addr: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(addr) {
            return Ok(v);
        }
        let p = self.bank.get(addr)?;
        let v = self.tape.leaf(p.tensor.clone(), p.trainable)?;
        self.leaves.insert(addr.to_string(), v);
        Ok(v)
    }

    /// Addresses and leaves registered so far.
    pub fn leaves(&self) -> &BTreeMap<String, Var> {
        &self.leaves
    }

    fn proj_vars(&mut self, prefix: &str) -> Result<AttnProjVars> {
        Ok(AttnProjVars {
            wq: self.param(&format!("{prefix}.wq"))?,
            bq: self.param(&format!("{prefix}.bq"))?,
            wk: self.param(&format!("{prefix}.wk"))?,
            bk: self.param(&format!("{prefix}.bk"))?,
            wv: self.param(&format!("{prefix}.wv"))?,
            bv: self.param(&format!("{prefix}.bv"))?,
        })
    }

    fn ln_vars(&mut self, prefix: &str) -> Result<LayerNormVars> {
        Ok(LayerNormVars {
            gamma: self.param(&format!("{prefix}.gamma"))?,
            beta: self.param(&format!("{prefix}.beta"))?,
        })
    }

    fn ff_vars(&mut self, prefix: &str) -> Result<FeedForwardVars> {
        Ok(FeedForwardVars {
            w1: self.param(&format!("{prefix}.w1"))?,
            b1: self.param(&format!("{prefix}.b1"))?,
            w2: self.param(&format!("{prefix}.w2"))?,
            b2: self.param(&format!("{prefix}.b2"))?,
        })
    }

    fn block_vars(&mut self, prefix: &str) -> Result<AttnBlockVars> {
        Ok(AttnBlockVars {
            proj: self.proj_vars(prefix)?,
            ln_attn: self.ln_vars(&format!("{prefix}.ln1"))?,
            ff: self.ff_vars(&format!("{prefix}.ff"))?,
            ln_ff: self.ln_vars(&format!("{prefix}.ln2"))?,
        })
    }

    fn embedding_vars(&mut self, prefix: &str, switches: &EmbeddingSwitches) -> Result<EmbeddingVars> {
        let norm = if switches.batch_norm {
            Some(NormParamVars {
                gamma: self.param(&format!("{prefix}.norm.gamma"))?,
                beta: self.param(&format!("{prefix}.norm.beta"))?,
            })
        } else {
            None
        };
        Ok(EmbeddingVars {
            w: self.param(&format!("{prefix}.w"))?,
            b: self.param(&format!("{prefix}.b"))?,
            norm,
        })
    }
}

// ── model ────────────────────────────────────────────────────────────

/// Encoded batch: per sample, per channel encoder outputs plus anchor logits
/// for anchored channels.
pub struct EncodedBatch {
    /// `h_e[s][c]` is sample s, channel c, shape `[T_sc × d_m]`.
    pub h_e: Vec<Vec<Var>>,
    /// `anchor_logits[s][c]` is `[T_sc × G_c]` where channel c is anchored.
    pub anchor_logits: Vec<Vec<Option<Var>>>,
}

/// Logits and anchor logits of one forward pass over a batch.
pub struct BatchForward {
    /// Per-sample decoder logits `[U_s × G]` (pre-softmax).
    pub logits: Vec<Var>,
    /// Per-sample, per-channel anchor logits.
    pub anchor_logits: Vec<Vec<Option<Var>>>,
}

/// Detached encoder state for incremental decoding.
pub struct EncState<F> {
    /// Per pipeline (one for standard modes, N for late fusion), per channel.
    pipelines: Vec<Vec<Tensor<F>>>,
}

/// A configured model: config + parameters + positional table.
pub struct Model<F: Scalar> {
    config: ModelConfig,
    pub params: ParamBank<F>,
    pos: PositionalTable<F>,
}

impl<F: Scalar> Model<F> {
    /// Build with fresh Xavier-initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = build_params(&config, seed)?;
        Self::from_parts(config, params)
    }

    /// Assemble from existing parameters (checkpoint load), validating the
    /// address set and shapes against the configuration.
    pub fn from_parts(config: ModelConfig, params: ParamBank<F>) -> Result<Self> {
        config.validate()?;
        let layout = address_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: config implies {} entries, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (addr, shape, kind) in &layout {
            let p = params
                .get(addr)
                .map_err(|_| Error::Checkpoint(format!("missing parameter {addr:?}")))?;
            if p.tensor.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{addr}: shape {:?} does not match config {:?}",
                    p.tensor.shape(),
                    shape
                )));
            }
            if p.trainable != kind.trainable() {
                return Err(Error::Checkpoint(format!("{addr}: trainability flag mismatch")));
            }
        }
        let pos = PositionalTable::new(config.t_max, config.d_m)?;
        Ok(Model { config, params, pos })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Start a forward pass on the given tape.
    pub fn fwd<'a>(&'a self, tape: &'a mut Tape<F>, mode: NormMode) -> FwdCtx<'a, F> {
        FwdCtx::new(tape, &self.params, mode)
    }

    /// Apply pending batch-norm running-stat updates after a training step.
    pub fn apply_stat_updates(&mut self, updates: Vec<(String, Tensor<F>)>) -> Result<()> {
        for (addr, tensor) in updates {
            self.params.set(&addr, tensor)?;
        }
        Ok(())
    }

    fn running_of(&self, prefix: &str) -> Result<(&[F], &[F])> {
        Ok((
            self.params.tensor(&format!("{prefix}.norm.run_mean"))?.data(),
            self.params.tensor(&format!("{prefix}.norm.run_var"))?.data(),
        ))
    }

    /// Embed one padded channel block: gather real rows across the batch,
    /// project + normalize + activate, add positions, slice per sample.
    #[allow(clippy::too_many_arguments)]
    fn embed_channel_block(
        &self,
        ctx: &mut FwdCtx<F>,
        block: &crate::data::PaddedChannel<F>,
        addr_prefix: &str,
        expected_dim: usize,
    ) -> Result<Vec<Var>> {
        let d = *block.features.shape().last().unwrap();
        if d != expected_dim {
            return Err(Error::Dim {
                op: "encode",
                details: format!("channel features have width {d}, config expects {expected_dim}"),
            });
        }
        let total: usize = block.lengths.iter().sum();
        let mut flat = Vec::with_capacity(total * d);
        for (s, &len) in block.lengths.iter().enumerate() {
            let start = s * block.t_pad * d;
            flat.extend_from_slice(&block.features.data()[start..start + len * d]);
        }
        let x = ctx.tape.leaf(Tensor::new(vec![total, d], flat)?, false)?;
        let switches = self.config.channel_embedding;
        let vars = ctx.embedding_vars(addr_prefix, &switches)?;
        let running = if switches.batch_norm { Some(self.running_of(addr_prefix)?) } else { None };
        let out = embed_channel(
            ctx.tape,
            x,
            &vars,
            running,
            &switches,
            &self.pos,
            &block.lengths,
            self.config.d_m,
            ctx.mode,
        )?;
        if let Some((m, v)) = out.new_running {
            ctx.stat_updates.push((
                format!("{addr_prefix}.norm.run_mean"),
                Tensor::new(vec![m.len()], m)?,
            ));
            ctx.stat_updates.push((
                format!("{addr_prefix}.norm.run_var"),
                Tensor::new(vec![v.len()], v)?,
            ));
        }
        let mut per_sample = Vec::with_capacity(block.lengths.len());
        let mut off = 0;
        for &len in &block.lengths {
            per_sample.push(ctx.tape.slice_rows(out.out, off, len)?);
            off += len;
        }
        Ok(per_sample)
    }

    /// Run one encoder pipeline over the selected batch channels.
    fn encode_pipeline(
        &self,
        ctx: &mut FwdCtx<F>,
        batch: &Batch<F>,
        batch_channels: &[usize],
        prefix: &str,
        dims: &[usize],
        anchors: &[usize],
    ) -> Result<EncodedBatch> {
        let b = batch.len();
        let n = batch_channels.len();
        // [channel][sample] → transposed below
        let mut embedded: Vec<Vec<Var>> = Vec::with_capacity(n);
        for (c, &bc) in batch_channels.iter().enumerate() {
            embedded.push(self.embed_channel_block(
                ctx,
                &batch.channels[bc],
                &format!("{prefix}emb.ch{c}"),
                dims[c],
            )?);
        }
        let mut per_sample: Vec<Vec<Var>> =
            (0..b).map(|s| (0..n).map(|c| embedded[c][s]).collect()).collect();

        for l in 0..self.config.enc_layers {
            let cs_params: Vec<AttnBlockVars> = (0..n)
                .map(|c| ctx.block_vars(&format!("{prefix}enc.l{l}.ch{c}.cs")))
                .collect::<Result<_>>()?;
            let me_params: Vec<AttnBlockVars> = (0..n)
                .map(|c| ctx.block_vars(&format!("{prefix}enc.l{l}.ch{c}.me")))
                .collect::<Result<_>>()?;
            for s in 0..b {
                let mut cs_out = Vec::with_capacity(n);
                for c in 0..n {
                    cs_out.push(channel_self_attention_block(
                        ctx.tape,
                        per_sample[s][c],
                        &cs_params[c],
                        self.config.d_m,
                        self.config.heads,
                        None,
                    )?);
                }
                let me = multichannel_encoder_attention(
                    ctx.tape,
                    &cs_out,
                    &me_params,
                    self.config.d_m,
                    self.config.heads,
                    None,
                )?;
                per_sample[s] = me.outputs;
            }
        }

        let mut anchor_logits = Vec::with_capacity(b);
        for h_sample in per_sample.iter() {
            let mut per_channel = Vec::with_capacity(n);
            for (c, &g) in anchors.iter().enumerate() {
                if g > 0 {
                    let w = ctx.param(&format!("{prefix}anchor.ch{c}.w"))?;
                    let bv = ctx.param(&format!("{prefix}anchor.ch{c}.b"))?;
                    per_channel.push(Some(linear(ctx.tape, h_sample[c], w, bv)?));
                } else {
                    per_channel.push(None);
                }
            }
            anchor_logits.push(per_channel);
        }
        Ok(EncodedBatch { h_e: per_sample, anchor_logits })
    }

    /// Decoder layers for one sample within a pipeline; returns `h_d`.
    fn decode_layers(
        &self,
        ctx: &mut FwdCtx<F>,
        mut h: Var,
        enc_channels: &[Var],
        prefix: &str,
    ) -> Result<Var> {
        for l in 0..self.config.dec_layers {
            let sa_proj = ctx.proj_vars(&format!("{prefix}dec.l{l}.sa"))?;
            let sa_ln = ctx.ln_vars(&format!("{prefix}dec.l{l}.sa.ln"))?;
            let sa = masked_target_self_attention(
                ctx.tape,
                h,
                &sa_proj,
                &sa_ln,
                self.config.d_m,
                self.config.heads,
            )?;
            let md = McDecVars {
                wq: ctx.param(&format!("{prefix}dec.l{l}.md.wq"))?,
                bq: ctx.param(&format!("{prefix}dec.l{l}.md.bq"))?,
                kv: (0..enc_channels.len())
                    .map(|c| -> Result<KvProjVars> {
                        Ok(KvProjVars {
                            wk: ctx.param(&format!("{prefix}dec.l{l}.md.ch{c}.wk"))?,
                            bk: ctx.param(&format!("{prefix}dec.l{l}.md.ch{c}.bk"))?,
                            wv: ctx.param(&format!("{prefix}dec.l{l}.md.ch{c}.wv"))?,
                            bv: ctx.param(&format!("{prefix}dec.l{l}.md.ch{c}.bv"))?,
                        })
                    })
                    .collect::<Result<_>>()?,
                ln_attn: ctx.ln_vars(&format!("{prefix}dec.l{l}.md.ln1"))?,
                ff: ctx.ff_vars(&format!("{prefix}dec.l{l}.md.ff"))?,
                ln_ff: ctx.ln_vars(&format!("{prefix}dec.l{l}.md.ln2"))?,
            };
            let out = multichannel_decoder_attention(
                ctx.tape,
                sa.out,
                enc_channels,
                &md,
                self.config.d_m,
                self.config.heads,
                None,
            )?;
            h = out.out;
        }
        Ok(h)
    }

    /// Embed the decoder inputs of every sample in one flat pass (so word
    /// batch norm, when enabled, sees the whole batch), then slice.
    fn embed_targets(
        &self,
        ctx: &mut FwdCtx<F>,
        prefix: &str,
        ids_per_sample: &[Vec<u32>],
    ) -> Result<Vec<Var>> {
        let lens: Vec<usize> = ids_per_sample.iter().map(Vec::len).collect();
        let flat: Vec<usize> =
            ids_per_sample.iter().flat_map(|ids| ids.iter().map(|&t| t as usize)).collect();
        let switches = self.config.word_embedding;
        let addr = format!("{prefix}emb.word");
        let vars = ctx.embedding_vars(&addr, &switches)?;
        let running = if switches.batch_norm { Some(self.running_of(&addr)?) } else { None };
        let out = embed_words(
            ctx.tape,
            &flat,
            &vars,
            running,
            &switches,
            &self.pos,
            &lens,
            self.config.d_m,
            ctx.mode,
        )?;
        if let Some((m, v)) = out.new_running {
            ctx.stat_updates.push((format!("{addr}.norm.run_mean"), Tensor::new(vec![m.len()], m)?));
            ctx.stat_updates.push((format!("{addr}.norm.run_var"), Tensor::new(vec![v.len()], v)?));
        }
        let mut per_sample = Vec::with_capacity(lens.len());
        let mut off = 0;
        for &len in &lens {
            per_sample.push(ctx.tape.slice_rows(out.out, off, len)?);
            off += len;
        }
        Ok(per_sample)
    }

    /// Encode a batch (multichannel/single/early modes).
    pub fn encode_batch(&self, ctx: &mut FwdCtx<F>, batch: &Batch<F>) -> Result<EncodedBatch> {
        if self.config.fusion == FusionMode::Late {
            return Err(Error::Config("late fusion uses forward_batch".into()));
        }
        let dims = self.config.graph_dims();
        if batch.channels.len() != dims.len() {
            return Err(Error::Dim {
                op: "encode",
                details: format!("batch has {} channels, config expects {}", batch.channels.len(), dims.len()),
            });
        }
        let channels: Vec<usize> = (0..dims.len()).collect();
        self.encode_pipeline(ctx, batch, &channels, "", &dims, &self.config.anchors())
    }

    /// Decode every sample of a batch given its encoded channels; returns
    /// per-sample vocab logits.
    pub fn decode_batch(
        &self,
        ctx: &mut FwdCtx<F>,
        enc: &EncodedBatch,
        batch: &Batch<F>,
    ) -> Result<Vec<Var>> {
        let ids: Vec<Vec<u32>> = (0..batch.len()).map(|s| batch.decoder_input(s)).collect();
        let embedded = self.embed_targets(ctx, "", &ids)?;
        let w_out = ctx.param("out.w")?;
        let b_out = ctx.param("out.b")?;
        let mut logits = Vec::with_capacity(batch.len());
        for (s, &emb) in embedded.iter().enumerate() {
            let h = self.decode_layers(ctx, emb, &enc.h_e[s], "")?;
            logits.push(linear(ctx.tape, h, w_out, b_out)?);
        }
        Ok(logits)
    }

    /// Full forward over a batch, dispatching on the fusion mode.
    pub fn forward_batch(&self, ctx: &mut FwdCtx<F>, batch: &Batch<F>) -> Result<BatchForward> {
        match self.config.fusion {
            FusionMode::Late => self.forward_batch_late(ctx, batch),
            _ => {
                let enc = self.encode_batch(ctx, batch)?;
                let logits = self.decode_batch(ctx, &enc, batch)?;
                Ok(BatchForward { logits, anchor_logits: enc.anchor_logits })
            }
        }
    }

    fn forward_batch_late(&self, ctx: &mut FwdCtx<F>, batch: &Batch<F>) -> Result<BatchForward> {
        let n = self.config.n_channels();
        if batch.channels.len() != n {
            return Err(Error::Dim {
                op: "late fusion",
                details: format!("batch has {} channels, config expects {n}", batch.channels.len()),
            });
        }
        let b = batch.len();
        let ids: Vec<Vec<u32>> = (0..b).map(|s| batch.decoder_input(s)).collect();
        // h_d[k][s]: decoder states of sub-model k for sample s
        let mut h_d: Vec<Vec<Var>> = Vec::with_capacity(n);
        for k in 0..n {
            let prefix = format!("sub{k}.");
            let enc = self.encode_pipeline(
                ctx,
                batch,
                &[k],
                &prefix,
                &[self.config.channel_dims[k]],
                &[0],
            )?;
            let embedded = self.embed_targets(ctx, &prefix, &ids)?;
            let mut states = Vec::with_capacity(b);
            for (s, &emb) in embedded.iter().enumerate() {
                states.push(self.decode_layers(ctx, emb, &enc.h_e[s], &prefix)?);
            }
            h_d.push(states);
        }
        let w_fuse = ctx.param("fuse.w")?;
        let b_fuse = ctx.param("fuse.b")?;
        let mut logits = Vec::with_capacity(b);
        for s in 0..b {
            let parts: Vec<Var> = (0..n).map(|k| h_d[k][s]).collect();
            let fused = ctx.tape.concat_cols(&parts)?;
            logits.push(linear(ctx.tape, fused, w_fuse, b_fuse)?);
        }
        Ok(BatchForward { logits, anchor_logits: vec![vec![None; n]; b] })
    }

    // ── inference ────────────────────────────────────────────────────

    /// Encode one sample (as a batch of one, infer mode) and detach the
    /// encoder outputs for repeated decoding steps.
    pub fn encode_for_inference(&self, batch_of_one: &Batch<F>) -> Result<EncState<F>> {
        if batch_of_one.len() != 1 {
            return Err(Error::Input("encode_for_inference expects a batch of one".into()));
        }
        let mut pipelines = Vec::new();
        match self.config.fusion {
            FusionMode::Late => {
                for k in 0..self.config.n_channels() {
                    let mut tape = Tape::new();
                    let mut ctx = self.fwd(&mut tape, NormMode::Infer);
                    let enc = self.encode_pipeline(
                        &mut ctx,
                        batch_of_one,
                        &[k],
                        &format!("sub{k}."),
                        &[self.config.channel_dims[k]],
                        &[0],
                    )?;
                    pipelines.push(enc.h_e[0].iter().map(|&v| tape.to_tensor(v)).collect());
                }
            }
            _ => {
                let mut tape = Tape::new();
                let mut ctx = self.fwd(&mut tape, NormMode::Infer);
                let enc = self.encode_batch(&mut ctx, batch_of_one)?;
                pipelines.push(enc.h_e[0].iter().map(|&v| tape.to_tensor(v)).collect());
            }
        }
        Ok(EncState { pipelines })
    }

    /// Log-probabilities of the next token given a decoder prefix (must start
    /// with `<bos>`). Runs on a fresh tape in infer mode.
    pub fn score_step(&self, enc: &EncState<F>, prefix: &[u32]) -> Result<Vec<f64>> {
        if prefix.first() != Some(&crate::data::BOS) {
            return Err(Error::Input("decoder prefix must start with <bos>".into()));
        }
        let mut tape = Tape::new();
        let mut ctx = self.fwd(&mut tape, NormMode::Infer);
        let logits_row: Vec<f64> = match self.config.fusion {
            FusionMode::Late => {
                let n = self.config.n_channels();
                let mut last_rows = Vec::with_capacity(n);
                for (k, channels) in enc.pipelines.iter().enumerate() {
                    let prefix_addr = format!("sub{k}.");
                    let enc_vars: Vec<Var> = channels
                        .iter()
                        .map(|t| ctx.tape.leaf(t.clone(), false))
                        .collect::<Result<_>>()?;
                    let ids = vec![prefix.to_vec()];
                    let embedded = self.embed_targets(&mut ctx, &prefix_addr, &ids)?;
                    let h = self.decode_layers(&mut ctx, embedded[0], &enc_vars, &prefix_addr)?;
                    let u = ctx.tape.shape(h)[0];
                    last_rows.push(ctx.tape.slice_rows(h, u - 1, 1)?);
                }
                let fused = ctx.tape.concat_cols(&last_rows)?;
                let w = ctx.param("fuse.w")?;
                let b = ctx.param("fuse.b")?;
                let logits = linear(ctx.tape, fused, w, b)?;
                ctx.tape.data(logits).iter().map(|v| v.to_f64().unwrap()).collect()
            }
            _ => {
                let enc_vars: Vec<Var> = enc.pipelines[0]
                    .iter()
                    .map(|t| ctx.tape.leaf(t.clone(), false))
                    .collect::<Result<_>>()?;
                let ids = vec![prefix.to_vec()];
                let embedded = self.embed_targets(&mut ctx, "", &ids)?;
                let h = self.decode_layers(&mut ctx, embedded[0], &enc_vars, "")?;
                let w = ctx.param("out.w")?;
                let b = ctx.param("out.b")?;
                let logits = linear(ctx.tape, h, w, b)?;
                let u = ctx.tape.shape(logits)[0];
                let g = ctx.tape.shape(logits)[1];
                ctx.tape.data(logits)[(u - 1) * g..]
                    .iter()
                    .map(|v| v.to_f64().unwrap())
                    .collect()
            }
        };
        // log-softmax in f64 for stable, precision-independent scoring
        let max = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + logits_row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        Ok(logits_row.iter().map(|v| v - log_z).collect())
    }
}

/// Concatenate frame-synchronous channels into a single channel per sample.
/// Channels of unequal length are a fusion error rather than being resampled.
pub fn fuse_early<F: Scalar>(
    samples: &[MultiChannelSample<F>],
) -> Result<Vec<MultiChannelSample<F>>> {
    samples
        .iter()
        .map(|s| {
            let t = s.channels[0].shape()[0];
            if let Some(bad) = s.channels.iter().find(|c| c.shape()[0] != t) {
                return Err(Error::Fusion(format!(
                    "sample {}: channel lengths differ ({} vs {}); early fusion requires frame-synchronous channels",
                    s.id,
                    t,
                    bad.shape()[0]
                )));
            }
            let d_total: usize = s.channels.iter().map(|c| c.shape()[1]).sum();
            let mut data = Vec::with_capacity(t * d_total);
            for row in 0..t {
                for ch in &s.channels {
                    let d = ch.shape()[1];
                    data.extend_from_slice(&ch.data()[row * d..(row + 1) * d]);
                }
            }
            Ok(MultiChannelSample {
                id: s.id.clone(),
                channels: vec![Tensor::new(vec![t, d_total], data)?],
                anchors: vec![None],
                target: s.target.clone(),
            })
        })
        .collect()
}
