//! Channel-feature and word embeddings with positional encoding.
//!
//! Raw channel features are projected by a per-channel linear layer, then
//! optionally scaled by √d_m, batch-normalized and passed through an
//! activation before sinusoidal positions are added. Word embeddings follow
//! the same pipeline but default to the bare projection: the best-performing
//! setup applies batch norm and soft-sign to the channel features only.

use crate::error::{Error, Result};
use crate::tensor::{cast, Activation, NormMode, Scalar, Tape, Tensor, Var};

/// Epsilon inside the batch-norm variance square root.
pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Momentum for batch-norm running statistics.
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
/// Default positional-table capacity.
pub const DEFAULT_T_MAX: usize = 512;

/// Per-side embedding configuration switches.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSwitches {
    /// Multiply the projection by √d_m before normalization.
    #[serde(default)]
    pub scale: bool,
    /// Column-wise batch normalization on the projection.
    #[serde(default)]
    pub batch_norm: bool,
    /// Elementwise activation after normalization.
    #[serde(default)]
    pub activation: Option<Activation>,
}

impl EmbeddingSwitches {
    /// Channel-feature default: batch norm + soft-sign, no scaling.
    pub fn channel_default() -> Self {
        EmbeddingSwitches { scale: false, batch_norm: true, activation: Some(Activation::Softsign) }
    }

    /// Word default: bare linear projection.
    pub fn word_default() -> Self {
        EmbeddingSwitches { scale: false, batch_norm: false, activation: None }
    }
}

/// Precomputed sinusoidal positional encodings, rows 0..T_max.
pub struct PositionalTable<F> {
    table: Tensor<F>,
    t_max: usize,
    d_m: usize,
}

/// One positional row: entry 2i = sin(t/10000^(2i/d_m)), 2i+1 = cos of the
/// same frequency.
pub fn pos_enc(t: usize, d_m: usize) -> Result<Vec<f64>> {
    if d_m % 2 != 0 || d_m == 0 {
        return Err(Error::Config(format!("positional encoding needs even d_m, got {d_m}")));
    }
    let mut row = vec![0.0; d_m];
    for i in 0..d_m / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d_m as f64);
        let angle = t as f64 * freq;
        row[2 * i] = angle.sin();
        row[2 * i + 1] = angle.cos();
    }
    Ok(row)
}

impl<F: Scalar> PositionalTable<F> {
    pub fn new(t_max: usize, d_m: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("positional table capacity must be positive".into()));
        }
        let mut data = Vec::with_capacity(t_max * d_m);
        for t in 0..t_max {
            data.extend(pos_enc(t, d_m)?.into_iter().map(cast::<F>));
        }
        Ok(PositionalTable { table: Tensor::new(vec![t_max, d_m], data)?, t_max, d_m })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn row(&self, t: usize) -> Result<&[F]> {
        if t >= self.t_max {
            return Err(Error::Capacity { t, t_max: self.t_max });
        }
        Ok(&self.table.data()[t * self.d_m..(t + 1) * self.d_m])
    }

    /// Positional rows for a flat stack of segments, each restarting at
    /// position 0: rows 0..len for every segment length in order.
    pub fn segment_rows(&self, segment_lens: &[usize]) -> Result<Tensor<F>> {
        let total: usize = segment_lens.iter().sum();
        let mut data = Vec::with_capacity(total * self.d_m);
        for &len in segment_lens {
            if len > self.t_max {
                return Err(Error::Capacity { t: len - 1, t_max: self.t_max });
            }
            data.extend_from_slice(&self.table.data()[..len * self.d_m]);
        }
        Tensor::new(vec![total, self.d_m], data)
    }
}

/// Tape handles for one embedding's parameters.
pub struct EmbeddingVars {
    pub w: Var,
    pub b: Var,
    /// Present when the batch-norm switch is on.
    pub norm: Option<NormParamVars>,
}

/// Learned batch-norm scale/shift handles; running stats travel separately
/// as plain slices because they are buffers, not differentiable parameters.
pub struct NormParamVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Projection output plus updated running statistics (train mode only).
pub struct EmbedOutcome<F> {
    pub out: Var,
    pub new_running: Option<(Vec<F>, Vec<F>)>,
}

/// Linear projection + optional √d_m scaling, batch norm and activation.
/// This is the pre-positional part of the embedding; permutation-equivariant
/// over rows.
pub fn project_features<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    vars: &EmbeddingVars,
    running: Option<(&[F], &[F])>,
    switches: &EmbeddingSwitches,
    d_m: usize,
    mode: NormMode,
) -> Result<EmbedOutcome<F>> {
    let proj = tape.matmul(x, vars.w)?;
    let mut h = tape.add_row_vec(proj, vars.b)?;
    if switches.scale {
        h = tape.scale(h, cast((d_m as f64).sqrt()))?;
    }
    let mut new_running = None;
    if switches.batch_norm {
        let norm = vars
            .norm
            .as_ref()
            .ok_or_else(|| Error::Config("batch_norm switch on but no norm parameters".into()))?;
        let (rm, rv) = running
            .ok_or_else(|| Error::Config("batch_norm switch on but no running stats".into()))?;
        let bn = tape.batch_norm_cols(
            h,
            norm.gamma,
            norm.beta,
            rm,
            rv,
            cast(BATCH_NORM_MOMENTUM),
            cast(BATCH_NORM_EPS),
            mode,
        )?;
        h = bn.out;
        new_running = bn.new_running;
    }
    if let Some(kind) = switches.activation {
        h = tape.activation(h, kind)?;
    }
    Ok(EmbedOutcome { out: h, new_running })
}

/// Embed a stack of channel-feature segments: project, then add positions
/// restarting at 0 for each segment.
#[allow(clippy::too_many_arguments)]
pub fn embed_channel<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    vars: &EmbeddingVars,
    running: Option<(&[F], &[F])>,
    switches: &EmbeddingSwitches,
    pos: &PositionalTable<F>,
    segment_lens: &[usize],
    d_m: usize,
    mode: NormMode,
) -> Result<EmbedOutcome<F>> {
    let projected = project_features(tape, x, vars, running, switches, d_m, mode)?;
    let pos_rows = tape.leaf(pos.segment_rows(segment_lens)?, false)?;
    let out = tape.add(projected.out, pos_rows)?;
    Ok(EmbedOutcome { out, new_running: projected.new_running })
}

/// Embed token ids: row gather from the word table + bias, optional switches
/// mirroring the channel pipeline, then positions per segment.
#[allow(clippy::too_many_arguments)]
pub fn embed_words<F: Scalar>(
    tape: &mut Tape<F>,
    ids: &[usize],
    vars: &EmbeddingVars,
    running: Option<(&[F], &[F])>,
    switches: &EmbeddingSwitches,
    pos: &PositionalTable<F>,
    segment_lens: &[usize],
    d_m: usize,
    mode: NormMode,
) -> Result<EmbedOutcome<F>> {
    let gathered = tape.gather_rows(vars.w, ids)?;
    let mut h = tape.add_row_vec(gathered, vars.b)?;
    if switches.scale {
        h = tape.scale(h, cast((d_m as f64).sqrt()))?;
    }
    let mut new_running = None;
    if switches.batch_norm {
        let norm = vars
            .norm
            .as_ref()
            .ok_or_else(|| Error::Config("batch_norm switch on but no norm parameters".into()))?;
        let (rm, rv) = running
            .ok_or_else(|| Error::Config("batch_norm switch on but no running stats".into()))?;
        let bn = tape.batch_norm_cols(
            h,
            norm.gamma,
            norm.beta,
            rm,
            rv,
            cast(BATCH_NORM_MOMENTUM),
            cast(BATCH_NORM_EPS),
            mode,
        )?;
        h = bn.out;
        new_running = bn.new_running;
    }
    if let Some(kind) = switches.activation {
        h = tape.activation(h, kind)?;
    }
    let pos_rows = tape.leaf(pos.segment_rows(segment_lens)?, false)?;
    let out = tape.add(h, pos_rows)?;
    Ok(EmbedOutcome { out, new_running })
}
