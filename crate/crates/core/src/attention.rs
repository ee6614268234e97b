//! Attention blocks: scaled dot-product attention, channel-wise self
//! attention, multi-channel encoder attention (queries of one channel over
//! the concatenated keys/values of all *other* channels), masked target self
//! attention, and multi-channel decoder attention (per-channel attention
//! averaged over channels). Every sublayer is wrapped post-norm: sublayer →
//! residual add → layer norm, as in the original transformer.
//!
//! Channels may have different lengths; concatenation happens over the time
//! axis. Attention defaults to a single head; multiple heads use the standard
//! split-columns scheme with the scaling denominator kept at √d_m of the full
//! model width.

use crate::error::{Error, Result};
use crate::tensor::{cast, Scalar, Tape, Var};

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Q/K/V projection parameters of one attention sublayer.
pub struct AttnProjVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
}

/// Position-wise feed-forward parameters: max(0, x·W1 + b1)·W2 + b2.
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Learned layer-norm gain/shift.
pub struct LayerNormVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Parameters of one attention-plus-feed-forward block (channel-wise self
/// attention or multi-channel encoder attention both have this shape).
pub struct AttnBlockVars {
    pub proj: AttnProjVars,
    pub ln_attn: LayerNormVars,
    pub ff: FeedForwardVars,
    pub ln_ff: LayerNormVars,
}

/// Key/value projections for one source channel in the decoder.
pub struct KvProjVars {
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
}

/// Multi-channel decoder attention parameters: one shared query projection,
/// per-channel key/value projections, then the shared feed-forward.
pub struct McDecVars {
    pub wq: Var,
    pub bq: Var,
    pub kv: Vec<KvProjVars>,
    pub ln_attn: LayerNormVars,
    pub ff: FeedForwardVars,
    pub ln_ff: LayerNormVars,
}

/// Attention output: the context rows plus the weight matrix of every head,
/// retrievable for inspection.
pub struct AttentionOut {
    pub context: Var,
    pub weights: Vec<Var>,
}

/// `x·W + b` with row-broadcast bias.
pub fn linear<F: Scalar>(tape: &mut Tape<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let p = tape.matmul(x, w)?;
    tape.add_row_vec(p, b)
}

/// Lower-triangular causal mask: position u attends to positions 0..=u.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for u in 0..n {
        for j in 0..=u {
            m[u * n + j] = true;
        }
    }
    m
}

/// Broadcast a per-key mask over `rows` query rows.
pub fn broadcast_key_mask(rows: usize, keys: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(rows * keys.len());
    for _ in 0..rows {
        m.extend_from_slice(keys);
    }
    m
}

/// softmax(Q·Kᵀ/√d_m)·V with optional row-major r×s mask. `d_m` is the full
/// model width regardless of the head count.
pub fn scaled_dot_attention<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&[bool]>,
    d_m: usize,
    heads: usize,
) -> Result<AttentionOut> {
    let d = *tape.shape(q).last().unwrap();
    if *tape.shape(k).last().unwrap() != d || *tape.shape(v).last().unwrap() != d {
        return Err(Error::Dim {
            op: "scaled_dot_attention",
            details: format!(
                "q/k/v widths disagree: {:?} {:?} {:?}",
                tape.shape(q),
                tape.shape(k),
                tape.shape(v)
            ),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let scale = cast::<F>(1.0 / (d_m as f64).sqrt());
    if heads == 1 {
        let scores = tape.matmul_nt(q, k)?;
        let scaled = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scaled, mask)?;
        let context = tape.matmul(weights, v)?;
        return Ok(AttentionOut { context, weights: vec![weights] });
    }
    let dh = d / heads;
    let mut contexts = Vec::with_capacity(heads);
    let mut all_weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scaled, mask)?;
        contexts.push(tape.matmul(weights, vh)?);
        all_weights.push(weights);
    }
    let context = tape.concat_cols(&contexts)?;
    Ok(AttentionOut { context, weights: all_weights })
}

/// max(0, x·W1 + b1)·W2 + b2, applied row-wise.
pub fn position_wise_ff<F: Scalar>(tape: &mut Tape<F>, x: Var, ff: &FeedForwardVars) -> Result<Var> {
    let h = linear(tape, x, ff.w1, ff.b1)?;
    let h = tape.relu(h)?;
    linear(tape, h, ff.w2, ff.b2)
}

fn attn_ff_wrap<F: Scalar>(
    tape: &mut Tape<F>,
    input: Var,
    context: Var,
    p: &AttnBlockVars,
) -> Result<Var> {
    let res = tape.add(input, context)?;
    let h = tape.layer_norm_rows(res, p.ln_attn.gamma, p.ln_attn.beta, cast(LAYER_NORM_EPS))?;
    let f = position_wise_ff(tape, h, &p.ff)?;
    let res2 = tape.add(h, f)?;
    tape.layer_norm_rows(res2, p.ln_ff.gamma, p.ln_ff.beta, cast(LAYER_NORM_EPS))
}

/// Channel-wise self attention: Q/K/V projected with channel-specific
/// weights, attention within the channel, then residual + norm, the channel's
/// feed-forward, and another residual + norm.
pub fn channel_self_attention_block<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    p: &AttnBlockVars,
    d_m: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let q = linear(tape, x, p.proj.wq, p.proj.bq)?;
    let k = linear(tape, x, p.proj.wk, p.proj.bk)?;
    let v = linear(tape, x, p.proj.wv, p.proj.bv)?;
    let rows = tape.shape(x)[0];
    let full_mask = key_mask.map(|m| broadcast_key_mask(rows, m));
    let att = scaled_dot_attention(tape, q, k, v, full_mask.as_deref(), d_m, heads)?;
    attn_ff_wrap(tape, x, att.context, p)
}

/// Multi-channel encoder attention outputs plus the pre-residual context and
/// attention weights of every channel for inspection.
pub struct McEncOut {
    pub outputs: Vec<Var>,
    pub contexts: Vec<Var>,
    pub weights: Vec<Vec<Var>>,
}

/// For each channel i, queries from channel i attend over the time-axis
/// concatenation of the keys/values of all channels j ≠ i. With a single
/// channel the block falls back to plain self-attention.
pub fn multichannel_encoder_attention<F: Scalar>(
    tape: &mut Tape<F>,
    inputs: &[Var],
    params: &[AttnBlockVars],
    d_m: usize,
    heads: usize,
    key_masks: Option<&[Vec<bool>]>,
) -> Result<McEncOut> {
    let n = inputs.len();
    if n == 0 {
        return Err(Error::Input("multi-channel encoder attention needs at least one channel".into()));
    }
    if params.len() != n {
        return Err(Error::Config(format!("{} channels but {} parameter blocks", n, params.len())));
    }
    if let Some(masks) = key_masks {
        if masks.len() != n {
            return Err(Error::Config(format!("{} channels but {} key masks", n, masks.len())));
        }
    }
    let mut qs = Vec::with_capacity(n);
    let mut ks = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    for (i, &x) in inputs.iter().enumerate() {
        qs.push(linear(tape, x, params[i].proj.wq, params[i].proj.bq)?);
        ks.push(linear(tape, x, params[i].proj.wk, params[i].proj.bk)?);
        vs.push(linear(tape, x, params[i].proj.wv, params[i].proj.bv)?);
    }
    let mut outputs = Vec::with_capacity(n);
    let mut contexts = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let others: Vec<usize> = if n == 1 { vec![0] } else { (0..n).filter(|&j| j != i).collect() };
        let k_parts: Vec<Var> = others.iter().map(|&j| ks[j]).collect();
        let v_parts: Vec<Var> = others.iter().map(|&j| vs[j]).collect();
        let k_cat = tape.concat_rows(&k_parts)?;
        let v_cat = tape.concat_rows(&v_parts)?;
        let rows = tape.shape(inputs[i])[0];
        let mask = key_masks.map(|masks| {
            let cat: Vec<bool> = others.iter().flat_map(|&j| masks[j].iter().copied()).collect();
            broadcast_key_mask(rows, &cat)
        });
        let att = scaled_dot_attention(tape, qs[i], k_cat, v_cat, mask.as_deref(), d_m, heads)?;
        outputs.push(attn_ff_wrap(tape, inputs[i], att.context, &params[i])?);
        contexts.push(att.context);
        weights.push(att.weights);
    }
    Ok(McEncOut { outputs, contexts, weights })
}

/// Masked self-attention output plus internals for inspection.
pub struct MaskedSelfOut {
    pub out: Var,
    pub context: Var,
    pub weights: Vec<Var>,
}

/// Causal self-attention over the embedded target: position u attends to
/// positions 0..=u only, then residual + layer norm.
pub fn masked_target_self_attention<F: Scalar>(
    tape: &mut Tape<F>,
    y: Var,
    proj: &AttnProjVars,
    ln: &LayerNormVars,
    d_m: usize,
    heads: usize,
) -> Result<MaskedSelfOut> {
    let q = linear(tape, y, proj.wq, proj.bq)?;
    let k = linear(tape, y, proj.wk, proj.bk)?;
    let v = linear(tape, y, proj.wv, proj.bv)?;
    let u = tape.shape(y)[0];
    let mask = causal_mask(u);
    let att = scaled_dot_attention(tape, q, k, v, Some(&mask), d_m, heads)?;
    let res = tape.add(y, att.context)?;
    let out = tape.layer_norm_rows(res, ln.gamma, ln.beta, cast(LAYER_NORM_EPS))?;
    Ok(MaskedSelfOut { out, context: att.context, weights: att.weights })
}

/// Multi-channel decoder attention output plus per-channel internals.
pub struct McDecOut {
    pub out: Var,
    pub mean_context: Var,
    pub channel_contexts: Vec<Var>,
    pub weights: Vec<Vec<Var>>,
}

/// Queries come from the masked self-attention output through one shared
/// projection; each encoded channel gets its own key/value projections and
/// its own attention; the per-channel contexts are averaged, wrapped with
/// residual + norm, and passed through the shared feed-forward.
pub fn multichannel_decoder_attention<F: Scalar>(
    tape: &mut Tape<F>,
    h_sa: Var,
    h_e: &[Var],
    p: &McDecVars,
    d_m: usize,
    heads: usize,
    key_masks: Option<&[Vec<bool>]>,
) -> Result<McDecOut> {
    let n = h_e.len();
    if n == 0 {
        return Err(Error::Input("multi-channel decoder attention needs at least one channel".into()));
    }
    if p.kv.len() != n {
        return Err(Error::Config(format!(
            "{} encoded channels but {} key/value projections",
            n,
            p.kv.len()
        )));
    }
    let q = linear(tape, h_sa, p.wq, p.bq)?;
    let rows = tape.shape(h_sa)[0];
    let mut channel_contexts = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for (i, &enc) in h_e.iter().enumerate() {
        let k = linear(tape, enc, p.kv[i].wk, p.kv[i].bk)?;
        let v = linear(tape, enc, p.kv[i].wv, p.kv[i].bv)?;
        let mask = key_masks.map(|masks| broadcast_key_mask(rows, &masks[i]));
        let att = scaled_dot_attention(tape, q, k, v, mask.as_deref(), d_m, heads)?;
        channel_contexts.push(att.context);
        weights.push(att.weights);
    }
    let mut acc = channel_contexts[0];
    for &c in &channel_contexts[1..] {
        acc = tape.add(acc, c)?;
    }
    let mean_context = tape.scale(acc, cast(1.0 / n as f64))?;
    let res = tape.add(h_sa, mean_context)?;
    let h = tape.layer_norm_rows(res, p.ln_attn.gamma, p.ln_attn.beta, cast(LAYER_NORM_EPS))?;
    let f = position_wise_ff(tape, h, &p.ff)?;
    let res2 = tape.add(h, f)?;
    let out = tape.layer_norm_rows(res2, p.ln_ff.gamma, p.ln_ff.beta, cast(LAYER_NORM_EPS))?;
    Ok(McDecOut { out, mean_context, channel_contexts, weights })
}
