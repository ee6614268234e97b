//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation during the forward pass; [`Tape::backward`]
//! replays it in reverse, accumulating gradients into each node that requires
//! them. Tensors are immutable once recorded; the tape owns all intermediate
//! values. Every op output is checked for NaN/Inf and rejected as a hard error.

use crate::error::{Error, Result};

/// Scalar type the engine is generic over. `f64` is used for gradient checks
/// and equivalence tests, `f32` for training speed.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an `f64` constant into the active scalar type.
pub fn cast<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("scalar constant conversion")
}

/// Elementwise nonlinearity selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softsign,
    Relu,
}

/// Whether batch normalization uses batch statistics (and updates running
/// stats) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

/// A dense row-major tensor value. Shape dims are all positive and their
/// product equals the data length; all stored scalars are finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim {
                op: "tensor",
                details: format!("shape {shape:?} must be non-empty with positive dims"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim {
                op: "tensor",
                details: format!("shape {shape:?} implies {numel} scalars, got {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); numel] }
    }

    pub fn filled(shape: Vec<usize>, value: F) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    /// A single scalar stored as shape `[1]`.
    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count for rank-2 tensors, 1 for rank-1.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count: last dim.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    /// Lossy cast between scalar types (used by the checkpoint codec).
    pub fn cast_into<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Matmul { a: Var, b: Var },
    /// `A · Bᵀ` without materializing the transpose.
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// Row-wise broadcast add of a rank-1 vector.
    AddRowVec { x: Var, v: Var },
    Scale { x: Var, c: F },
    Relu { x: Var },
    Softsign { x: Var },
    SoftmaxRows { x: Var },
    LogSoftmaxRows { x: Var },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    LayerNormRows { x: Var, gamma: Var, beta: Var, mean: Vec<F>, inv_std: Vec<F> },
    /// `train` selects whether the gradient flows through the batch statistics.
    BatchNormCols { x: Var, gamma: Var, beta: Var, mean: Vec<F>, inv_std: Vec<F>, train: bool },
    NllLoss { logp: Var, targets: Vec<usize>, weights: Vec<F> },
    SoftCeLoss { logp: Var, target: Vec<F>, weights: Vec<F> },
    SumAll { x: Var },
    /// Weighted sum against a constant vector; yields a scalar.
    DotConst { x: Var, w: Vec<F> },
}

struct Node<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Result of a batch-norm op: the normalized output plus, in train mode, the
/// updated running statistics for the caller to persist.
pub struct BatchNormOut<F> {
    pub out: Var,
    pub new_running: Option<(Vec<F>, Vec<F>)>,
}

/// Records operations in topological order; one backward pass per tape.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    finished: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

// ── raw kernels ──────────────────────────────────────────────────────

/// C[m×n] = A[m×k] · B[k×n]
fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
    c
}

/// C[m×n] = A[m×k] · B[n×k]ᵀ
fn matmul_nt_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for p in 0..k {
                s = s + arow[p] * brow[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// C[m×n] = A[k×m]ᵀ · B[k×n]
fn matmul_tn_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = arow[i];
            if api == F::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + api * brow[j];
            }
        }
    }
    c
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), finished: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.clone(),
        }
    }

    /// Scalar value of a shape-[1] tensor.
    pub fn scalar_value(&self, v: Var) -> F {
        debug_assert_eq!(self.numel(v), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient of `v` if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v`, zeros when the loss did not depend on it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<F> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![F::zero(); self.nodes[v.0].data.len()],
        }
    }

    fn rows(&self, v: Var) -> usize {
        let s = &self.nodes[v.0].shape;
        if s.len() == 2 {
            s[0]
        } else {
            1
        }
    }

    fn cols(&self, v: Var) -> usize {
        *self.nodes[v.0].shape.last().unwrap()
    }

    fn require_rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::Dim { op, details: format!("expected rank-2 tensor, got shape {s:?}") });
        }
        Ok((s[0], s[1]))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool, op: Op<F>) -> Result<Var> {
        if self.finished {
            return Err(Error::Tape("cannot record on a tape after backward".into()));
        }
        let op_name = match &op {
            Op::Leaf => "leaf",
            Op::Matmul { .. } | Op::MatmulNT { .. } => "matmul",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LogSoftmaxRows { .. } => "log_softmax_rows",
            Op::BatchNormCols { .. } => "batch_norm",
            Op::LayerNormRows { .. } => "layer_norm",
            _ => "op",
        };
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { shape, data, grad: None, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Register a leaf value.
    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Result<Var> {
        self.push(t.shape, t.data, requires_grad, Op::Leaf)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── arithmetic ───────────────────────────────────────────────────

    /// `A[m×k] · B[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.require_rank2(a, "matmul")?;
        let (kb, n) = self.require_rank2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Dim {
                op: "matmul",
                details: format!("inner dims disagree: {:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data = matmul_raw(self.data(a), self.data(b), m, ka, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], data, rg, Op::Matmul { a, b })
    }

    /// `A[m×k] · B[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.require_rank2(a, "matmul")?;
        let (n, kb) = self.require_rank2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Dim {
                op: "matmul",
                details: format!("shared dims disagree: {:?} vs {:?}ᵀ", self.shape(a), self.shape(b)),
            });
        }
        let data = matmul_nt_raw(self.data(a), self.data(b), m, ka, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], data, rg, Op::MatmulNT { a, b })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim {
                op: "add",
                details: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data: Vec<F> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Add { a, b })
    }

    /// `X[r×c] + v[c]` broadcast over rows (bias addition).
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.require_rank2(x, "add_row_vec")?;
        if self.shape(v) != [c] {
            return Err(Error::Dim {
                op: "add_row_vec",
                details: format!("vector shape {:?} does not match {c} columns", self.shape(v)),
            });
        }
        let mut data = self.data(x).to_vec();
        let vd = self.data(v);
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = data[i * c + j] + vd[j];
            }
        }
        let rg = self.rg(x) || self.rg(v);
        self.push(vec![r, c], data, rg, Op::AddRowVec { x, v })
    }

    /// Multiply every entry by a constant.
    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let data: Vec<F> = self.data(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, rg, Op::Scale { x, c })
    }

    /// Elementwise softsign or relu. Relu's subgradient at 0 is 0.
    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Softsign => self.softsign(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<F> = self.data(x).iter().map(|&v| v.max(F::zero())).collect();
        let rg = self.rg(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, rg, Op::Relu { x })
    }

    /// `x / (1 + |x|)`, bounded to (−1, 1).
    pub fn softsign(&mut self, x: Var) -> Result<Var> {
        let data: Vec<F> = self.data(x).iter().map(|&v| v / (F::one() + v.abs())).collect();
        let rg = self.rg(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, rg, Op::Softsign { x })
    }

    /// Row-wise softmax with max-subtraction. `mask`, when given, is a row-major
    /// `r×c` boolean slice where `true` marks allowed entries; masked-out
    /// entries get weight exactly 0. A fully-masked row is an error.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.require_rank2(x, "softmax_rows")?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::Dim {
                    op: "softmax_rows",
                    details: format!("mask length {} does not match {r}x{c}", m.len()),
                });
            }
        }
        let xd = self.data(x);
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let allowed = |j: usize| mask.map_or(true, |m| m[i * c + j]);
            let mut max = F::neg_infinity();
            for j in 0..c {
                if allowed(j) && row[j] > max {
                    max = row[j];
                }
            }
            if max == F::neg_infinity() {
                return Err(Error::DegenerateMask { row: i });
            }
            let mut sum = F::zero();
            for j in 0..c {
                if allowed(j) {
                    let e = (row[j] - max).exp();
                    data[i * c + j] = e;
                    sum = sum + e;
                }
            }
            for j in 0..c {
                data[i * c + j] = data[i * c + j] / sum;
            }
        }
        let rg = self.rg(x);
        self.push(vec![r, c], data, rg, Op::SoftmaxRows { x })
    }

    /// Row-wise log-softmax (no masking; used by losses).
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.require_rank2(x, "log_softmax_rows")?;
        let xd = self.data(x);
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for &v in row {
                sum = sum + (v - max).exp();
            }
            let log_z = max + sum.ln();
            for j in 0..c {
                data[i * c + j] = row[j] - log_z;
            }
        }
        let rg = self.rg(x);
        self.push(vec![r, c], data, rg, Op::LogSoftmaxRows { x })
    }

    /// Stack rank-2 parts over the row (time) axis. All parts must share the
    /// feature dim; backward splits the incoming gradient by row ranges.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dim { op: "concat_rows", details: "empty part list".into() });
        }
        let (_, c) = self.require_rank2(parts[0], "concat_rows")?;
        let mut total = 0;
        for &p in parts {
            let (r, cp) = self.require_rank2(p, "concat_rows")?;
            if cp != c {
                return Err(Error::Dim {
                    op: "concat_rows",
                    details: format!("feature dim mismatch: {cp} vs {c}"),
                });
            }
            total += r;
        }
        let mut data = Vec::with_capacity(total * c);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(vec![total, c], data, rg, Op::ConcatRows { parts: parts.to_vec() })
    }

    /// Stack rank-2 parts over the feature axis (same row count).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dim { op: "concat_cols", details: "empty part list".into() });
        }
        let (r, _) = self.require_rank2(parts[0], "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (rp, cp) = self.require_rank2(p, "concat_cols")?;
            if rp != r {
                return Err(Error::Dim {
                    op: "concat_cols",
                    details: format!("row count mismatch: {rp} vs {r}"),
                });
            }
            total += cp;
        }
        let mut data = vec![F::zero(); r * total];
        let mut off = 0;
        for &p in parts {
            let cp = self.cols(p);
            let pd = self.data(p);
            for i in 0..r {
                data[i * total + off..i * total + off + cp].copy_from_slice(&pd[i * cp..(i + 1) * cp]);
            }
            off += cp;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(vec![r, total], data, rg, Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Contiguous row range `[start, start+len)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.require_rank2(x, "slice_rows")?;
        if start + len > r || len == 0 {
            return Err(Error::Dim {
                op: "slice_rows",
                details: format!("rows {start}..{} out of 0..{r}", start + len),
            });
        }
        let data = self.data(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        self.push(vec![len, c], data, rg, Op::SliceRows { x, start })
    }

    /// Contiguous column range `[start, start+len)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.require_rank2(x, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::Dim {
                op: "slice_cols",
                details: format!("cols {start}..{} out of 0..{c}", start + len),
            });
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        self.push(vec![r, len], data, rg, Op::SliceCols { x, start })
    }

    /// Row lookup: `out[i] = table[ids[i]]`. Backward scatter-adds into the
    /// gathered rows (one-hot × table equivalence).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.require_rank2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Dim { op: "gather_rows", details: "empty id list".into() });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= r) {
            return Err(Error::VocabRange { id: bad, size: r });
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            data.extend_from_slice(&td[id * c..(id + 1) * c]);
        }
        let rg = self.rg(table);
        self.push(vec![ids.len(), c], data, rg, Op::GatherRows { table, ids: ids.to_vec() })
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (r, c) = self.require_rank2(x, "layer_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dim {
                op: "layer_norm",
                details: format!(
                    "gamma {:?} / beta {:?} must be [{c}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            });
        }
        let xd = self.data(x);
        let gd = self.data(gamma).to_vec();
        let bd = self.data(beta).to_vec();
        let n = cast::<F>(c as f64);
        let mut data = vec![F::zero(); r * c];
        let mut means = vec![F::zero(); r];
        let mut inv_stds = vec![F::zero(); r];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().cloned().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv_std = F::one() / (var + eps).sqrt();
            means[i] = mean;
            inv_stds[i] = inv_std;
            for j in 0..c {
                let xhat = (row[j] - mean) * inv_std;
                data[i * c + j] = gd[j] * xhat + bd[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            vec![r, c],
            data,
            rg,
            Op::LayerNormRows { x, gamma, beta, mean: means, inv_std: inv_stds },
        )
    }

    /// Column-wise batch normalization over all rows.
    ///
    /// Train mode normalizes with the batch statistics (population variance),
    /// applies the learned scale/shift, and returns updated running stats
    /// (`new = (1−momentum)·old + momentum·batch`) for the caller to persist.
    /// Infer mode normalizes with the stored running stats row by row.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_cols(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
        momentum: F,
        eps: F,
        mode: NormMode,
    ) -> Result<BatchNormOut<F>> {
        let (r, c) = self.require_rank2(x, "batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dim {
                op: "batch_norm",
                details: format!("gamma/beta must be [{c}]"),
            });
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Dim {
                op: "batch_norm",
                details: format!("running stats must have {c} entries"),
            });
        }
        if mode == NormMode::Train && r < 2 {
            return Err(Error::BatchSize { rows: r });
        }
        let xd = self.data(x);
        let gd = self.data(gamma).to_vec();
        let bd = self.data(beta).to_vec();
        let n = cast::<F>(r as f64);

        let (mean, var): (Vec<F>, Vec<F>) = match mode {
            NormMode::Train => {
                let mut mean = vec![F::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        mean[j] = mean[j] + xd[i * c + j];
                    }
                }
                for m in mean.iter_mut() {
                    *m = *m / n;
                }
                let mut var = vec![F::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        let d = xd[i * c + j] - mean[j];
                        var[j] = var[j] + d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v = *v / n;
                }
                (mean, var)
            }
            NormMode::Infer => (running_mean.to_vec(), running_var.to_vec()),
        };

        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                let xhat = (xd[i * c + j] - mean[j]) * inv_std[j];
                data[i * c + j] = gd[j] * xhat + bd[j];
            }
        }

        let new_running = match mode {
            NormMode::Train => {
                let one_m = F::one() - momentum;
                let nm: Vec<F> = running_mean
                    .iter()
                    .zip(&mean)
                    .map(|(&o, &b)| one_m * o + momentum * b)
                    .collect();
                let nv: Vec<F> = running_var
                    .iter()
                    .zip(&var)
                    .map(|(&o, &b)| one_m * o + momentum * b)
                    .collect();
                Some((nm, nv))
            }
            NormMode::Infer => None,
        };

        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let train = mode == NormMode::Train;
        let out = self.push(
            vec![r, c],
            data,
            rg,
            Op::BatchNormCols { x, gamma, beta, mean, inv_std, train },
        )?;
        Ok(BatchNormOut { out, new_running })
    }

    /// Negative log-likelihood of hard targets under row log-probabilities,
    /// each row weighted: `−Σ_u w_u · logp[u, t_u]`.
    pub fn nll_loss(&mut self, logp: Var, targets: &[usize], weights: &[F]) -> Result<Var> {
        let (r, c) = self.require_rank2(logp, "nll_loss")?;
        if targets.len() != r || weights.len() != r {
            return Err(Error::Dim {
                op: "nll_loss",
                details: format!("{} targets / {} weights for {r} rows", targets.len(), weights.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::VocabRange { id: bad, size: c });
        }
        let ld = self.data(logp);
        let mut loss = F::zero();
        for (u, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            loss = loss - w * ld[u * c + t];
        }
        let rg = self.rg(logp);
        self.push(
            vec![1],
            vec![loss],
            rg,
            Op::NllLoss { logp, targets: targets.to_vec(), weights: weights.to_vec() },
        )
    }

    /// Cross-entropy against full target distributions:
    /// `−Σ_u w_u Σ_g target[u,g] · logp[u,g]`.
    pub fn soft_ce_loss(&mut self, logp: Var, target: &Tensor<F>, weights: &[F]) -> Result<Var> {
        let (r, c) = self.require_rank2(logp, "soft_ce_loss")?;
        if target.shape() != [r, c] || weights.len() != r {
            return Err(Error::Dim {
                op: "soft_ce_loss",
                details: format!("target {:?} / {} weights for {r}x{c}", target.shape(), weights.len()),
            });
        }
        let ld = self.data(logp);
        let td = target.data();
        let mut loss = F::zero();
        for u in 0..r {
            let mut s = F::zero();
            for g in 0..c {
                s = s + td[u * c + g] * ld[u * c + g];
            }
            loss = loss - weights[u] * s;
        }
        let rg = self.rg(logp);
        self.push(
            vec![1],
            vec![loss],
            rg,
            Op::SoftCeLoss { logp, target: td.to_vec(), weights: weights.to_vec() },
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().cloned().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::SumAll { x })
    }

    /// Weighted sum against a constant vector, as a scalar.
    pub fn dot_const(&mut self, x: Var, w: &[F]) -> Result<Var> {
        if w.len() != self.numel(x) {
            return Err(Error::Dim {
                op: "dot_const",
                details: format!("{} weights for {} entries", w.len(), self.numel(x)),
            });
        }
        let s = self.data(x).iter().zip(w).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::DotConst { x, w: w.to_vec() })
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, g: Vec<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(acc) => add_into(acc, &g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse-topological gradient accumulation from a scalar loss. The tape
    /// is consumed: a second backward (or further recording) is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.finished {
            return Err(Error::Tape("backward already run on this tape".into()));
        }
        if self.numel(loss) != 1 {
            return Err(Error::Dim {
                op: "backward",
                details: format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        self.finished = true;
        self.nodes[loss.0].grad = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            let dy = self.nodes[idx].grad.clone().unwrap();
            self.backprop_one(idx, op, &dy);
        }
        Ok(())
    }

    fn backprop_one(&mut self, idx: usize, op: Op<F>, dy: &[F]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.rows(a), self.cols(a));
                let n = self.cols(b);
                if self.rg(a) {
                    let da = matmul_nt_raw(dy, self.data(b), m, n, k);
                    self.accumulate(a, da);
                }
                if self.rg(b) {
                    let db = matmul_tn_raw(self.data(a), dy, k, m, n);
                    self.accumulate(b, db);
                }
            }
            Op::MatmulNT { a, b } => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                let (m, k) = (self.rows(a), self.cols(a));
                let n = self.rows(b);
                if self.rg(a) {
                    let da = matmul_raw(dy, self.data(b), m, n, k);
                    self.accumulate(a, da);
                }
                if self.rg(b) {
                    let db = matmul_tn_raw(dy, self.data(a), n, m, k);
                    self.accumulate(b, db);
                }
            }
            Op::Add { a, b } => {
                if self.rg(a) {
                    self.accumulate(a, dy.to_vec());
                }
                if self.rg(b) {
                    self.accumulate(b, dy.to_vec());
                }
            }
            Op::AddRowVec { x, v } => {
                let (r, c) = (self.rows(x), self.cols(x));
                if self.rg(x) {
                    self.accumulate(x, dy.to_vec());
                }
                if self.rg(v) {
                    let mut dv = vec![F::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            dv[j] = dv[j] + dy[i * c + j];
                        }
                    }
                    self.accumulate(v, dv);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<F> = dy.iter().map(|&g| g * c).collect();
                self.accumulate(x, dx);
            }
            Op::Relu { x } => {
                let dx: Vec<F> = self
                    .data(x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > F::zero() { g } else { F::zero() })
                    .collect();
                self.accumulate(x, dx);
            }
            Op::Softsign { x } => {
                // d/dx x/(1+|x|) = 1/(1+|x|)²
                let dx: Vec<F> = self
                    .data(x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| {
                        let d = F::one() + v.abs();
                        g / (d * d)
                    })
                    .collect();
                self.accumulate(x, dx);
            }
            Op::SoftmaxRows { x } => {
                // dx_i = y_i (dy_i − Σ_j dy_j y_j); masked entries have y = 0.
                let (r, c) = (self.rows(x), self.cols(x));
                let y = &self.nodes[idx].data;
                let mut dx = vec![F::zero(); r * c];
                for i in 0..r {
                    let mut dot = F::zero();
                    for j in 0..c {
                        dot = dot + dy[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = y[i * c + j] * (dy[i * c + j] - dot);
                    }
                }
                self.accumulate(x, dx);
            }
            Op::LogSoftmaxRows { x } => {
                // dx_i = dy_i − softmax_i · Σ_j dy_j
                let (r, c) = (self.rows(x), self.cols(x));
                let y = &self.nodes[idx].data;
                let mut dx = vec![F::zero(); r * c];
                for i in 0..r {
                    let mut sum = F::zero();
                    for j in 0..c {
                        sum = sum + dy[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = dy[i * c + j] - y[i * c + j].exp() * sum;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::ConcatRows { parts } => {
                let c = self.cols(parts[0]);
                let mut start = 0;
                for p in parts {
                    let r = self.rows(p);
                    if self.rg(p) {
                        let dp = dy[start * c..(start + r) * c].to_vec();
                        self.accumulate(p, dp);
                    }
                    start += r;
                }
            }
            Op::ConcatCols { parts } => {
                let r = self.rows(parts[0]);
                let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
                let mut off = 0;
                for p in parts {
                    let cp = self.cols(p);
                    if self.rg(p) {
                        let mut dp = vec![F::zero(); r * cp];
                        for i in 0..r {
                            dp[i * cp..(i + 1) * cp]
                                .copy_from_slice(&dy[i * total + off..i * total + off + cp]);
                        }
                        self.accumulate(p, dp);
                    }
                    off += cp;
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = (self.rows(x), self.cols(x));
                let len = self.nodes[idx].shape[0];
                let mut dx = vec![F::zero(); r * c];
                dx[start * c..(start + len) * c].copy_from_slice(dy);
                self.accumulate(x, dx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (self.rows(x), self.cols(x));
                let len = self.nodes[idx].shape[1];
                let mut dx = vec![F::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&dy[i * len..(i + 1) * len]);
                }
                self.accumulate(x, dx);
            }
            Op::GatherRows { table, ids } => {
                let c = self.cols(table);
                let mut dt = vec![F::zero(); self.numel(table)];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[id * c + j] = dt[id * c + j] + dy[i * c + j];
                    }
                }
                self.accumulate(table, dt);
            }
            Op::LayerNormRows { x, gamma, beta, mean, inv_std } => {
                let (r, c) = (self.rows(x), self.cols(x));
                let n = cast::<F>(c as f64);
                let xd = self.data(x).to_vec();
                let gd = self.data(gamma).to_vec();
                let mut dx = vec![F::zero(); r * c];
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for i in 0..r {
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    for j in 0..c {
                        let xhat = (xd[i * c + j] - mean[i]) * inv_std[i];
                        let d = dy[i * c + j] * gd[j];
                        sum_dxhat = sum_dxhat + d;
                        sum_dxhat_xhat = sum_dxhat_xhat + d * xhat;
                        dgamma[j] = dgamma[j] + dy[i * c + j] * xhat;
                        dbeta[j] = dbeta[j] + dy[i * c + j];
                    }
                    for j in 0..c {
                        let xhat = (xd[i * c + j] - mean[i]) * inv_std[i];
                        let d = dy[i * c + j] * gd[j];
                        dx[i * c + j] = inv_std[i] * (d - (sum_dxhat + xhat * sum_dxhat_xhat) / n);
                    }
                }
                if self.rg(x) {
                    self.accumulate(x, dx);
                }
                if self.rg(gamma) {
                    self.accumulate(gamma, dgamma);
                }
                if self.rg(beta) {
                    self.accumulate(beta, dbeta);
                }
            }
            Op::BatchNormCols { x, gamma, beta, mean, inv_std, train } => {
                let (r, c) = (self.rows(x), self.cols(x));
                let n = cast::<F>(r as f64);
                let xd = self.data(x).to_vec();
                let gd = self.data(gamma).to_vec();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let mut sum_dxhat = vec![F::zero(); c];
                let mut sum_dxhat_xhat = vec![F::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        let xhat = (xd[i * c + j] - mean[j]) * inv_std[j];
                        let d = dy[i * c + j] * gd[j];
                        sum_dxhat[j] = sum_dxhat[j] + d;
                        sum_dxhat_xhat[j] = sum_dxhat_xhat[j] + d * xhat;
                        dgamma[j] = dgamma[j] + dy[i * c + j] * xhat;
                        dbeta[j] = dbeta[j] + dy[i * c + j];
                    }
                }
                if self.rg(x) {
                    let mut dx = vec![F::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let d = dy[i * c + j] * gd[j];
                            dx[i * c + j] = if train {
                                // gradient flows through the batch statistics
                                let xhat = (xd[i * c + j] - mean[j]) * inv_std[j];
                                inv_std[j] * (d - (sum_dxhat[j] + xhat * sum_dxhat_xhat[j]) / n)
                            } else {
                                // running stats are constants
                                d * inv_std[j]
                            };
                        }
                    }
                    self.accumulate(x, dx);
                }
                if self.rg(gamma) {
                    self.accumulate(gamma, dgamma);
                }
                if self.rg(beta) {
                    self.accumulate(beta, dbeta);
                }
            }
            Op::NllLoss { logp, targets, weights } => {
                let c = self.cols(logp);
                let g = dy[0];
                let mut dl = vec![F::zero(); self.numel(logp)];
                for (u, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
                    dl[u * c + t] = -w * g;
                }
                self.accumulate(logp, dl);
            }
            Op::SoftCeLoss { logp, target, weights } => {
                let (r, c) = (self.rows(logp), self.cols(logp));
                let g = dy[0];
                let mut dl = vec![F::zero(); r * c];
                for u in 0..r {
                    for j in 0..c {
                        dl[u * c + j] = -weights[u] * target[u * c + j] * g;
                    }
                }
                self.accumulate(logp, dl);
            }
            Op::SumAll { x } => {
                let dx = vec![dy[0]; self.numel(x)];
                self.accumulate(x, dx);
            }
            Op::DotConst { x, w } => {
                let g = dy[0];
                let dx: Vec<F> = w.iter().map(|&wi| wi * g).collect();
                self.accumulate(x, dx);
            }
        }
    }
}
