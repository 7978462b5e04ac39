use std::collections::BTreeMap;

use super::kernels::{gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn, sigmoid};
use super::{Result, Tensor, TensorError};

/// Additive penalty applied to masked attention scores before exponentiation.
const MASK_PENALTY: f64 = -1e30;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Neighbourhood reduction used by [`Tape::aggregate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddRowWhere { x: Var, row: Var, mask: Vec<bool> },
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<Option<usize>> },
    OverwriteRows { x: Var, src: Var, targets: Vec<(usize, usize)> },
    PoolRows { x: Var, weights: Vec<f64> },
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    Aggregate { x: Var, neighbours: Vec<Vec<usize>>, mode: AggregateMode, argmax: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    BceWithLogits { logits: Var, labels: Vec<f64>, mask: Vec<bool>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run operation record. Nodes are appended in evaluation order, so
/// the vector itself is a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated gradients of every `requires_grad` leaf reached by a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.map.get(&var)
    }

    pub fn contains(&self, var: Var) -> bool {
        self.map.contains_key(&var)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.map.iter().map(|(v, t)| (*v, t))
    }

    pub fn remove(&mut self, var: Var) -> Option<Tensor> {
        self.map.remove(&var)
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(var) {
            [r, c] => Ok((*r, *c)),
            other => Err(invalid(op, format!("expected a 2-D tensor, got {other:?}"))),
        }
    }

    fn dims3(&self, var: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape(var) {
            [g, r, c] => Ok((*g, *r, *c)),
            other => Err(invalid(op, format!("expected a 3-D tensor, got {other:?}"))),
        }
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// Batched matrix product over the leading dimension: `[g×m×k]·[g×k×n]`,
    /// or `[g×m×k]·[g×n×k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (g, m, k) = self.dims3(a, "bmm")?;
        let (g2, b1, b2) = self.dims3(b, "bmm")?;
        let (kb, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if g != g2 || k != kb {
            return Err(mismatch("bmm", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; g * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for gi in 0..g {
                let asl = &av[gi * m * k..(gi + 1) * m * k];
                let bsl = &bv[gi * k * n..(gi + 1) * k * n];
                let osl = &mut out[gi * m * n..(gi + 1) * m * n];
                if trans_b {
                    gemm_nt(asl, bsl, m, k, n, osl);
                } else {
                    gemm_nn(asl, bsl, m, k, n, osl);
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![g, m, n], out)?, rg, Op::Bmm { a, b, trans_b }))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor {
            shape: av.shape().to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    fn check_row(&self, x: Var, row: Var, op: &'static str) -> Result<usize> {
        let cols = self.value(x).cols();
        let r = self.shape(row);
        let ok = match r {
            [c] => *c == cols,
            [1, c] => *c == cols,
            _ => false,
        };
        if !ok || self.value(x).rank() == 0 {
            return Err(mismatch(op, self.shape(x), r));
        }
        Ok(cols)
    }

    /// Adds a row vector `[c]` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.check_row(x, row, "add_row")?;
        let mut out = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for chunk in out.data.chunks_mut(cols) {
            add_into(chunk, &r);
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, rg, Op::AddRow(x, row)))
    }

    /// Adds a row vector to the rows of `x` selected by `mask`; other rows pass through.
    pub fn add_row_where(&mut self, x: Var, row: Var, mask: &[bool]) -> Result<Var> {
        let cols = self.check_row(x, row, "add_row_where")?;
        if mask.len() != self.value(x).rows() {
            return Err(mismatch("add_row_where", self.shape(x), &[mask.len()]));
        }
        let mut out = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for (chunk, &m) in out.data.chunks_mut(cols).zip(mask) {
            if m {
                add_into(chunk, &r);
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(
            out,
            rg,
            Op::AddRowWhere {
                x,
                row,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Scale(x, factor)))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = gelu(*v));
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Gelu(x)))
    }

    /// Softmax along the last dimension restricted to entries where `mask` is
    /// true. Masked entries receive an additive `-1e30` before exponentiation and
    /// are then set to exactly zero.
    pub fn softmax_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let input = self.value(x);
        if mask.len() != input.numel() {
            return Err(mismatch("softmax_masked", input.shape(), &[mask.len()]));
        }
        let cols = input.cols();
        let mut out = input.clone();
        for (r, (row, mrow)) in out
            .data
            .chunks_mut(cols)
            .zip(mask.chunks(cols))
            .enumerate()
        {
            if !mrow.iter().any(|&m| m) {
                return Err(TensorError::DegenerateRow { row: r });
            }
            for (v, &m) in row.iter_mut().zip(mrow) {
                if !m {
                    *v += MASK_PENALTY;
                }
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for (v, &m) in row.iter_mut().zip(mrow) {
                *v = if m { *v / total } else { 0.0 };
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Softmax(x)))
    }

    /// Per-row standardisation followed by the affine `gain`, `bias` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(invalid("layer_norm", "eps must be positive"));
        }
        let d = self.check_row(x, gain, "layer_norm")?;
        self.check_row(x, bias, "layer_norm")?;
        let input = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = input.rows();
        let mut out = input.clone();
        let mut xhat = vec![0.0; input.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &input.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out.data[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            rg,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_rows")?;
        if start + len > rows {
            return Err(invalid(
                "slice_rows",
                format!("rows {start}..{} out of range for {rows}", start + len),
            ));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![len, cols], data)?,
            rg,
            Op::SliceRows { x, start },
        ))
    }

    /// Builds a 2-D tensor whose row `r` is `x[index[r]]`, or zeros for `None`.
    /// Rows of `x` may be selected more than once.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "gather_rows")?;
        let mut data = vec![0.0; index.len() * cols];
        for (r, idx) in index.iter().enumerate() {
            if let Some(i) = *idx {
                if i >= rows {
                    return Err(invalid("gather_rows", format!("row {i} out of range")));
                }
                data[r * cols..(r + 1) * cols].copy_from_slice(self.value(x).row(i));
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![index.len(), cols], data)?,
            rg,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Copy of `x` with row `t` replaced by `src[s]` for each `(t, s)` in
    /// `targets`. Target rows must be distinct.
    pub fn overwrite_rows(&mut self, x: Var, src: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "overwrite_rows")?;
        let (src_rows, src_cols) = self.dims2(src, "overwrite_rows")?;
        if cols != src_cols {
            return Err(mismatch("overwrite_rows", self.shape(x), self.shape(src)));
        }
        let mut seen = vec![false; rows];
        let mut out = self.value(x).clone();
        for &(t, s) in targets {
            if t >= rows || s >= src_rows {
                return Err(invalid("overwrite_rows", format!("target ({t}, {s}) out of range")));
            }
            if std::mem::replace(&mut seen[t], true) {
                return Err(invalid("overwrite_rows", format!("row {t} targeted twice")));
            }
            out.data[t * cols..(t + 1) * cols].copy_from_slice(self.value(src).row(s));
        }
        let rg = self.rg(&[x, src]);
        Ok(self.push(
            out,
            rg,
            Op::OverwriteRows {
                x,
                src,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Weighted row pooling over equal-length groups: with `x` of shape
    /// `[groups·len × d]`, output row `g` is `Σ_l weights[g·len+l] · x[g·len+l]`.
    pub fn pool_rows(&mut self, x: Var, groups: usize, weights: &[f64]) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "pool_rows")?;
        if groups == 0 || rows % groups != 0 || weights.len() != rows {
            return Err(mismatch("pool_rows", self.shape(x), &[groups, weights.len()]));
        }
        let len = rows / groups;
        let mut out = vec![0.0; groups * cols];
        let xv = self.value(x).data();
        for g in 0..groups {
            let orow = &mut out[g * cols..(g + 1) * cols];
            for l in 0..len {
                let r = g * len + l;
                let w = weights[r];
                if w != 0.0 {
                    for (o, v) in orow.iter_mut().zip(&xv[r * cols..(r + 1) * cols]) {
                        *o += w * v;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![groups, cols], out)?,
            rg,
            Op::PoolRows {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Mean over the rows of each group where `mask` is true.
    pub fn masked_mean_rows(&mut self, x: Var, groups: usize, mask: &[bool]) -> Result<Var> {
        let weights = group_weights(mask, groups, true)?;
        self.pool_rows(x, groups, &weights)
    }

    /// Sum over the rows of each group where `mask` is true.
    pub fn masked_sum_rows(&mut self, x: Var, groups: usize, mask: &[bool]) -> Result<Var> {
        let weights = group_weights(mask, groups, false)?;
        self.pool_rows(x, groups, &weights)
    }

    /// `[batch·seq × heads·dh]` → `[batch·heads × seq × dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x, "split_heads")?;
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(mismatch("split_heads", self.shape(x), &[batch, seq, heads]));
        }
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for l in 0..seq {
                    let from = (b * seq + l) * d + h * dh;
                    let to = ((b * heads + h) * seq + l) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![batch * heads, seq, dh], out)?,
            rg,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let (g, seq, dh) = self.dims3(x, "merge_heads")?;
        if g != batch * heads {
            return Err(mismatch("merge_heads", self.shape(x), &[batch, heads]));
        }
        let d = heads * dh;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for l in 0..seq {
                    let from = ((b * heads + h) * seq + l) * dh;
                    let to = (b * seq + l) * d + h * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![batch * seq, d], out)?,
            rg,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Row `i` of the output reduces the rows `neighbours[i]` of `x` with `mode`.
    /// An empty neighbourhood yields a zero row.
    pub fn aggregate(
        &mut self,
        x: Var,
        neighbours: &[Vec<usize>],
        mode: AggregateMode,
    ) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "aggregate")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; neighbours.len() * cols];
        let mut argmax = Vec::new();
        if mode == AggregateMode::Max {
            argmax = vec![usize::MAX; neighbours.len() * cols];
        }
        for (i, nb) in neighbours.iter().enumerate() {
            if let Some(&bad) = nb.iter().find(|&&j| j >= rows) {
                return Err(invalid("aggregate", format!("neighbour {bad} out of range")));
            }
            let orow = &mut out[i * cols..(i + 1) * cols];
            match mode {
                AggregateMode::Sum | AggregateMode::Mean => {
                    for &j in nb {
                        add_into(orow, &xv[j * cols..(j + 1) * cols]);
                    }
                    if mode == AggregateMode::Mean && !nb.is_empty() {
                        let inv = 1.0 / nb.len() as f64;
                        orow.iter_mut().for_each(|v| *v *= inv);
                    }
                }
                AggregateMode::Max => {
                    if nb.is_empty() {
                        continue;
                    }
                    for c in 0..cols {
                        let mut best = nb[0];
                        for &j in &nb[1..] {
                            if xv[j * cols + c] > xv[best * cols + c] {
                                best = j;
                            }
                        }
                        orow[c] = xv[best * cols + c];
                        argmax[i * cols + c] = best;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![neighbours.len(), cols], out)?,
            rg,
            Op::Aggregate {
                x,
                neighbours: neighbours.to_vec(),
                mode,
                argmax,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let s = self.value(x).sum() / n as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Mean(x)))
    }

    /// Mean binary cross-entropy over entries where `mask` is true, evaluated
    /// as `max(x,0) − x·y + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64], mask: &[bool]) -> Result<Var> {
        let n = self.value(logits).numel();
        if labels.len() != n || mask.len() != n {
            return Err(mismatch(
                "bce_with_logits",
                self.shape(logits),
                &[labels.len(), mask.len()],
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(invalid("bce_with_logits", "every entry is masked"));
        }
        let mut total = 0.0;
        for ((&x, &y), &m) in self.value(logits).data().iter().zip(labels).zip(mask) {
            if m {
                total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            rg,
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf with
    /// `requires_grad`; the tape itself is not modified, so repeated calls give
    /// identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                out.map.insert(
                    Var(idx),
                    Tensor::new(node.value.shape().to_vec(), g)?,
                );
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Lazily allocate the gradient buffer of `v` if it participates.
        let slot = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Option<usize> {
            if !self.nodes[v.0].requires_grad {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.numel()]);
            }
            Some(v.0)
        };
        macro_rules! buf {
            ($v:expr) => {
                match slot($v, grads) {
                    Some(i) => grads[i].as_mut().unwrap(),
                    None => return,
                }
            };
        }
        macro_rules! each {
            ($v:expr, $body:expr) => {
                if let Some(i) = slot($v, grads) {
                    let f: &dyn Fn(&mut Vec<f64>) = &$body;
                    f(grads[i].as_mut().unwrap());
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if let Some(i) = slot(*a, grads) {
                    gemm_nt(g, bv.data(), m, n, k, grads[i].as_mut().unwrap());
                }
                if let Some(i) = slot(*b, grads) {
                    gemm_tn(av.data(), g, m, k, n, grads[i].as_mut().unwrap());
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (gs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                if let Some(i) = slot(*a, grads) {
                    let ga = grads[i].as_mut().unwrap();
                    for gi in 0..gs {
                        let gsl = &g[gi * m * n..(gi + 1) * m * n];
                        let bsl = &bv.data()[gi * k * n..(gi + 1) * k * n];
                        let out = &mut ga[gi * m * k..(gi + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gsl, bsl, m, n, k, out);
                        } else {
                            gemm_nt(gsl, bsl, m, n, k, out);
                        }
                    }
                }
                if let Some(i) = slot(*b, grads) {
                    let gb = grads[i].as_mut().unwrap();
                    for gi in 0..gs {
                        let gsl = &g[gi * m * n..(gi + 1) * m * n];
                        let asl = &av.data()[gi * m * k..(gi + 1) * m * k];
                        let out = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gsl, asl, m, n, k, out);
                        } else {
                            gemm_tn(asl, gsl, m, k, n, out);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                each!(*a, |buf| add_into(buf, g));
                each!(*b, |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                each!(*a, |buf| add_into(buf, g));
                each!(*b, |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                each!(*a, |buf| {
                    for ((d, s), y) in buf.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                });
                each!(*b, |buf| {
                    for ((d, s), x) in buf.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                });
            }
            Op::AddRow(x, row) => {
                let cols = node.value.cols();
                each!(*x, |buf| add_into(buf, g));
                each!(*row, |buf| {
                    for chunk in g.chunks(cols) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::AddRowWhere { x, row, mask } => {
                let cols = node.value.cols();
                each!(*x, |buf| add_into(buf, g));
                each!(*row, |buf| {
                    for (chunk, &m) in g.chunks(cols).zip(mask) {
                        if m {
                            add_into(buf, chunk);
                        }
                    }
                });
            }
            Op::Scale(x, f) => {
                let buf = buf!(*x);
                for (d, s) in buf.iter_mut().zip(g) {
                    *d += s * f;
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let buf = buf!(*x);
                for ((d, s), v) in buf.iter_mut().zip(g).zip(xv) {
                    *d += s * gelu_grad(*v);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let buf = buf!(*x);
                for ((drow, grow), yrow) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gv = self.value(*gain).data();
                each!(*gain, |buf| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            buf[j] += grow[j] * hrow[j];
                        }
                    }
                });
                each!(*bias, |buf| {
                    for grow in g.chunks(d) {
                        add_into(buf, grow);
                    }
                });
                each!(*x, |buf| {
                    let mut dxhat = vec![0.0; d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = &mut buf[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    each!(p, |buf| add_into(buf, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.cols();
                let buf = buf!(*x);
                add_into(&mut buf[start * cols..start * cols + g.len()], g);
            }
            Op::GatherRows { x, index } => {
                let cols = node.value.cols();
                let buf = buf!(*x);
                for (r, idx) in index.iter().enumerate() {
                    if let Some(i) = *idx {
                        add_into(&mut buf[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::OverwriteRows { x, src, targets } => {
                let cols = node.value.cols();
                each!(*x, |buf| {
                    let mut masked = g.to_vec();
                    for &(t, _) in targets {
                        masked[t * cols..(t + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
                    }
                    add_into(buf, &masked);
                });
                each!(*src, |buf| {
                    for &(t, s) in targets {
                        add_into(&mut buf[s * cols..(s + 1) * cols], &g[t * cols..(t + 1) * cols]);
                    }
                });
            }
            Op::PoolRows { x, weights } => {
                let cols = node.value.cols();
                let groups = node.value.shape()[0];
                let len = weights.len() / groups;
                let buf = buf!(*x);
                for (r, &w) in weights.iter().enumerate() {
                    if w != 0.0 {
                        let grow = &g[(r / len) * cols..(r / len + 1) * cols];
                        for (d, s) in buf[r * cols..(r + 1) * cols].iter_mut().zip(grow) {
                            *d += w * s;
                        }
                    }
                }
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let d = self.value(*x).cols();
                let dh = d / heads;
                let buf = buf!(*x);
                for b in 0..*batch {
                    for h in 0..*heads {
                        for l in 0..*seq {
                            let to = (b * seq + l) * d + h * dh;
                            let from = ((b * heads + h) * seq + l) * dh;
                            add_into(&mut buf[to..to + dh], &g[from..from + dh]);
                        }
                    }
                }
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let d = node.value.cols();
                let dh = d / heads;
                let buf = buf!(*x);
                for b in 0..*batch {
                    for h in 0..*heads {
                        for l in 0..*seq {
                            let to = ((b * heads + h) * seq + l) * dh;
                            let from = (b * seq + l) * d + h * dh;
                            add_into(&mut buf[to..to + dh], &g[from..from + dh]);
                        }
                    }
                }
            }
            Op::Aggregate {
                x,
                neighbours,
                mode,
                argmax,
            } => {
                let cols = node.value.cols();
                let buf = buf!(*x);
                for (i, nb) in neighbours.iter().enumerate() {
                    let grow = &g[i * cols..(i + 1) * cols];
                    match mode {
                        AggregateMode::Sum => {
                            for &j in nb {
                                add_into(&mut buf[j * cols..(j + 1) * cols], grow);
                            }
                        }
                        AggregateMode::Mean => {
                            let inv = 1.0 / nb.len().max(1) as f64;
                            for &j in nb {
                                for (d, s) in buf[j * cols..(j + 1) * cols].iter_mut().zip(grow) {
                                    *d += s * inv;
                                }
                            }
                        }
                        AggregateMode::Max => {
                            if nb.is_empty() {
                                continue;
                            }
                            for c in 0..cols {
                                buf[argmax[i * cols + c] * cols + c] += grow[c];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let buf = buf!(*x);
                add_into(buf, g);
            }
            Op::Sum(x) => {
                let buf = buf!(*x);
                buf.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let buf = buf!(*x);
                let s = g[0] / buf.len() as f64;
                buf.iter_mut().for_each(|d| *d += s);
            }
            Op::BceWithLogits {
                logits,
                labels,
                mask,
                count,
            } => {
                let xv = self.value(*logits).data();
                let buf = buf!(*logits);
                let s = g[0] / *count as f64;
                for (i, d) in buf.iter_mut().enumerate() {
                    if mask[i] {
                        *d += s * (sigmoid(xv[i]) - labels[i]);
                    }
                }
            }
        }
    }
}

fn group_weights(mask: &[bool], groups: usize, mean: bool) -> Result<Vec<f64>> {
    if groups == 0 || !mask.len().is_multiple_of(groups) {
        return Err(invalid("masked pooling", "mask length is not a multiple of groups"));
    }
    let len = mask.len() / groups;
    let mut weights = vec![0.0; mask.len()];
    for g in 0..groups {
        let m = &mask[g * len..(g + 1) * len];
        let count = m.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(invalid("masked pooling", format!("group {g} has no selected rows")));
        }
        let w = if mean { 1.0 / count as f64 } else { 1.0 };
        for (l, &b) in m.iter().enumerate() {
            if b {
                weights[g * len + l] = w;
            }
        }
    }
    Ok(weights)
}
