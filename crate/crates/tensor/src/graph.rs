//! Eager op tape with reverse-mode differentiation.
//!
//! Every op method validates input shapes, runs the forward computation
//! immediately and appends a node recording the inputs backward needs.
//! Nodes are append-only, so creation order is a topological order and
//! the backward sweep is a single reverse pass.

use crate::{fmt_shape, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef(usize);

impl NodeRef {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// A[m,k] @ B[k,n]
    Matmul { m: usize, k: usize, n: usize },
    /// A[r,c] -> A^T[c,r]
    Transpose { rows: usize, cols: usize },
    Add,
    Mul,
    Scale(f64),
    /// x[n,d] + b[d] per row
    AddBias { rows: usize, cols: usize },
    /// x[n,d] * s[d] per row
    RowMul { rows: usize, cols: usize },
    Tanh,
    /// softmax over the last axis
    SoftmaxLast { last: usize },
    /// layer norm over the last axis, no affine
    LayerNormLast { last: usize, inv_std: Vec<f64> },
    MeanAll,
    SumAll,
    /// [..., n] -> [...], mean over the last axis
    MeanLast { last: usize },
    /// mean((a-b)^2) over all entries
    Mse,
    Reshape,
    /// stack 2D blocks [m_i, d] along rows
    ConcatRows { row_counts: Vec<usize>, cols: usize },
    /// rows r0..r1 of a 2D tensor
    SliceRows { r0: usize, r1: usize, cols: usize },
    /// stack 2D blocks [m, d_i] along columns
    ConcatCols { rows: usize, col_counts: Vec<usize> },
    /// columns c0..c1 of a 2D tensor
    SliceCols { c0: usize, c1: usize, rows: usize, cols: usize },
    /// rows of a [v,d] table selected by constant indices
    GatherRows { indices: Vec<usize>, cols: usize },
    /// [f,h,w,c] -> [f,h/k,w/k,c] average pooling
    AvgPoolGrid { f: usize, h: usize, w: usize, c: usize, k: usize },
    /// [h,w,c] -> [(h/k)*(w/k), k*k*c] non-overlapping patches
    ExtractPatches { h: usize, w: usize, c: usize, k: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::RowMul { .. } => "row_mul",
            Op::Tanh => "tanh",
            Op::SoftmaxLast { .. } => "softmax",
            Op::LayerNormLast { .. } => "layer_norm",
            Op::MeanAll => "mean_all",
            Op::SumAll => "sum_all",
            Op::MeanLast { .. } => "mean_last",
            Op::Mse => "mse",
            Op::Reshape => "reshape",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::AvgPoolGrid { .. } => "avg_pool_grid",
            Op::ExtractPatches { .. } => "extract_patches",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Eager computation tape. See module docs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // ikj loop order keeps the inner loop contiguous in b and out.
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape_of(&self, n: NodeRef) -> &[usize] {
        &self.nodes[n.0].shape
    }

    pub fn value(&self, n: NodeRef) -> &[f64] {
        &self.nodes[n.0].value
    }

    pub fn value_tensor(&self, n: NodeRef) -> Tensor {
        Tensor::new(&self.nodes[n.0].shape, self.nodes[n.0].value.clone())
            .expect("node values are finite by construction")
    }

    /// Gradient accumulated at `n` by previous backward calls.
    pub fn grad(&self, n: NodeRef) -> Option<&[f64]> {
        self.nodes[n.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ── node construction ────────────────────────────────────────────

    /// Binds a tensor value as a graph input, keeping its grad flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeRef {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            grad: None,
            requires_grad: t.requires_grad(),
        });
        NodeRef(id)
    }

    /// A non-differentiated input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<NodeRef> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeRef {
        self.leaf(&Tensor::scalar(v))
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        value: Vec<f64>,
    ) -> Result<NodeRef> {
        let id = self.nodes.len();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            grad: None,
            requires_grad,
        });
        Ok(NodeRef(id))
    }

    fn mismatch(&self, op: &'static str, expected: String, actual: String) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            node: self.nodes.len(),
            expected,
            actual,
        }
    }

    fn want_rank(&self, op: &'static str, n: NodeRef, rank: usize) -> Result<()> {
        let s = &self.nodes[n.0].shape;
        if s.len() != rank {
            return Err(self.mismatch(op, format!("rank-{rank}"), fmt_shape(s)));
        }
        Ok(())
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.want_rank("matmul", a, 2)?;
        self.want_rank("matmul", b, 2)?;
        let (m, ka) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        let (kb, n) = (self.nodes[b.0].shape[0], self.nodes[b.0].shape[1]);
        if ka != kb {
            return Err(self.mismatch(
                "matmul",
                format!("[{m}x{ka}] @ [{ka}xN]"),
                format!("[{m}x{ka}] @ {}", fmt_shape(&self.nodes[b.0].shape)),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.nodes[a.0].value, &self.nodes[b.0].value, m, ka, n, &mut out);
        self.push(Op::Matmul { m, k: ka, n }, vec![a.0, b.0], vec![m, n], out)
    }

    pub fn transpose(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.want_rank("transpose", a, 2)?;
        let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push(Op::Transpose { rows: r, cols: c }, vec![a.0], vec![c, r], out)
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch(
                "add",
                fmt_shape(&self.nodes[a.0].shape),
                fmt_shape(&self.nodes[b.0].shape),
            ));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Add, vec![a.0, b.0], shape, out)
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch(
                "mul",
                fmt_shape(&self.nodes[a.0].shape),
                fmt_shape(&self.nodes[b.0].shape),
            ));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Mul, vec![a.0, b.0], shape, out)
    }

    pub fn scale(&mut self, a: NodeRef, c: f64) -> Result<NodeRef> {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Scale(c), vec![a.0], shape, out)
    }

    /// x[n,d] + b[d], broadcast over rows.
    pub fn add_bias(&mut self, x: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.want_rank("add_bias", x, 2)?;
        self.want_rank("add_bias", b, 1)?;
        let (rows, cols) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        if self.nodes[b.0].shape[0] != cols {
            return Err(self.mismatch(
                "add_bias",
                format!("[{cols}]"),
                fmt_shape(&self.nodes[b.0].shape),
            ));
        }
        let mut out = self.nodes[x.0].value.clone();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += self.nodes[b.0].value[c];
            }
        }
        self.push(Op::AddBias { rows, cols }, vec![x.0, b.0], vec![rows, cols], out)
    }

    /// x[n,d] * s[d], broadcast over rows.
    pub fn row_mul(&mut self, x: NodeRef, s: NodeRef) -> Result<NodeRef> {
        self.want_rank("row_mul", x, 2)?;
        self.want_rank("row_mul", s, 1)?;
        let (rows, cols) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        if self.nodes[s.0].shape[0] != cols {
            return Err(self.mismatch(
                "row_mul",
                format!("[{cols}]"),
                fmt_shape(&self.nodes[s.0].shape),
            ));
        }
        let mut out = self.nodes[x.0].value.clone();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] *= self.nodes[s.0].value[c];
            }
        }
        self.push(Op::RowMul { rows, cols }, vec![x.0, s.0], vec![rows, cols], out)
    }

    pub fn tanh(&mut self, a: NodeRef) -> Result<NodeRef> {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Tanh, vec![a.0], shape, out)
    }

    /// Softmax over the last axis. Each last-axis slice sums to 1.
    pub fn softmax_last(&mut self, a: NodeRef) -> Result<NodeRef> {
        let shape = self.nodes[a.0].shape.clone();
        let last = *shape.last().ok_or_else(|| {
            self.mismatch("softmax", "rank >= 1".into(), fmt_shape(&shape))
        })?;
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; v.len()];
        for (row_in, row_out) in v.chunks_exact(last).zip(out.chunks_exact_mut(last)) {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        self.push(Op::SoftmaxLast { last }, vec![a.0], shape, out)
    }

    /// Layer norm over the last axis with `eps`-stabilized denominator and
    /// no affine part. A zero-variance slice maps to zeros.
    pub fn layer_norm(&mut self, a: NodeRef, eps: f64) -> Result<NodeRef> {
        let shape = self.nodes[a.0].shape.clone();
        let last = *shape.last().ok_or_else(|| {
            self.mismatch("layer_norm", "rank >= 1".into(), fmt_shape(&shape))
        })?;
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; v.len()];
        let mut inv_std = Vec::with_capacity(v.len() / last);
        for (row_in, row_out) in v.chunks_exact(last).zip(out.chunks_exact_mut(last)) {
            let mean = row_in.iter().sum::<f64>() / last as f64;
            let var = row_in.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / last as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - mean) * is;
            }
        }
        self.push(Op::LayerNormLast { last, inv_std }, vec![a.0], shape, out)
    }

    pub fn mean_all(&mut self, a: NodeRef) -> Result<NodeRef> {
        let v = &self.nodes[a.0].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Op::MeanAll, vec![a.0], vec![1], vec![m])
    }

    pub fn sum_all(&mut self, a: NodeRef) -> Result<NodeRef> {
        let s = self.nodes[a.0].value.iter().sum::<f64>();
        self.push(Op::SumAll, vec![a.0], vec![1], vec![s])
    }

    /// Mean over the last axis, dropping it: [..., n] -> [...].
    pub fn mean_last(&mut self, a: NodeRef) -> Result<NodeRef> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() < 2 {
            return Err(self.mismatch("mean_last", "rank >= 2".into(), fmt_shape(&shape)));
        }
        let last = *shape.last().unwrap();
        let v = &self.nodes[a.0].value;
        let out: Vec<f64> = v
            .chunks_exact(last)
            .map(|row| row.iter().sum::<f64>() / last as f64)
            .collect();
        let out_shape = shape[..shape.len() - 1].to_vec();
        self.push(Op::MeanLast { last }, vec![a.0], out_shape, out)
    }

    /// mean((a - b)^2) over all entries, as a scalar node.
    pub fn mse(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch(
                "mse",
                fmt_shape(&self.nodes[a.0].shape),
                fmt_shape(&self.nodes[b.0].shape),
            ));
        }
        let n = self.nodes[a.0].value.len() as f64;
        let s: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Op::Mse, vec![a.0, b.0], vec![1], vec![s / n])
    }

    pub fn reshape(&mut self, a: NodeRef, shape: &[usize]) -> Result<NodeRef> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].value.len() {
            return Err(self.mismatch(
                "reshape",
                fmt_shape(&self.nodes[a.0].shape),
                fmt_shape(shape),
            ));
        }
        let out = self.nodes[a.0].value.clone();
        self.push(Op::Reshape, vec![a.0], shape.to_vec(), out)
    }

    pub fn concat_rows(&mut self, parts: &[NodeRef]) -> Result<NodeRef> {
        if parts.is_empty() {
            return Err(self.mismatch("concat_rows", ">= 1 part".into(), "0 parts".into()));
        }
        for &p in parts {
            self.want_rank("concat_rows", p, 2)?;
        }
        let cols = self.nodes[parts[0].0].shape[1];
        let mut row_counts = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for &p in parts {
            if self.nodes[p.0].shape[1] != cols {
                return Err(self.mismatch(
                    "concat_rows",
                    format!("[*x{cols}]"),
                    fmt_shape(&self.nodes[p.0].shape),
                ));
            }
            row_counts.push(self.nodes[p.0].shape[0]);
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let rows: usize = row_counts.iter().sum();
        let inputs = parts.iter().map(|p| p.0).collect();
        self.push(Op::ConcatRows { row_counts, cols }, inputs, vec![rows, cols], out)
    }

    pub fn slice_rows(&mut self, a: NodeRef, r0: usize, r1: usize) -> Result<NodeRef> {
        self.want_rank("slice_rows", a, 2)?;
        let (rows, cols) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        if r0 >= r1 || r1 > rows {
            return Err(self.mismatch(
                "slice_rows",
                format!("0 <= r0 < r1 <= {rows}"),
                format!("{r0}..{r1}"),
            ));
        }
        let out = self.nodes[a.0].value[r0 * cols..r1 * cols].to_vec();
        self.push(Op::SliceRows { r0, r1, cols }, vec![a.0], vec![r1 - r0, cols], out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeRef]) -> Result<NodeRef> {
        if parts.is_empty() {
            return Err(self.mismatch("concat_cols", ">= 1 part".into(), "0 parts".into()));
        }
        for &p in parts {
            self.want_rank("concat_cols", p, 2)?;
        }
        let rows = self.nodes[parts[0].0].shape[0];
        let mut col_counts = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.nodes[p.0].shape[0] != rows {
                return Err(self.mismatch(
                    "concat_cols",
                    format!("[{rows}x*]"),
                    fmt_shape(&self.nodes[p.0].shape),
                ));
            }
            col_counts.push(self.nodes[p.0].shape[1]);
        }
        let cols: usize = col_counts.iter().sum();
        let mut out = vec![0.0; rows * cols];
        let mut c_off = 0;
        for &p in parts {
            let pc = self.nodes[p.0].shape[1];
            for r in 0..rows {
                out[r * cols + c_off..r * cols + c_off + pc]
                    .copy_from_slice(&self.nodes[p.0].value[r * pc..(r + 1) * pc]);
            }
            c_off += pc;
        }
        let inputs = parts.iter().map(|p| p.0).collect();
        self.push(Op::ConcatCols { rows, col_counts }, inputs, vec![rows, cols], out)
    }

    pub fn slice_cols(&mut self, a: NodeRef, c0: usize, c1: usize) -> Result<NodeRef> {
        self.want_rank("slice_cols", a, 2)?;
        let (rows, cols) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        if c0 >= c1 || c1 > cols {
            return Err(self.mismatch(
                "slice_cols",
                format!("0 <= c0 < c1 <= {cols}"),
                format!("{c0}..{c1}"),
            ));
        }
        let w = c1 - c0;
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            out[r * w..(r + 1) * w].copy_from_slice(&self.nodes[a.0].value[r * cols + c0..r * cols + c1]);
        }
        self.push(Op::SliceCols { c0, c1, rows, cols }, vec![a.0], vec![rows, w], out)
    }

    /// Embedding lookup: rows of `table` [v,d] at constant `indices`.
    pub fn gather_rows(&mut self, table: NodeRef, indices: &[usize]) -> Result<NodeRef> {
        self.want_rank("gather_rows", table, 2)?;
        let (v, d) = (self.nodes[table.0].shape[0], self.nodes[table.0].shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(self.mismatch("gather_rows", format!("index < {v}"), bad.to_string()));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&self.nodes[table.0].value[i * d..(i + 1) * d]);
        }
        self.push(
            Op::GatherRows { indices: indices.to_vec(), cols: d },
            vec![table.0],
            vec![indices.len(), d],
            out,
        )
    }

    /// [f,h,w,c] -> [f,h/k,w/k,c] average pooling over k x k cells.
    pub fn avg_pool_grid(&mut self, a: NodeRef, k: usize) -> Result<NodeRef> {
        self.want_rank("avg_pool_grid", a, 4)?;
        let s = self.nodes[a.0].shape.clone();
        let (f, h, w, c) = (s[0], s[1], s[2], s[3]);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(self.mismatch(
                "avg_pool_grid",
                format!("kernel dividing {h}x{w}"),
                format!("k={k}"),
            ));
        }
        let (ho, wo) = (h / k, w / k);
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; f * ho * wo * c];
        let inv = 1.0 / (k * k) as f64;
        for fi in 0..f {
            for yo in 0..ho {
                for xo in 0..wo {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                let y = yo * k + dy;
                                let x = xo * k + dx;
                                acc += v[((fi * h + y) * w + x) * c + ch];
                            }
                        }
                        out[((fi * ho + yo) * wo + xo) * c + ch] = acc * inv;
                    }
                }
            }
        }
        self.push(
            Op::AvgPoolGrid { f, h, w, c, k },
            vec![a.0],
            vec![f, ho, wo, c],
            out,
        )
    }

    /// [h,w,c] -> [(h/k)*(w/k), k*k*c]: non-overlapping k x k patches in
    /// row-major patch order, each flattened as (dy, dx, channel).
    pub fn extract_patches(&mut self, a: NodeRef, k: usize) -> Result<NodeRef> {
        self.want_rank("extract_patches", a, 3)?;
        let s = self.nodes[a.0].shape.clone();
        let (h, w, c) = (s[0], s[1], s[2]);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(self.mismatch(
                "extract_patches",
                format!("kernel dividing {h}x{w}"),
                format!("k={k}"),
            ));
        }
        let (ph, pw) = (h / k, w / k);
        let plen = k * k * c;
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; ph * pw * plen];
        for py in 0..ph {
            for px in 0..pw {
                let p = py * pw + px;
                let mut o = p * plen;
                for dy in 0..k {
                    for dx in 0..k {
                        let y = py * k + dy;
                        let x = px * k + dx;
                        for ch in 0..c {
                            out[o] = v[(y * w + x) * c + ch];
                            o += 1;
                        }
                    }
                }
            }
        }
        self.push(
            Op::ExtractPatches { h, w, c, k },
            vec![a.0],
            vec![ph * pw, plen],
            out,
        )
    }

    // ── composites ───────────────────────────────────────────────────

    /// x[n,din] @ w[din,dout] + b[dout].
    pub fn linear(&mut self, x: NodeRef, w: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Scaled dot-product attention softmax(q k^T / sqrt(d)) v.
    pub fn attention(&mut self, q: NodeRef, k: NodeRef, v: NodeRef) -> Result<NodeRef> {
        self.want_rank("attention", q, 2)?;
        self.want_rank("attention", k, 2)?;
        self.want_rank("attention", v, 2)?;
        let d = self.nodes[q.0].shape[1];
        if self.nodes[k.0].shape[1] != d {
            return Err(self.mismatch(
                "attention",
                format!("key dim {d}"),
                fmt_shape(&self.nodes[k.0].shape),
            ));
        }
        if self.nodes[k.0].shape[0] != self.nodes[v.0].shape[0] {
            return Err(self.mismatch(
                "attention",
                format!("{} values", self.nodes[k.0].shape[0]),
                fmt_shape(&self.nodes[v.0].shape),
            ));
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = self.softmax_last(scaled)?;
        self.matmul(attn, v)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Backpropagates from a scalar `root` with seed gradient 1, adding
    /// the resulting gradients into per-node slots.
    pub fn backward(&mut self, root: NodeRef) -> Result<()> {
        let shape = self.nodes[root.0].shape.clone();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarRoot { shape });
        }
        let seed = Tensor::new(&shape, vec![1.0])?;
        self.backward_seeded(root, &seed)
    }

    /// Backpropagates from `root` with an explicit seed gradient.
    pub fn backward_seeded(&mut self, root: NodeRef, seed: &Tensor) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::BackwardBeforeForward);
        }
        if seed.shape() != self.nodes[root.0].shape.as_slice() {
            return Err(TensorError::SeedShapeMismatch {
                seed: seed.shape().to_vec(),
                root: self.nodes[root.0].shape.clone(),
            });
        }
        // Fresh per-sweep buffers so repeated backward calls sum cleanly.
        let mut sweep: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        sweep[root.0] = Some(seed.data().to_vec());
        for id in (0..=root.0).rev() {
            let Some(gout) = sweep[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &gout, &mut sweep);
            }
            let slot = self.nodes[id]
                .grad
                .get_or_insert_with(|| vec![0.0; self.nodes[id].value.len()]);
            for (s, g) in slot.iter_mut().zip(&gout) {
                *s += g;
            }
        }
        Ok(())
    }

    fn add_into(sweep: &mut [Option<Vec<f64>>], node: &Node, id: usize, delta: &[f64]) {
        let buf = sweep[id].get_or_insert_with(|| vec![0.0; node.value.len()]);
        for (b, d) in buf.iter_mut().zip(delta) {
            *b += d;
        }
    }

    fn propagate(&self, id: usize, gout: &[f64], sweep: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let input_needs = |i: usize| self.nodes[ins[i]].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if input_needs(0) {
                    // dA = dC @ B^T
                    let b = &self.nodes[ins[1]].value;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gout[i * n + j] * b[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &da);
                }
                if input_needs(1) {
                    // dB = A^T @ dC
                    let a = &self.nodes[ins[0]].value;
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = a[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * gout[i * n + j];
                            }
                        }
                    }
                    Self::add_into(sweep, &self.nodes[ins[1]], ins[1], &db);
                }
            }
            Op::Transpose { rows, cols } => {
                if input_needs(0) {
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..*rows {
                        for j in 0..*cols {
                            dx[i * cols + j] = gout[j * rows + i];
                        }
                    }
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &dx);
                }
            }
            Op::Add => {
                for slot in 0..2 {
                    if input_needs(slot) {
                        Self::add_into(sweep, &self.nodes[ins[slot]], ins[slot], gout);
                    }
                }
            }
            Op::Mul => {
                if input_needs(0) {
                    let other = &self.nodes[ins[1]].value;
                    let dx: Vec<f64> = gout.iter().zip(other).map(|(g, o)| g * o).collect();
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &dx);
                }
                if input_needs(1) {
                    let other = &self.nodes[ins[0]].value;
                    let dx: Vec<f64> = gout.iter().zip(other).map(|(g, o)| g * o).collect();
                    Self::add_into(sweep, &self.nodes[ins[1]], ins[1], &dx);
                }
            }
            Op::Scale(c) => {
                if input_needs(0) {
                    let dx: Vec<f64> = gout.iter().map(|g| g * c).collect();
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &dx);
                }
            }
            Op::AddBias { rows, cols } => {
                if input_needs(0) {
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], gout);
                }
                if input_needs(1) {
                    let mut db = vec![0.0; *cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            db[c] += gout[r * cols + c];
                        }
                    }
                    Self::add_into(sweep, &self.nodes[ins[1]], ins[1], &db);
                }
            }
            Op::RowMul { rows, cols } => {
                if input_needs(0) {
                    let s = &self.nodes[ins[1]].value;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            dx[r * cols + c] = gout[r * cols + c] * s[c];
                        }
                    }
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &dx);
                }
                if input_needs(1) {
                    let x = &self.nodes[ins[0]].value;
                    let mut ds = vec![0.0; *cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            ds[c] += gout[r * cols + c] * x[r * cols + c];
                        }
                    }
                    Self::add_into(sweep, &self.nodes[ins[1]], ins[1], &ds);
                }
            }
            Op::Tanh => {
                if input_needs(0) {
                    let y = &node.value;
                    let dx: Vec<f64> = gout.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &dx);
                }
            }
            Op::SoftmaxLast { last } => {
                if input_needs(0) {
                    let y = &node.value;
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y
                        .chunks_exact(*last)
                        .zip(gout.chunks_exact(*last))
                        .zip(dx.chunks_exact_mut(*last))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = y * (g - dot);
                        }
                    }
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &dx);
                }
            }
            Op::LayerNormLast { last, inv_std } => {
                if input_needs(0) {
                    let y = &node.value; // normalized output
                    let n = *last as f64;
                    let mut dx = vec![0.0; y.len()];
                    for (row, ((yr, gr), dr)) in y
                        .chunks_exact(*last)
                        .zip(gout.chunks_exact(*last))
                        .zip(dx.chunks_exact_mut(*last))
                        .enumerate()
                    {
                        let gmean = gr.iter().sum::<f64>() / n;
                        let gydot = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                        let is = inv_std[row];
                        for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = is * (g - gmean - y * gydot);
                        }
                    }
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &dx);
                }
            }
            Op::MeanAll => {
                if input_needs(0) {
                    let n = self.nodes[ins[0]].value.len();
                    let g = gout[0] / n as f64;
                    let dx = vec![g; n];
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &dx);
                }
            }
            Op::SumAll => {
                if input_needs(0) {
                    let n = self.nodes[ins[0]].value.len();
                    let dx = vec![gout[0]; n];
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &dx);
                }
            }
            Op::MeanLast { last } => {
                if input_needs(0) {
                    let n = self.nodes[ins[0]].value.len();
                    let mut dx = vec![0.0; n];
                    for (i, dr) in dx.chunks_exact_mut(*last).enumerate() {
                        let g = gout[i] / *last as f64;
                        dr.iter_mut().for_each(|d| *d = g);
                    }
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &dx);
                }
            }
            Op::Mse => {
                let a = &self.nodes[ins[0]].value;
                let b = &self.nodes[ins[1]].value;
                let n = a.len() as f64;
                let c = 2.0 * gout[0] / n;
                if input_needs(0) {
                    let dx: Vec<f64> = a.iter().zip(b).map(|(x, y)| c * (x - y)).collect();
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &dx);
                }
                if input_needs(1) {
                    let dx: Vec<f64> = a.iter().zip(b).map(|(x, y)| -c * (x - y)).collect();
                    Self::add_into(sweep, &self.nodes[ins[1]], ins[1], &dx);
                }
            }
            Op::Reshape => {
                if input_needs(0) {
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], gout);
                }
            }
            Op::ConcatRows { row_counts, cols } => {
                let mut off = 0;
                for (slot, &rc) in row_counts.iter().enumerate() {
                    let n = rc * cols;
                    if input_needs(slot) {
                        Self::add_into(sweep, &self.nodes[ins[slot]], ins[slot], &gout[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceRows { r0, r1, cols } => {
                if input_needs(0) {
                    let total = self.nodes[ins[0]].value.len();
                    let mut dx = vec![0.0; total];
                    dx[r0 * cols..r1 * cols].copy_from_slice(gout);
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &dx);
                }
            }
            Op::ConcatCols { rows, col_counts } => {
                let cols: usize = col_counts.iter().sum();
                let mut c_off = 0;
                for (slot, &cc) in col_counts.iter().enumerate() {
                    if input_needs(slot) {
                        let mut dx = vec![0.0; rows * cc];
                        for r in 0..*rows {
                            dx[r * cc..(r + 1) * cc]
                                .copy_from_slice(&gout[r * cols + c_off..r * cols + c_off + cc]);
                        }
                        Self::add_into(sweep, &self.nodes[ins[slot]], ins[slot], &dx);
                    }
                    c_off += cc;
                }
            }
            Op::SliceCols { c0, c1, rows, cols } => {
                if input_needs(0) {
                    let w = c1 - c0;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..*rows {
                        dx[r * cols + c0..r * cols + c1].copy_from_slice(&gout[r * w..(r + 1) * w]);
                    }
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &dx);
                }
            }
            Op::GatherRows { indices, cols } => {
                if input_needs(0) {
                    let mut dx = vec![0.0; self.nodes[ins[0]].value.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..*cols {
                            dx[i * cols + c] += gout[r * cols + c];
                        }
                    }
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &dx);
                }
            }
            Op::AvgPoolGrid { f, h, w, c, k } => {
                if input_needs(0) {
                    let (ho, wo) = (h / k, w / k);
                    let inv = 1.0 / (k * k) as f64;
                    let mut dx = vec![0.0; f * h * w * c];
                    for fi in 0..*f {
                        for yo in 0..ho {
                            for xo in 0..wo {
                                for ch in 0..*c {
                                    let g = gout[((fi * ho + yo) * wo + xo) * c + ch] * inv;
                                    for dy in 0..*k {
                                        for dx_ in 0..*k {
                                            let y = yo * k + dy;
                                            let x = xo * k + dx_;
                                            dx[((fi * h + y) * w + x) * c + ch] += g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &dx);
                }
            }
            Op::ExtractPatches { h, w, c, k } => {
                if input_needs(0) {
                    let (ph, pw) = (h / k, w / k);
                    let plen = k * k * c;
                    let mut dx = vec![0.0; h * w * c];
                    for py in 0..ph {
                        for px in 0..pw {
                            let p = py * pw + px;
                            let mut o = p * plen;
                            for dy in 0..*k {
                                for dx_ in 0..*k {
                                    let y = py * k + dy;
                                    let x = px * k + dx_;
                                    for ch in 0..*c {
                                        dx[(y * w + x) * c + ch] += gout[o];
                                        o += 1;
                                    }
                                }
                            }
                        }
                    }
                    Self::add_into(sweep, &self.nodes[ins[0]], ins[0], &dx);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], data: Vec<f64>) -> NodeRef {
        let t = Tensor::param(shape, data).unwrap();
        g.leaf(&t)
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = g
            .constant(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let a = g
            .constant(&[3, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])
            .unwrap();
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(&[4], vec![0.0; 4]).unwrap();
        let y = g.softmax_last(x).unwrap();
        assert_eq!(g.value(y), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(&[5], vec![3.25; 5]).unwrap();
        let y = g.layer_norm(x, 1e-6).unwrap();
        assert!(g.value(y).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn attention_single_key_returns_value_exactly() {
        let mut g = Graph::new();
        let q = g.constant(&[2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.7]).unwrap();
        let k = g.constant(&[1, 3], vec![0.9, 0.1, -0.4]).unwrap();
        let v = g.constant(&[1, 5], vec![1.0, -2.0, 3.0, -4.0, 5.0]).unwrap();
        let y = g.attention(q, k, v).unwrap();
        let want = [1.0, -2.0, 3.0, -4.0, 5.0, 1.0, -2.0, 3.0, -4.0, 5.0];
        assert_eq!(g.value(y), &want);
    }

    #[test]
    fn mse_at_target_has_zero_gradient() {
        let mut g = Graph::new();
        let x0 = vec![0.4, -0.2, 1.7];
        let x = leaf(&mut g, &[3], x0.clone());
        let t = g.constant(&[3], x0).unwrap();
        let l = g.mse(x, t).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn softmax_sum_gradient_is_zero() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[5], vec![0.1, -0.4, 2.0, 0.0, 1.1]);
        let s = g.softmax_last(x).unwrap();
        let total = g.sum_all(s).unwrap();
        g.backward(total).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], vec![1.0, 2.0]);
        let y = g.scale(x, 3.0).unwrap();
        let l = g.sum_all(y).unwrap();
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, 6.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_on_empty_graph_is_a_state_error() {
        let mut g = Graph::new();
        let err = g.backward_seeded(NodeRef(0), &Tensor::scalar(1.0));
        assert!(matches!(err, Err(TensorError::BackwardBeforeForward)));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g
                .constant(&[3, 4], (0..12).map(|i| (i as f64) * 0.37 - 1.0).collect())
                .unwrap();
            let w = g
                .constant(&[4, 4], (0..16).map(|i| ((i * 7 % 5) as f64) * 0.21).collect())
                .unwrap();
            let y = g.matmul(x, w).unwrap();
            let s = g.softmax_last(y).unwrap();
            let n = g.layer_norm(s, 1e-6).unwrap();
            g.value(n).to_vec()
        };
        assert_eq!(run(), run());
    }
}
