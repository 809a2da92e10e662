use super::{gelu_grad_scalar, gelu_scalar, gemm, Result, Tensor, TensorError, LAYER_NORM_EPS};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    RepeatRows(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Transpose(Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        keep: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of evaluated operations.
///
/// Nodes are appended as ops run, so every node's inputs precede it and the
/// tape is always in topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients produced by one [`Tape::backward`] pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it required one.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, var: Var) -> Option<Tensor> {
        self.get(var)
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.to_vec()).expect("grad shape"))
    }

    /// Moves a gradient buffer out, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![0, 0],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
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

    /// Bytes held by node values, a lower bound on the tape's footprint.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len() * std::mem::size_of::<f64>()).sum()
    }

    /// Clears every node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_2d("matmul", self.value(a))?;
        let (k2, n) = require_2d("matmul", self.value(b))?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds the vector `bias` (length = cols of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let cols = vx.cols();
        if vb.len() != cols || vb.rows() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: vx.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            add_into(row, vb.data());
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    /// Stacks `rows` copies of a vector into a `[rows x n]` matrix.
    pub fn repeat_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let vv = self.value(v);
        if vv.rows() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "repeat_rows",
                left: vv.shape().to_vec(),
                right: vec![1, vv.cols()],
            });
        }
        let n = vv.len();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(vv.data());
        }
        let rg = self.rg(&[v]);
        Ok(self.push(Tensor::new(vec![rows, n], data)?, Op::RepeatRows(v), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gelu(x), rg))
    }

    /// Row-wise softmax. Entries equal to `-inf` receive zero probability.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::NonFinite("softmax_rows: fully masked row".into()));
            }
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Normalizes each row to zero mean and unit variance, then applies a
    /// learnable per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.cols();
        for p in [gain, bias] {
            let vp = self.value(p);
            if vp.len() != cols || vp.rows() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: vx.shape().to_vec(),
                    right: vp.shape().to_vec(),
                });
            }
        }
        let rows = vx.rows();
        let mut normed = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            let nrow = &mut normed[r * cols..(r + 1) * cols];
            let orow = &mut out[r * cols..(r + 1) * cols];
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                nrow[c] = h;
                orow[c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// Selects rows of a `[V x d]` table by index.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (v, d) = require_2d("gather_rows", vt)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(vt.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = require_2d("transpose", vx)?;
        let src = vx.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::Transpose(x), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Scale(x, factor), rg))
    }

    /// Concatenates 2-D tensors with equal row counts along the last axis.
    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_last_dim: no inputs".into()))?;
        let rows = require_2d("concat_last_dim", self.value(first))?.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = require_2d("concat_last_dim", self.value(p))?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last_dim",
                    left: self.value(first).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = require_2d("slice_cols", vx)?;
        if start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: cols,
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows, len], data)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Splits the last axis into `parts` equal pieces.
    pub fn split_last_dim(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let cols = self.value(x).cols();
        if parts == 0 || cols % parts != 0 {
            return Err(TensorError::Invalid(format!(
                "split_last_dim: {cols} columns do not split into {parts} parts"
            )));
        }
        let width = cols / parts;
        (0..parts).map(|i| self.slice_cols(x, i * width, width)).collect()
    }

    /// Stacks 2-D tensors with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows: no inputs".into()))?;
        let cols = require_2d("concat_rows", self.value(first))?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = require_2d("concat_rows", self.value(p))?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(first).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = require_2d("slice_rows", vx)?;
        if start + len > rows {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: rows,
            });
        }
        let data = vx.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![len, cols], data)?,
            Op::SliceRows { x, start },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), rg))
    }

    /// Mean over kept positions of `-log softmax(logits)[t, target_t]`.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize], keep: &[bool]) -> Result<Var> {
        let vl = self.value(logits);
        let (t, v) = require_2d("cross_entropy_mean", vl)?;
        if targets.len() != t || keep.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_mean",
                left: vec![t, v],
                right: vec![targets.len(), keep.len()],
            });
        }
        let count = keep.iter().filter(|k| **k).count();
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        for r in 0..t {
            let row = vl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let prow = &mut probs[r * v..(r + 1) * v];
            let mut z = 0.0;
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in prow.iter_mut() {
                *p /= z;
            }
            if keep[r] {
                let target = targets[r];
                if target >= v {
                    return Err(TensorError::IndexOutOfRange {
                        op: "cross_entropy_mean",
                        index: target,
                        bound: v,
                    });
                }
                total += -(row[target] - max - z.ln());
            }
        }
        let loss = total / count as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                keep: keep.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every leaf that requires a gradient gets one, zero-filled when the
    /// loss does not depend on it. Contributions from repeated uses of a
    /// node add up.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                acc(*a, &mut |ga| gemm(m, n, k, g, false, val(*b).data(), true, ga, 1.0));
                acc(*b, &mut |gb| gemm(k, m, n, val(*a).data(), true, g, false, gb, 1.0));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |ga| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                        *d += s * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                        *d += s * x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let cols = val(*bias).len();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(cols.max(1)) {
                        add_into(gb, row);
                    }
                });
            }
            Op::RepeatRows(v) => {
                let cols = val(*v).len();
                acc(*v, &mut |gv| {
                    for row in g.chunks(cols.max(1)) {
                        add_into(gv, row);
                    }
                });
            }
            Op::Gelu(x) => {
                acc(*x, &mut |gx| {
                    for ((d, s), &xv) in gx.iter_mut().zip(g).zip(val(*x).data()) {
                        *d += s * gelu_grad_scalar(xv);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let p = nodes[i].value.data();
                let cols = nodes[i].value.cols().max(1);
                acc(*x, &mut |gx| {
                    for ((gr, pr), dr) in g.chunks(cols).zip(p.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for ((d, &gv), &pv) in dr.iter_mut().zip(gr).zip(pr) {
                            *d += pv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let cols = val(*gain).len();
                let gv = val(*gain).data();
                acc(*gain, &mut |gg| {
                    for (gr, nr) in g.chunks(cols).zip(normed.chunks(cols)) {
                        for ((d, a), b) in gg.iter_mut().zip(gr).zip(nr) {
                            *d += a * b;
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(cols) {
                        add_into(gb, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    let nf = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for (r, ((gr, nr), dr)) in g
                        .chunks(cols)
                        .zip(normed.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                        .enumerate()
                    {
                        let mut mean_d = 0.0;
                        let mut mean_dn = 0.0;
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dn += dxhat[c] * nr[c];
                        }
                        mean_d /= nf;
                        mean_dn /= nf;
                        for c in 0..cols {
                            dr[c] += inv_std[r] * (dxhat[c] - mean_d - nr[c] * mean_dn);
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = val(*table).cols();
                acc(*table, &mut |gt| {
                    for (row, &id) in g.chunks(d).zip(ids) {
                        add_into(&mut gt[id * d..(id + 1) * d], row);
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                acc(*x, &mut |gx| {
                    for a in 0..m {
                        for b in 0..n {
                            gx[a * n + b] += g[b * m + a];
                        }
                    }
                });
            }
            Op::Scale(x, factor) => {
                acc(*x, &mut |gx| {
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s * factor;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |gp| {
                        for (dst, src) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(dst, &src[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = val(*x).cols();
                let w = nodes[i].value.cols();
                acc(*x, &mut |gx| {
                    for (dst, src) in gx.chunks_mut(cols).zip(g.chunks(w)) {
                        add_into(&mut dst[*start..start + w], src);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = val(*x).cols();
                let len = nodes[i].value.len();
                acc(*x, &mut |gx| add_into(&mut gx[start * cols..start * cols + len], g));
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                keep,
                probs,
                count,
            } => {
                let v = val(*logits).cols();
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |gl| {
                    for (r, (dr, pr)) in gl.chunks_mut(v).zip(probs.chunks(v)).enumerate() {
                        if !keep[r] {
                            continue;
                        }
                        for (d, p) in dr.iter_mut().zip(pr) {
                            *d += scale * p;
                        }
                        dr[targets[r]] -= scale;
                    }
                });
            }
        }
    }
}
