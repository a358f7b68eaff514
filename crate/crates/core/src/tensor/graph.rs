use super::{kernels, Mask, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-rule corruptions, used as negative controls for
/// gradient checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Drops the `-<dy, y>` term of the softmax Jacobian product.
    SoftmaxBackward,
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Softmax(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Forward recording of differentiable operations.
///
/// Nodes are appended in execution order, so every node's inputs precede
/// it. [`Graph::backward`] walks the nodes in exact reverse order. A graph
/// is built for one forward pass and dropped after its gradients are read.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.with_requires_grad(true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, op: Op, inputs: &[Var], value: Tensor) -> Var {
        let rg = inputs.iter().any(|&v| self.needs_grad(v));
        self.push(op, value.with_requires_grad(rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_derived(Op::MatMul(a, b), &[a, b], out))
    }

    /// `a * b^T`, without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).expect_matrix("matmul_nt")?;
        let (n, k2) = self.value(b).expect_matrix("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_accumulate(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push_derived(Op::MatMulNt(a, b), &[a, b], out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push_derived(Op::Transpose(a), &[a], out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_derived(Op::Add(a, b), &[a, b], out))
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row of `a[m x n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).expect_matrix("add_row")?;
        if self.value(row).numel() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, y) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x += y;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.push_derived(Op::AddRow(a, row), &[a, row], out))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_derived(Op::Scale(a, s), &[a], out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul_elementwise",
                self.shape(a),
                self.shape(b),
            ));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_derived(Op::Mul(a, b), &[a, b], out))
    }

    /// `[a | b]` along the last dimension.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.value(a).expect_matrix("concat_last_dim")?;
        let (m2, q) = self.value(b).expect_matrix("concat_last_dim")?;
        if m != m2 {
            return Err(Error::shape(
                "concat_last_dim",
                self.shape(a),
                self.shape(b),
            ));
        }
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let out = Tensor::matrix(m, p + q, data)?;
        Ok(self.push_derived(Op::ConcatCols(a, b), &[a, b], out))
    }

    /// Side-by-side concatenation of matrices that share a row count.
    pub fn concat_cols_many(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::InvalidTensor("concat of zero tensors".into()))?;
        rest.iter()
            .try_fold(first, |acc, &p| self.concat_cols(acc, p))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of zero tensors".into()))?;
        let (_, n) = self.value(first).expect_matrix("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).expect_matrix("concat_rows")?;
            if c != n {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, n, data)?;
        Ok(self.push_derived(Op::ConcatRows(parts.to_vec()), parts, out))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        Ok(self.push_derived(Op::SliceRows(a, start), &[a], out))
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let out = super::softmax_rows(self.value(x), mask)?;
        Ok(self.push_derived(Op::Softmax(x), &[x], out))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push_derived(Op::Relu(x), &[x], out))
    }

    /// Per-row layer normalization with learned gain and bias (`[n]` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).expect_matrix("layer_norm")?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                normalized[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        Ok(self.push_derived(op, &[x, gain, bias], out))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.value(table).expect_matrix("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::InvalidTensor(format!(
                    "row id {id} out of range for {r} rows"
                )));
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let out = Tensor::matrix(ids.len(), c, data)?;
        Ok(self.push_derived(Op::Gather(table, ids.to_vec()), &[table], out))
    }

    /// Mean token cross-entropy over the rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.value(logits).expect_matrix("cross_entropy")?;
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::InvalidTensor("cross_entropy without targets".into()));
        }
        let mut probs = vec![0.0; m * n];
        kernels::softmax_rows(self.value(logits).data(), None, &mut probs, m, n)?;
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= n {
                    return Err(Error::InvalidTensor(format!(
                        "target {t} outside {n} classes"
                    )));
                }
                loss -= probs[i * n + t].max(f64::MIN_POSITIVE).ln();
            }
        }
        let out = Tensor::scalar(loss / count as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        Ok(self.push_derived(op, &[logits], out))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        Ok(self.push_derived(Op::Sum(a), &[a], out))
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Afterwards every node that requires a gradient holds one; nodes the
    /// loss does not depend on hold an all-zero buffer. Contributions from
    /// multiple uses of a value accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if self.nodes[i].value.requires_grad() {
                self.propagate(i, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        // Accumulator for an input that needs a gradient, allocated on first use.
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:block) => {
                if self.needs_grad($v) {
                    let n = self.value($v).numel();
                    let $g: &mut Vec<f64> = grads[$v.0].get_or_insert_with(|| vec![0.0; n]);
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).cols();
                with_grad!(*a, |ga| {
                    kernels::matmul_nt_accumulate(dy, self.value(*b).data(), ga, m, n, k);
                });
                with_grad!(*b, |gb| {
                    kernels::matmul_tn_accumulate(self.value(*a).data(), dy, gb, m, k, n);
                });
            }
            Op::MatMulNt(a, b) => {
                // y = a b^T ; da = dy b ; db = dy^T a
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).rows();
                with_grad!(*a, |ga| {
                    kernels::matmul_accumulate(dy, self.value(*b).data(), ga, m, n, k);
                });
                with_grad!(*b, |gb| {
                    kernels::matmul_tn_accumulate(dy, self.value(*a).data(), gb, m, n, k);
                });
            }
            Op::Transpose(a) => {
                let (r, c) = dims(self.value(*a));
                with_grad!(*a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += dy[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| { add_into(ga, dy) });
                with_grad!(*b, |gb| { add_into(gb, dy) });
            }
            Op::AddRow(a, row) => {
                with_grad!(*a, |ga| { add_into(ga, dy) });
                with_grad!(*row, |gr| {
                    let n = gr.len();
                    for chunk in dy.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(a, s) => {
                with_grad!(*a, |ga| {
                    for (g, d) in ga.iter_mut().zip(dy) {
                        *g += s * d;
                    }
                });
            }
            Op::Mul(a, b) => {
                with_grad!(*a, |ga| {
                    for ((g, d), y) in ga.iter_mut().zip(dy).zip(self.value(*b).data()) {
                        *g += d * y;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((g, d), x) in gb.iter_mut().zip(dy).zip(self.value(*a).data()) {
                        *g += d * x;
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = dims(self.value(*a));
                let q = self.value(*b).cols();
                with_grad!(*a, |ga| {
                    for r in 0..m {
                        add_into(
                            &mut ga[r * p..(r + 1) * p],
                            &dy[r * (p + q)..r * (p + q) + p],
                        );
                    }
                });
                with_grad!(*b, |gb| {
                    for r in 0..m {
                        add_into(
                            &mut gb[r * q..(r + 1) * q],
                            &dy[r * (p + q) + p..(r + 1) * (p + q)],
                        );
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    with_grad!(p, |gp| { add_into(gp, &dy[offset..offset + n]) });
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let c = self.value(*a).cols();
                with_grad!(*a, |ga| {
                    add_into(&mut ga[start * c..start * c + dy.len()], dy);
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (m, n) = dims(&node.value);
                with_grad!(*x, |gx| {
                    if self.fault == Some(Fault::SoftmaxBackward) {
                        for ((g, yv), d) in gx.iter_mut().zip(y).zip(dy) {
                            *g += yv * d;
                        }
                    } else {
                        kernels::softmax_rows_backward_accumulate(y, dy, gx, m, n);
                    }
                });
            }
            Op::Relu(x) => {
                with_grad!(*x, |gx| {
                    for ((g, d), v) in gx.iter_mut().zip(dy).zip(self.value(*x).data()) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (m, n) = dims(self.value(*x));
                let g = self.value(*gain).data();
                with_grad!(*gain, |gg| {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += dy[i * n + j] * normalized[i * n + j];
                        }
                    }
                });
                with_grad!(*bias, |gb| {
                    for chunk in dy.chunks(n) {
                        add_into(gb, chunk);
                    }
                });
                with_grad!(*x, |gx| {
                    let nf = n as f64;
                    for i in 0..m {
                        let h = &normalized[i * n..(i + 1) * n];
                        let dh: Vec<f64> = (0..n).map(|j| dy[i * n + j] * g[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / nf;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for j in 0..n {
                            gx[i * n + j] += inv_std[i] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Gather(table, ids) => {
                let c = self.value(*table).cols();
                with_grad!(*table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * c..(id + 1) * c], &dy[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let n = self.value(*logits).cols();
                let scale = dy[0] / *count as f64;
                with_grad!(*logits, |gl| {
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..n {
                                gl[i * n + j] += scale * probs[i * n + j];
                            }
                            gl[i * n + t] -= scale;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                with_grad!(*a, |ga| {
                    for g in ga.iter_mut() {
                        *g += dy[0];
                    }
                });
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
