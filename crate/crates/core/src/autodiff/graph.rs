use super::tensor::{gemm, Tensor};
use super::TensorError;

const KL_FLOOR: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Softmax(NodeId, usize),
    Log(NodeId),
    ClampMin(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    KlDiv(NodeId, NodeId),
    CrossEntropy(NodeId, Vec<usize>),
    SelectRows(NodeId, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only tape. Nodes are created in topological order, so the
/// backward pass is a single reverse sweep.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

/// (outer, len, inner) decomposition of a reduction along `axis`.
fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), TensorError> {
    match (shape.len(), axis) {
        (0, 0) => Ok((1, 1, 1)),
        (1, 0) => Ok((1, shape[0], 1)),
        (2, 0) => Ok((1, shape[0], shape[1])),
        (2, 1) => Ok((shape[0], shape[1], 1)),
        _ => Err(TensorError::InvalidAxis { axis, rank: shape.len() }),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn kl_term(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p.ln() - q.max(KL_FLOOR).ln())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let needs_grad = match &op {
            Op::Param => true,
            Op::Constant => false,
            _ => self.inputs(&op).iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node { op, value, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<NodeId> {
        match *op {
            Op::Param | Op::Constant => vec![],
            Op::Matmul(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::KlDiv(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Softmax(a, _)
            | Op::Log(a)
            | Op::ClampMin(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::CrossEntropy(a, _)
            | Op::SelectRows(a, _) => vec![a],
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<NodeId, TensorError> {
        self.push(Op::Param, t, "param")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<NodeId, TensorError> {
        self.push(Op::Constant, t, "constant")
    }

    /// Copies a node's value as a constant, cutting gradient flow.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let value = self.nodes[id.0].value.clone();
        self.nodes.push(Node { op: Op::Constant, value, needs_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let v = Tensor::new(vec![m, n], out)?;
        self.push(Op::Matmul(a, b), v, "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y).map_err(|_| mismatch("add", self.value(a), self.value(b)))?;
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y).map_err(|_| mismatch("sub", self.value(a), self.value(b)))?;
        self.push(Op::Sub(a, b), v, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y).map_err(|_| mismatch("mul", self.value(a), self.value(b)))?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 2 || tb.len() != tx.shape()[1] || tb.shape().len() != 1 {
            return Err(mismatch("add_bias", tx, tb));
        }
        let cols = tx.shape()[1];
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(Op::AddBias(x, bias), v, "add_bias")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v, "scale")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).map(gelu);
        self.push(Op::Gelu(a), v, "gelu")
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        let (outer, len, inner) = axis_layout(t.shape(), axis)?;
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push(Op::Softmax(a, axis), v, "softmax")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v, "log")
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId, TensorError> {
        let v = self.value(a).map(|x| x.max(floor));
        self.push(Op::ClampMin(a, floor), v, "clamp_min")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), v, "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(TensorError::Empty("mean"));
        }
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(Op::Mean(a), v, "mean")
    }

    /// KL(p‖q) summed over the last axis and averaged over rows. Terms with
    /// p = 0 contribute 0; q is floored at 1e-12 before the log.
    pub fn kl_div(&mut self, p: NodeId, q: NodeId) -> Result<NodeId, TensorError> {
        let (tp, tq) = (self.value(p), self.value(q));
        if tp.shape() != tq.shape() || tp.is_empty() {
            return Err(mismatch("kl_div", tp, tq));
        }
        let total: f64 = tp.data().iter().zip(tq.data()).map(|(&a, &b)| kl_term(a, b)).sum();
        let v = Tensor::scalar(total / tp.rows() as f64);
        self.push(Op::KlDiv(p, q), v, "kl_div")
    }

    /// Rows `idx` of a matrix, in the given order (repeats allowed).
    pub fn select_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(TensorError::UnsupportedRank(t.shape().len()));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
            return Err(TensorError::IndexOutOfRange { index: bad, len: rows });
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            out.extend_from_slice(t.row(r));
        }
        let v = Tensor::new(vec![idx.len(), cols], out)?;
        self.push(Op::SelectRows(a, idx.to_vec()), v, "select_rows")
    }

    /// Mean negative log-likelihood of `targets` under softmax(logits) per row.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId, TensorError> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.rows() != targets.len() || t.rows() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let cols = t.cols();
        if let Some(&bad) = targets.iter().find(|&&c| c >= cols) {
            return Err(TensorError::IndexOutOfRange { index: bad, len: cols });
        }
        let mut total = 0.0;
        for (r, &c) in targets.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[c];
        }
        let v = Tensor::scalar(total / targets.len() as f64);
        self.push(Op::CrossEntropy(logits, targets.to_vec()), v, "cross_entropy")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), TensorError> {
        let y = &node.value;
        match node.op {
            Op::Param | Op::Constant => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                    self.accumulate(grads, a, Tensor::new(vec![m, k], da)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                self.accumulate(grads, a, g.zip_map(tb, |x, y| x * y)?);
                self.accumulate(grads, b, g.zip_map(ta, |x, y| x * y)?);
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, x, g.clone());
                let cols = g.cols();
                let mut db = vec![0.0; cols];
                for row in g.data().chunks(cols.max(1)) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(grads, bias, Tensor::vector(db));
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.map(|v| v * c)),
            Op::Gelu(a) => {
                let d = self.value(a).zip_map(g, |x, gv| gelu_grad(x) * gv)?;
                self.accumulate(grads, a, d);
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_layout(y.shape(), axis)?;
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| yd[idx(j)] * gd[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Log(a) => {
                let d = g.zip_map(self.value(a), |gv, x| gv / x)?;
                self.accumulate(grads, a, d);
            }
            Op::ClampMin(a, floor) => {
                let d = g.zip_map(self.value(a), |gv, x| if x > floor { gv } else { 0.0 })?;
                self.accumulate(grads, a, d);
            }
            Op::Sum(a) => {
                let s = self.value(a).shape().to_vec();
                self.accumulate(grads, a, Tensor::filled(&s, g.item()));
            }
            Op::Mean(a) => {
                let t = self.value(a);
                let s = t.shape().to_vec();
                let n = t.len() as f64;
                self.accumulate(grads, a, Tensor::filled(&s, g.item() / n));
            }
            Op::KlDiv(p, q) => {
                let (tp, tq) = (self.value(p), self.value(q));
                let scale = g.item() / tp.rows() as f64;
                if self.nodes[p.0].needs_grad {
                    // d/dp of p·ln p at p = 0 diverges; the floor keeps it finite.
                    let d = tp.zip_map(tq, |a, b| scale * (a.max(KL_FLOOR).ln() - b.max(KL_FLOOR).ln() + 1.0))?;
                    self.accumulate(grads, p, d);
                }
                if self.nodes[q.0].needs_grad {
                    let d = tp.zip_map(tq, |a, b| if b > KL_FLOOR { -scale * a / b } else { 0.0 })?;
                    self.accumulate(grads, q, d);
                }
            }
            Op::CrossEntropy(logits, ref targets) => {
                let t = self.value(logits);
                let cols = t.cols();
                let scale = g.item() / targets.len() as f64;
                let mut d = vec![0.0; t.len()];
                for (r, &c) in targets.iter().enumerate() {
                    let row = t.row(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    for j in 0..cols {
                        let p = (row[j] - max).exp() / z;
                        d[r * cols + j] = scale * (p - if j == c { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(grads, logits, Tensor::new(t.shape().to_vec(), d)?);
            }
            Op::SelectRows(a, ref idx) => {
                let t = self.value(a);
                let cols = t.cols();
                let mut d = vec![0.0; t.len()];
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..cols {
                        d[r * cols + j] += g.data()[k * cols + j];
                    }
                }
                self.accumulate(grads, a, Tensor::new(t.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

/// KL(p‖q) between two probability vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, TensorError> {
    if p.len() != q.len() {
        return Err(TensorError::LengthMismatch(p.len(), q.len()));
    }
    for v in [p, q] {
        let s: f64 = v.iter().sum();
        if v.is_empty() || v.iter().any(|&x| !(x >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(TensorError::NotNormalized(s));
        }
    }
    Ok(p.iter().zip(q).map(|(&a, &b)| kl_term(a, b)).sum())
}
