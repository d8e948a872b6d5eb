//! Reverse-mode autodiff over a flat, append-only op record.
//!
//! Nodes are appended in evaluation order, so the record is topologically
//! sorted by construction. `backward` walks it once in reverse.

use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use super::NumError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Affine(NodeId, f64),
    Silu(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    StopGrad,
    Gather { table: NodeId, rows: Vec<usize> },
    ConcatCols(NodeId, NodeId),
    AttnScores { q: NodeId, k: NodeId, len: usize, scale: f64 },
    SoftmaxRows(NodeId),
    AttnMix { w: NodeId, v: NodeId, len: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Affine(..) => "affine",
            Op::Silu(_) => "silu",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::StopGrad => "stop_grad",
            Op::Gather { .. } => "gather",
            Op::ConcatCols(..) => "concat_cols",
            Op::AttnScores { .. } => "attn_scores",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::AttnMix { .. } => "attn_mix",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Whether any gradient can reach a differentiable leaf through this node.
    live: bool,
}

/// Single-owner record of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that can reach it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; a zero tensor when no path from the loss reached it.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        self.grads[id.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

fn mismatch(op: &'static str, shapes: &[&Tensor]) -> NumError {
    NumError::ShapeMismatch { op, shapes: shapes.iter().map(|t| t.shape().to_vec()).collect() }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, false)
    }

    fn push_raw(&mut self, op: Op, value: Tensor, live: bool) -> NodeId {
        self.nodes.push(Node { op, value, live });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> Result<NodeId, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: op.name() });
        }
        let live = !matches!(op, Op::StopGrad) && inputs.iter().any(|i| self.nodes[i.0].live);
        Ok(self.push_raw(op, value, live))
    }

    fn v(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (x, y) = (self.v(a), self.v(b));
        if x.shape() != y.shape() {
            return Err(mismatch("add", &[x, y]));
        }
        let out = x.zip_map(y, |p, q| p + q);
        self.push(Op::Add(a, b), out, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (x, y) = (self.v(a), self.v(b));
        if x.shape() != y.shape() {
            return Err(mismatch("sub", &[x, y]));
        }
        let out = x.zip_map(y, |p, q| p - q);
        self.push(Op::Sub(a, b), out, &[a, b])
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (x, y) = (self.v(a), self.v(b));
        if x.shape() != y.shape() {
            return Err(mismatch("mul", &[x, y]));
        }
        let out = x.zip_map(y, |p, q| p * q);
        self.push(Op::Mul(a, b), out, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (x, y) = (self.v(a), self.v(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(mismatch("matmul", &[x, y]));
        }
        let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(x.data(), y.data(), n, k, m, &mut out);
        let out = Tensor::new(vec![n, m], out)?;
        self.push(Op::MatMul(a, b), out, &[a, b])
    }

    /// Adds a length-`m` vector to every row of an `n x m` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NumError> {
        let (x, b) = (self.v(a), self.v(bias));
        if x.shape().len() != 2 || b.shape() != [x.shape()[1]] {
            return Err(mismatch("add_bias", &[x, b]));
        }
        let m = b.len();
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(m) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push(Op::AddBias(a, bias), out, &[a, bias])
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId, NumError> {
        let out = self.v(a).map(|x| scale * x + shift);
        self.push(Op::Affine(a, scale), out, &[a])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, NumError> {
        self.affine(a, s, 0.0)
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let out = self.v(a).map(|x| x * sigmoid(x));
        self.push(Op::Silu(a), out, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let out = self.v(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let out = self.v(a).map(|x| x * x);
        self.push(Op::Square(a), out, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let out = Tensor::scalar(self.v(a).sum());
        self.push(Op::Sum(a), out, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let x = self.v(a);
        if x.is_empty() {
            return Err(mismatch("mean", &[x]));
        }
        let out = Tensor::scalar(x.sum() / x.len() as f64);
        self.push(Op::Mean(a), out, &[a])
    }

    /// Sums each row of an `n x m` matrix into an `n`-vector.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let x = self.v(a);
        if x.shape().len() != 2 {
            return Err(mismatch("row_sum", &[x]));
        }
        let out = Tensor::vector(x.data().chunks_exact(x.cols()).map(|r| r.iter().sum()).collect());
        self.push(Op::RowSum(a), out, &[a])
    }

    /// Identity in value; blocks every gradient into `a`.
    pub fn stop_grad(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let out = self.v(a).clone();
        self.push(Op::StopGrad, out, &[a])
    }

    /// Row lookup: result row `i` is `table[rows[i]]`.
    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId, NumError> {
        let t = self.v(table);
        if t.shape().len() != 2 || rows.iter().any(|&r| r >= t.shape()[0]) {
            return Err(mismatch("gather", &[t]));
        }
        let d = t.cols();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(vec![rows.len(), d], out)?;
        self.push(Op::Gather { table, rows: rows.to_vec() }, out, &[table])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (x, y) = (self.v(a), self.v(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.rows() != y.rows() {
            return Err(mismatch("concat_cols", &[x, y]));
        }
        let (n, ca, cb) = (x.rows(), x.cols(), y.cols());
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(x.row(i));
            out.extend_from_slice(y.row(i));
        }
        let out = Tensor::new(vec![n, ca + cb], out)?;
        self.push(Op::ConcatCols(a, b), out, &[a, b])
    }

    /// Grouped dot products: `q` is `n x d`, `k` is `(n*len) x d`;
    /// result `[i, l] = scale * q[i] . k[i*len + l]`.
    pub fn attn_scores(&mut self, q: NodeId, k: NodeId, len: usize, scale: f64) -> Result<NodeId, NumError> {
        let (qv, kv) = (self.v(q), self.v(k));
        if qv.shape().len() != 2 || kv.shape().len() != 2 || qv.cols() != kv.cols() || kv.rows() != qv.rows() * len {
            return Err(mismatch("attn_scores", &[qv, kv]));
        }
        let n = qv.rows();
        let mut out = vec![0.0; n * len];
        for i in 0..n {
            let qi = qv.row(i);
            for l in 0..len {
                let kr = kv.row(i * len + l);
                out[i * len + l] = scale * qi.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let out = Tensor::new(vec![n, len], out)?;
        self.push(Op::AttnScores { q, k, len, scale }, out, &[q, k])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let x = self.v(a);
        if x.shape().len() != 2 {
            return Err(mismatch("softmax_rows", &[x]));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(x.cols()) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(Op::SoftmaxRows(a), out, &[a])
    }

    /// Grouped weighted sums: `w` is `n x len`, `v` is `(n*len) x d`;
    /// result row `i = sum_l w[i,l] * v[i*len + l]`.
    pub fn attn_mix(&mut self, w: NodeId, v: NodeId, len: usize) -> Result<NodeId, NumError> {
        let (wv, vv) = (self.v(w), self.v(v));
        if wv.shape() != [wv.rows(), len] || vv.shape().len() != 2 || vv.rows() != wv.rows() * len {
            return Err(mismatch("attn_mix", &[wv, vv]));
        }
        let (n, d) = (wv.rows(), vv.cols());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let orow = &mut out[i * d..(i + 1) * d];
            for l in 0..len {
                let wil = wv.data()[i * len + l];
                for (o, x) in orow.iter_mut().zip(vv.row(i * len + l)) {
                    *o += wil * x;
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        self.push(Op::AttnMix { w, v, len }, out, &[w, v])
    }

    /// Gradients of the scalar `loss` with respect to every upstream node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumError> {
        let lv = self.v(loss);
        if !lv.is_scalar() {
            return Err(NumError::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.live {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor) {
        if !self.nodes[id.0].live {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, a, g.zip_map(self.v(b), |p, q| p * q));
                self.accumulate(grads, b, g.zip_map(self.v(a), |p, q| p * q));
            }
            Op::MatMul(a, b) => {
                let (x, y) = (self.v(a), self.v(b));
                let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                if self.nodes[a.0].live {
                    let mut da = vec![0.0; n * k];
                    matmul_bt_into(g.data(), y.data(), n, m, k, &mut da);
                    self.accumulate(grads, a, Tensor::new(vec![n, k], da).unwrap());
                }
                if self.nodes[b.0].live {
                    let mut db = vec![0.0; k * m];
                    matmul_at_into(x.data(), g.data(), n, k, m, &mut db);
                    self.accumulate(grads, b, Tensor::new(vec![k, m], db).unwrap());
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, a, g.clone());
                let m = g.cols();
                let mut db = vec![0.0; m];
                for row in g.data().chunks_exact(m) {
                    for (d, r) in db.iter_mut().zip(row) {
                        *d += r;
                    }
                }
                self.accumulate(grads, bias, Tensor::vector(db));
            }
            Op::Affine(a, s) => self.accumulate(grads, a, g.map(|x| s * x)),
            Op::Silu(a) => {
                let d = g.zip_map(self.v(a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                });
                self.accumulate(grads, a, d);
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.v(a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, a, d);
            }
            Op::Square(a) => self.accumulate(grads, a, g.zip_map(self.v(a), |gv, x| 2.0 * x * gv)),
            Op::Sum(a) => {
                let shape = self.v(a).shape().to_vec();
                self.accumulate(grads, a, Tensor::full(&shape, g.item()));
            }
            Op::Mean(a) => {
                let x = self.v(a);
                self.accumulate(grads, a, Tensor::full(x.shape(), g.item() / x.len() as f64));
            }
            Op::RowSum(a) => {
                let x = self.v(a);
                let m = x.cols();
                let data = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv, m)).collect();
                self.accumulate(grads, a, Tensor::new(x.shape().to_vec(), data).unwrap());
            }
            Op::Gather { table, ref rows } => {
                let t = self.v(table);
                let d = t.cols();
                let mut dt = Tensor::zeros(t.shape());
                let buf = dt.data_mut();
                for (i, &r) in rows.iter().enumerate() {
                    for (o, gv) in buf[r * d..(r + 1) * d].iter_mut().zip(g.row(i)) {
                        *o += gv;
                    }
                }
                self.accumulate(grads, table, dt);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.v(a).cols(), self.v(b).cols());
                let mut da = Vec::with_capacity(g.rows() * ca);
                let mut db = Vec::with_capacity(g.rows() * cb);
                for i in 0..g.rows() {
                    let r = g.row(i);
                    da.extend_from_slice(&r[..ca]);
                    db.extend_from_slice(&r[ca..]);
                }
                self.accumulate(grads, a, Tensor::new(self.v(a).shape().to_vec(), da).unwrap());
                self.accumulate(grads, b, Tensor::new(self.v(b).shape().to_vec(), db).unwrap());
            }
            Op::AttnScores { q, k, len, scale } => {
                let (qv, kv) = (self.v(q), self.v(k));
                let (n, d) = (qv.rows(), qv.cols());
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * len * d];
                for i in 0..n {
                    let qi = qv.row(i);
                    for l in 0..len {
                        let gs = scale * g.data()[i * len + l];
                        let kr = kv.row(i * len + l);
                        for c in 0..d {
                            dq[i * d + c] += gs * kr[c];
                            dk[(i * len + l) * d + c] += gs * qi[c];
                        }
                    }
                }
                self.accumulate(grads, q, Tensor::new(vec![n, d], dq).unwrap());
                self.accumulate(grads, k, Tensor::new(vec![n * len, d], dk).unwrap());
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let m = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks_exact(m).zip(g.data().chunks_exact(m)).zip(dx.chunks_exact_mut(m))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, a, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::AttnMix { w, v, len } => {
                let (wv, vv) = (self.v(w), self.v(v));
                let (n, d) = (wv.rows(), vv.cols());
                let mut dw = vec![0.0; n * len];
                let mut dv = vec![0.0; n * len * d];
                for i in 0..n {
                    let gi = g.row(i);
                    for l in 0..len {
                        let r = i * len + l;
                        dw[r] = gi.iter().zip(vv.row(r)).map(|(p, q)| p * q).sum();
                        let wil = wv.data()[r];
                        for c in 0..d {
                            dv[r * d + c] = wil * gi[c];
                        }
                    }
                }
                self.accumulate(grads, w, Tensor::new(vec![n, len], dw).unwrap());
                self.accumulate(grads, v, Tensor::new(vec![n * len, d], dv).unwrap());
            }
        }
    }
}
