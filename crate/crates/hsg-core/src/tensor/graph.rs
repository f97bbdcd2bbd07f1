//! Computation graph: eager forward evaluation plus a reverse pass.
//!
//! Nodes are appended in topological order by construction, so the backward
//! pass is a single reverse sweep that visits each node exactly once and
//! accumulates gradients in a fixed order. Identical graphs therefore produce
//! bitwise-identical gradients.

use super::{Tensor, TensorError, LOG_EPS, ZERO_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Broadcast-add a `[1, m]` row vector to every row of a `[n, m]` matrix.
    AddRowVec(NodeId, NodeId),
    MulRowVec(NodeId, NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    Neg(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    Sum(NodeId),
    RowSum(NodeId),
    MeanRows(NodeId),
    SoftmaxRows(NodeId),
    RowNormalize(NodeId),
    /// Per-row log-sum-exp restricted to masked entries; empty rows yield 0.
    MaskedLseRows { x: NodeId, mask: Vec<bool> },
    GatherRows { x: NodeId, idx: Vec<usize> },
    /// Mean of input rows per segment id; `counts[s]` members per segment.
    SegmentMeanRows {
        x: NodeId,
        seg: Vec<usize>,
        counts: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize, end: usize },
    /// Row r of the output concatenates `patch` input rows `map[r*patch..]`.
    Im2Col {
        x: NodeId,
        map: Vec<usize>,
        patch: usize,
    },
    Dropout { x: NodeId, mask: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node, zeros if the loss does not depend on it.
    pub fn get_or_zeros(&self, graph: &Graph, id: NodeId) -> Tensor {
        match self.grads[id.0] {
            Some(ref g) => g.clone(),
            None => {
                let v = graph.value(id);
                Tensor::new(v.shape().to_vec(), vec![0.0; v.numel()])
            }
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn err(op: &'static str, expected: String, got: String) -> TensorError {
    TensorError::ShapeMismatch { op, expected, got }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite forward value in {:?}", op);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A differentiable leaf (parameters, inputs under training).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad();
        self.push(Op::Leaf, t, rg)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    fn same_shape2(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(usize, usize), TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(err(
                op,
                format!("{:?}", ta.shape()),
                format!("{:?}", tb.shape()),
            ));
        }
        Ok((ta.rows(), ta.cols()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape2("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), Tensor::new(shape, data), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape2("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), Tensor::new(shape, data), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape2("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), Tensor::new(shape, data), rg))
    }

    fn rowvec_check(
        &self,
        op: &'static str,
        a: NodeId,
        v: NodeId,
    ) -> Result<(usize, usize), TensorError> {
        let (ta, tv) = (self.value(a), self.value(v));
        if tv.rows() != 1 || tv.cols() != ta.cols() {
            return Err(err(
                op,
                format!("[1, {}]", ta.cols()),
                format!("{:?}", tv.shape()),
            ));
        }
        Ok((ta.rows(), ta.cols()))
    }

    pub fn add_rowvec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        let (n, m) = self.rowvec_check("add_rowvec", a, v)?;
        let mut data = self.value(a).data().to_vec();
        let row = self.value(v).data();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += row[j];
            }
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(Op::AddRowVec(a, v), Tensor::new(vec![n, m], data), rg))
    }

    pub fn mul_rowvec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        let (n, m) = self.rowvec_check("mul_rowvec", a, v)?;
        let mut data = self.value(a).data().to_vec();
        let row = self.value(v).data();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] *= row[j];
            }
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(Op::MulRowVec(a, v), Tensor::new(vec![n, m], data), rg))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x + c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), Tensor::new(shape, data), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), Tensor::new(shape, data), rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let data = t.data().iter().map(|x| -x).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Op::Neg(a), Tensor::new(shape, data), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(err(
                "matmul",
                format!("[_, k] x [k={}, _]", ta.cols()),
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = matmul_nn(ta, tb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = t.at(i, j);
            }
        }
        let rg = self.rg(a);
        self.push(Op::Transpose(a), Tensor::new(vec![m, n], data), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.max(0.0)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Op::Relu(a), Tensor::new(shape, data), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.exp()).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Op::Exp(a), Tensor::new(shape, data), rg)
    }

    /// Natural log with the operand clamped at [`LOG_EPS`].
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.max(LOG_EPS).ln()).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Op::Log(a), Tensor::new(shape, data), rg)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.sqrt()).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Op::Sqrt(a), Tensor::new(shape, data), rg)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let data = t.data().iter().map(|x| 1.0 / x).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Op::Recip(a), Tensor::new(shape, data), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let n = t.rows();
        let data = (0..n).map(|i| t.row(i).iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Op::RowSum(a), Tensor::new(vec![n, 1], data), rg)
    }

    /// Column-wise mean over the row axis: `[n, m] -> [1, m]`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        let mut data = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                data[j] += t.at(i, j);
            }
        }
        for v in data.iter_mut() {
            *v /= n as f64;
        }
        let rg = self.rg(a);
        self.push(Op::MeanRows(a), Tensor::new(vec![1, m], data), rg)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = t.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                data[i * m + j] = e;
                s += e;
            }
            for j in 0..m {
                data[i * m + j] /= s;
            }
        }
        let rg = self.rg(a);
        self.push(Op::SoftmaxRows(a), Tensor::new(vec![n, m], data), rg)
    }

    /// Scale every row to unit Euclidean length.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let norm = t.row_norm(i);
            if norm < ZERO_NORM_EPS {
                return Err(TensorError::ZeroNormRow { row: i });
            }
            for j in 0..m {
                data[i * m + j] = t.at(i, j) / norm;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::RowNormalize(a), Tensor::new(vec![n, m], data), rg))
    }

    /// `out[i] = log sum_j mask[i,j] * exp(x[i,j])`, stabilized by the masked
    /// row maximum. Rows whose mask is empty yield 0 and receive no gradient;
    /// callers are expected to exclude them downstream.
    pub fn masked_lse_rows(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let (n, m) = (t.rows(), t.cols());
        if mask.len() != n * m {
            return Err(err(
                "masked_lse_rows",
                format!("mask of length {}", n * m),
                format!("{}", mask.len()),
            ));
        }
        let mut data = vec![0.0; n];
        for i in 0..n {
            let row = t.row(i);
            let mrow = &mask[i * m..(i + 1) * m];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..m {
                if mrow[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == f64::NEG_INFINITY {
                data[i] = 0.0;
                continue;
            }
            let mut s = 0.0;
            for j in 0..m {
                if mrow[j] {
                    s += (row[j] - mx).exp();
                }
            }
            data[i] = mx + s.ln();
        }
        let rg = self.rg(x);
        Ok(self.push(
            Op::MaskedLseRows {
                x,
                mask: mask.to_vec(),
            },
            Tensor::new(vec![n, 1], data),
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let (n, m) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(err(
                "gather_rows",
                format!("indices < {}", n),
                format!("{}", bad),
            ));
        }
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            Tensor::new(vec![idx.len(), m], data),
            rg,
        ))
    }

    /// Mean of input rows grouped by segment id. Every id in `0..n_segments`
    /// must occur at least once.
    pub fn segment_mean_rows(
        &mut self,
        x: NodeId,
        seg: &[usize],
        n_segments: usize,
    ) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let (n, m) = (t.rows(), t.cols());
        if seg.len() != n {
            return Err(err(
                "segment_mean_rows",
                format!("{} segment ids", n),
                format!("{}", seg.len()),
            ));
        }
        let mut counts = vec![0usize; n_segments];
        for &s in seg {
            assert!(s < n_segments, "segment id {} out of range", s);
            counts[s] += 1;
        }
        assert!(
            counts.iter().all(|&c| c > 0),
            "segment_mean_rows: empty segment"
        );
        let mut data = vec![0.0; n_segments * m];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..m {
                data[s * m + j] += t.at(i, j);
            }
        }
        for s in 0..n_segments {
            for j in 0..m {
                data[s * m + j] /= counts[s] as f64;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Op::SegmentMeanRows {
                x,
                seg: seg.to_vec(),
                counts,
            },
            Tensor::new(vec![n_segments, m], data),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).cols();
        let mut n = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != m {
                return Err(err(
                    "concat_rows",
                    format!("{} columns", m),
                    format!("{}", t.cols()),
                ));
            }
            n += t.rows();
        }
        let mut data = Vec::with_capacity(n * m);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::new(vec![n, m], data),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != n {
                return Err(err(
                    "concat_cols",
                    format!("{} rows", n),
                    format!("{}", t.rows()),
                ));
            }
            m += t.cols();
        }
        let mut data = vec![0.0; n * m];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..n {
                data[i * m + off..i * m + off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::new(vec![n, m], data),
            rg,
        ))
    }

    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let (n, m) = (t.rows(), t.cols());
        if start >= end || end > m {
            return Err(err(
                "slice_cols",
                format!("0 <= start < end <= {}", m),
                format!("{}..{}", start, end),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Op::SliceCols { x, start, end },
            Tensor::new(vec![n, w], data),
            rg,
        ))
    }

    /// Patch gather: output row `r` concatenates the `patch` input rows
    /// `map[r*patch .. (r+1)*patch]`. Used to express convolution as a
    /// gather followed by a matrix product.
    pub fn im2col(
        &mut self,
        x: NodeId,
        map: &[usize],
        patch: usize,
    ) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        assert_eq!(map.len() % patch, 0, "im2col map not a multiple of patch");
        let rows_out = map.len() / patch;
        if let Some(&bad) = map.iter().find(|&&i| i >= n) {
            return Err(err(
                "im2col",
                format!("indices < {}", n),
                format!("{}", bad),
            ));
        }
        let mut data = Vec::with_capacity(rows_out * patch * c);
        for r in 0..rows_out {
            for j in 0..patch {
                data.extend_from_slice(t.row(map[r * patch + j]));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Op::Im2Col {
                x,
                map: map.to_vec(),
                patch,
            },
            Tensor::new(vec![rows_out, patch * c], data),
            rg,
        ))
    }

    /// Multiplicative dropout mask (entries are 0 or the inverted keep rate).
    pub fn dropout(&mut self, x: NodeId, mask: &[f64]) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(err(
                "dropout",
                format!("mask of length {}", t.numel()),
                format!("{}", mask.len()),
            ));
        }
        let data = t.data().iter().zip(mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Op::Dropout {
                x,
                mask: mask.to_vec(),
            },
            Tensor::new(shape, data),
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient per node
    /// reachable from the loss; leaves the rest `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match grads[id.0] {
            Some(ref mut g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => grads[id.0] = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                let neg = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|v| -v).collect(),
                );
                self.accum(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
                );
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                );
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::AddRowVec(a, v) => {
                self.accum(grads, *a, g.clone());
                let (n, m) = (g.rows(), g.cols());
                let mut dv = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        dv[j] += g.at(i, j);
                    }
                }
                self.accum(grads, *v, Tensor::new(vec![1, m], dv));
            }
            Op::MulRowVec(a, v) => {
                let (ta, tv) = (self.value(*a), self.value(*v));
                let (n, m) = (g.rows(), g.cols());
                let mut da = vec![0.0; n * m];
                let mut dv = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        da[i * m + j] = g.at(i, j) * tv.data()[j];
                        dv[j] += g.at(i, j) * ta.at(i, j);
                    }
                }
                self.accum(grads, *a, Tensor::new(vec![n, m], da));
                self.accum(grads, *v, Tensor::new(vec![1, m], dv));
            }
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Scale(a, c) => {
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|v| v * c).collect(),
                );
                self.accum(grads, *a, d);
            }
            Op::Neg(a) => {
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|v| -v).collect(),
                );
                self.accum(grads, *a, d);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, matmul_nt(g, tb));
                self.accum(grads, *b, matmul_tn(ta, g));
            }
            Op::Transpose(a) => {
                let (n, m) = (g.rows(), g.cols());
                let mut data = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        data[j * n + i] = g.at(i, j);
                    }
                }
                self.accum(grads, *a, Tensor::new(vec![m, n], data));
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accum(grads, *a, Tensor::new(g.shape().to_vec(), data));
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * yv)
                    .collect();
                self.accum(grads, *a, Tensor::new(g.shape().to_vec(), data));
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(gv, x)| gv / x.max(LOG_EPS))
                    .collect();
                self.accum(grads, *a, Tensor::new(g.shape().to_vec(), data));
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[id].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * 0.5 / yv)
                    .collect();
                self.accum(grads, *a, Tensor::new(g.shape().to_vec(), data));
            }
            Op::Recip(a) => {
                let y = &self.nodes[id].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| -gv * yv * yv)
                    .collect();
                self.accum(grads, *a, Tensor::new(g.shape().to_vec(), data));
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                let s = g.item();
                self.accum(
                    grads,
                    *a,
                    Tensor::new(ta.shape().to_vec(), vec![s; ta.numel()]),
                );
            }
            Op::RowSum(a) => {
                let ta = self.value(*a);
                let (n, m) = (ta.rows(), ta.cols());
                let mut data = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        data[i * m + j] = g.at(i, 0);
                    }
                }
                self.accum(grads, *a, Tensor::new(vec![n, m], data));
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let (n, m) = (ta.rows(), ta.cols());
                let inv = 1.0 / n as f64;
                let mut data = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        data[i * m + j] = g.at(0, j) * inv;
                    }
                }
                self.accum(grads, *a, Tensor::new(vec![n, m], data));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let (n, m) = (y.rows(), y.cols());
                let mut data = vec![0.0; n * m];
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in 0..m {
                        dot += g.at(i, j) * y.at(i, j);
                    }
                    for j in 0..m {
                        data[i * m + j] = y.at(i, j) * (g.at(i, j) - dot);
                    }
                }
                self.accum(grads, *a, Tensor::new(vec![n, m], data));
            }
            Op::RowNormalize(a) => {
                let ta = self.value(*a);
                let y = &self.nodes[id].value;
                let (n, m) = (y.rows(), y.cols());
                let mut data = vec![0.0; n * m];
                for i in 0..n {
                    let norm = ta.row_norm(i);
                    let mut dot = 0.0;
                    for j in 0..m {
                        dot += g.at(i, j) * y.at(i, j);
                    }
                    for j in 0..m {
                        data[i * m + j] = (g.at(i, j) - y.at(i, j) * dot) / norm;
                    }
                }
                self.accum(grads, *a, Tensor::new(vec![n, m], data));
            }
            Op::MaskedLseRows { x, mask } => {
                let tx = self.value(*x);
                let y = &self.nodes[id].value;
                let (n, m) = (tx.rows(), tx.cols());
                let mut data = vec![0.0; n * m];
                for i in 0..n {
                    let gi = g.at(i, 0);
                    if gi == 0.0 {
                        continue;
                    }
                    let mrow = &mask[i * m..(i + 1) * m];
                    if !mrow.iter().any(|&b| b) {
                        continue;
                    }
                    let lse = y.at(i, 0);
                    for j in 0..m {
                        if mrow[j] {
                            data[i * m + j] = gi * (tx.at(i, j) - lse).exp();
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![n, m], data));
            }
            Op::GatherRows { x, idx } => {
                let tx = self.value(*x);
                let (n, m) = (tx.rows(), tx.cols());
                let mut data = vec![0.0; n * m];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..m {
                        data[i * m + j] += g.at(r, j);
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![n, m], data));
            }
            Op::SegmentMeanRows { x, seg, counts } => {
                let tx = self.value(*x);
                let (n, m) = (tx.rows(), tx.cols());
                let mut data = vec![0.0; n * m];
                for (i, &s) in seg.iter().enumerate() {
                    let inv = 1.0 / counts[s] as f64;
                    for j in 0..m {
                        data[i * m + j] = g.at(s, j) * inv;
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![n, m], data));
            }
            Op::ConcatRows(parts) => {
                let m = g.cols();
                let mut row = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let mut data = Vec::with_capacity(rows * m);
                    for i in 0..rows {
                        data.extend_from_slice(g.row(row + i));
                    }
                    row += rows;
                    self.accum(grads, p, Tensor::new(vec![rows, m], data));
                }
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut data = Vec::with_capacity(n * c);
                    for i in 0..n {
                        data.extend_from_slice(&g.row(i)[off..off + c]);
                    }
                    off += c;
                    self.accum(grads, p, Tensor::new(vec![n, c], data));
                }
            }
            Op::SliceCols { x, start, end } => {
                let tx = self.value(*x);
                let (n, m) = (tx.rows(), tx.cols());
                let mut data = vec![0.0; n * m];
                for i in 0..n {
                    for j in *start..*end {
                        data[i * m + j] = g.at(i, j - start);
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![n, m], data));
            }
            Op::Im2Col { x, map, patch } => {
                let tx = self.value(*x);
                let (n, c) = (tx.rows(), tx.cols());
                let rows_out = map.len() / patch;
                let mut data = vec![0.0; n * c];
                for r in 0..rows_out {
                    for j in 0..*patch {
                        let src = map[r * patch + j];
                        let grow = g.row(r);
                        for k in 0..c {
                            data[src * c + k] += grow[j * c + k];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![n, c], data));
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                self.accum(grads, *x, Tensor::new(g.shape().to_vec(), data));
            }
        }
    }
}

fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut data = vec![0.0; n * m];
    for i in 0..n {
        for kk in 0..k {
            let av = a.at(i, kk);
            if av == 0.0 {
                continue;
            }
            let brow = b.row(kk);
            let out = &mut data[i * m..(i + 1) * m];
            for j in 0..m {
                out[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![n, m], data)
}

/// `a * b^T`
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    debug_assert_eq!(k, b.cols());
    let mut data = vec![0.0; n * m];
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            let brow = b.row(j);
            let mut s = 0.0;
            for kk in 0..k {
                s += arow[kk] * brow[kk];
            }
            data[i * m + j] = s;
        }
    }
    Tensor::new(vec![n, m], data)
}

/// `a^T * b`
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, n, m) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(k, b.rows());
    let mut data = vec![0.0; n * m];
    for kk in 0..k {
        let arow = a.row(kk);
        let brow = b.row(kk);
        for i in 0..n {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let out = &mut data[i * m..(i + 1) * m];
            for j in 0..m {
                out[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![n, m], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0]]));
        let y = g.softmax_rows(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1000.0, 1000.0]]));
        let y = g.softmax_rows(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let row: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let shifted: Vec<f64> = row.iter().map(|v| v + 13.25).collect();
            let mut g = Graph::new();
            let a = g.constant(Tensor::from_rows(&[row]));
            let b = g.constant(Tensor::from_rows(&[shifted]));
            let sa = g.softmax_rows(a);
            let sb = g.softmax_rows(b);
            let sum: f64 = g.value(sa).data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_three_four_five() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![3.0, 4.0]]));
        let y = g.row_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_zero_row_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0]]));
        match g.row_normalize(x) {
            Err(TensorError::ZeroNormRow { row: 0 }) => {}
            other => panic!("expected ZeroNormRow, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).with_grad());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).with_grad());
        let y = g.leaf(Tensor::from_rows(&[vec![5.0]]).with_grad());
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.get_or_zeros(&g, y).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).with_grad());
        match g.backward(x) {
            Err(TensorError::NonScalarLoss { .. }) => {}
            other => panic!("expected NonScalarLoss, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        use rand::SeedableRng;
        let build = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
            let mut g = Graph::new();
            let a = g.leaf(Tensor::uniform(4, 5, -1.0, 1.0, &mut rng).with_grad());
            let b = g.leaf(Tensor::uniform(5, 3, -1.0, 1.0, &mut rng).with_grad());
            let p = g.matmul(a, b).unwrap();
            let s = g.softmax_rows(p);
            let l = g.log(s);
            let loss = g.sum(l);
            let grads = g.backward(loss).unwrap();
            (
                grads.get(a).unwrap().data().to_vec(),
                grads.get(b).unwrap().data().to_vec(),
            )
        };
        let (a1, b1) = build();
        let (a2, b2) = build();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(4, 2));
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn masked_lse_empty_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = g
            .masked_lse_rows(x, &[false, false, true, true])
            .unwrap();
        assert_eq!(g.value(y).at(0, 0), 0.0);
        let expect = (3.0f64.exp() + 4.0f64.exp()).ln();
        assert!((g.value(y).at(1, 0) - expect).abs() < 1e-12);
    }
}
