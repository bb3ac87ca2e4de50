//! Reverse-mode autodiff over 2-D tensors. A `Tape` records every forward
//! op; `gradients` runs one backward sweep from a scalar loss and returns
//! d(loss)/d(param) for every named parameter, including explicit zeros
//! for parameters the graph never touched.
//!
//! Node evaluation order is the recording order and the backward sweep is
//! its exact reverse, so repeated runs over the same graph are bitwise
//! deterministic.

use std::collections::BTreeMap;

use super::{Activation, DiffError, DiffResult, GradSet, ParamSet, Tensor2};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Constant input (data batches, noise draws).
    Leaf,
    /// Named parameter bound from a `ParamSet`.
    Param,
    MatMul(NodeId, NodeId),
    /// Matrix plus a 1 x c row broadcast over every row.
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Neg(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    /// Clamp to [lo, hi]; gradient passes only strictly inside the band.
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    /// Column means: r x c -> 1 x c.
    MeanRows(NodeId),
    /// Row sums: r x c -> r x 1.
    SumCols(NodeId),
    /// Global max with the flat index of the first maximum.
    MaxAll(NodeId, usize),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
}

struct Node {
    value: Tensor2,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: BTreeMap<String, NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor2) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Binds a named parameter. Binding the same name twice returns the
    /// original node, so reuse (weight tying included) accumulates
    /// gradients through ordinary fan-out.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> DiffResult<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let value = params.get(name)?.clone();
        let id = self.push(value, Op::Param);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> DiffResult<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// a (r x c) + row (1 x c), broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> DiffResult<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(DiffError::Shape {
                context: "Tape::add_row".into(),
                expected: format!("1x{}", av.cols()),
                got: format!("{}x{}", rv.rows(), rv.cols()),
            });
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for c in 0..value.cols() {
                let v = value.get(r, c) + rv.get(0, c);
                value.set(r, c, v);
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> DiffResult<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> DiffResult<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> DiffResult<NodeId> {
        let value = self.value(a).mul_elem(self.value(b))?;
        Ok(self.push(value, Op::MulElem(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.value(a).scale(k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.value(a).map(|v| v + k);
        self.push(value, Op::AddConst(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| -v);
        self.push(value, Op::Neg(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor2::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let n = v.data().len() as f64;
        let value = Tensor2::scalar(v.data().iter().sum::<f64>() / n);
        self.push(value, Op::Mean(a))
    }

    /// Column means: r x c -> 1 x c.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (r, c) = v.shape();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (j, o) in out.iter_mut().enumerate() {
                *o += v.get(i, j);
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        let value = Tensor2::from_vec(1, c, out).expect("mean_rows dims");
        self.push(value, Op::MeanRows(a))
    }

    /// Row sums: r x c -> r x 1.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (r, _) = v.shape();
        let out: Vec<f64> = (0..r).map(|i| v.row_slice(i).iter().sum()).collect();
        let value = Tensor2::from_vec(r, 1, out).expect("sum_cols dims");
        self.push(value, Op::SumCols(a))
    }

    /// Global maximum as a scalar; ties resolve to the first occurrence,
    /// which also receives the whole gradient.
    pub fn max_all(&mut self, a: NodeId) -> DiffResult<NodeId> {
        let v = self.value(a);
        if v.data().is_empty() {
            return Err(DiffError::Shape {
                context: "Tape::max_all".into(),
                expected: "non-empty tensor".into(),
                got: "0 elements".into(),
            });
        }
        let mut arg = 0;
        let mut best = v.data()[0];
        for (i, &x) in v.data().iter().enumerate().skip(1) {
            if x > best {
                best = x;
                arg = i;
            }
        }
        Ok(self.push(Tensor2::scalar(best), Op::MaxAll(a, arg)))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> DiffResult<NodeId> {
        let v = self.value(a);
        let (r, c) = v.shape();
        if start + len > c {
            return Err(DiffError::Shape {
                context: "Tape::slice_cols".into(),
                expected: format!("start+len <= {c}"),
                got: format!("{start}+{len}"),
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v.row_slice(i)[start..start + len]);
        }
        let value = Tensor2::from_vec(r, len, out).expect("slice dims");
        Ok(self.push(value, Op::SliceCols(a, start, len)))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> DiffResult<NodeId> {
        let v = self.value(a);
        let (r, c) = v.shape();
        if start + len > r {
            return Err(DiffError::Shape {
                context: "Tape::slice_rows".into(),
                expected: format!("start+len <= {r}"),
                got: format!("{start}+{len}"),
            });
        }
        let out = v.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor2::from_vec(len, c, out).expect("slice dims");
        Ok(self.push(value, Op::SliceRows(a, start, len)))
    }

    /// Vertical stack: (r1 x c) over (r2 x c).
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> DiffResult<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(DiffError::Shape {
                context: "Tape::concat_rows".into(),
                expected: format!("cols {}", av.cols()),
                got: format!("cols {}", bv.cols()),
            });
        }
        let mut data = Vec::with_capacity((av.rows() + bv.rows()) * av.cols());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let value =
            Tensor2::from_vec(av.rows() + bv.rows(), av.cols(), data).expect("concat dims");
        Ok(self.push(value, Op::ConcatRows(a, b)))
    }

    /// Horizontal stack: (r x c1) next to (r x c2).
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> DiffResult<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(DiffError::Shape {
                context: "Tape::concat_cols".into(),
                expected: format!("rows {}", av.rows()),
                got: format!("rows {}", bv.rows()),
            });
        }
        let mut data = Vec::with_capacity(av.rows() * (av.cols() + bv.cols()));
        for i in 0..av.rows() {
            data.extend_from_slice(av.row_slice(i));
            data.extend_from_slice(bv.row_slice(i));
        }
        let value =
            Tensor2::from_vec(av.rows(), av.cols() + bv.cols(), data).expect("concat dims");
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// act(x W + b). Rejects non-finite inputs so numeric blowups surface
    /// at the layer where they appear rather than in a later loss.
    pub fn affine(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        act: Activation,
    ) -> DiffResult<NodeId> {
        if !self.value(x).is_finite() {
            return Err(DiffError::NonFinite {
                context: "affine input".into(),
            });
        }
        let lin = self.matmul(x, w)?;
        let biased = self.add_row(lin, b)?;
        Ok(match act {
            Activation::None => biased,
            Activation::Relu => self.relu(biased),
            Activation::Sigmoid => self.sigmoid(biased),
            Activation::Tanh => self.tanh(biased),
        })
    }

    /// d(loss)/d(param) for every entry of `params`. The loss must be a
    /// finite scalar node; parameters absent from the graph get zeros.
    pub fn gradients(&self, loss: NodeId, params: &ParamSet) -> DiffResult<GradSet> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(DiffError::Shape {
                context: "Tape::gradients loss".into(),
                expected: "1x1".into(),
                got: format!("{}x{}", lv.rows(), lv.cols()),
            });
        }
        if !lv.is_finite() {
            return Err(DiffError::NonFinite {
                context: "loss value".into(),
            });
        }

        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut out = GradSet::default();
        for (name, value) in params.iter() {
            let grad = match self.bound.get(name) {
                Some(&NodeId(idx)) => match &grads[idx] {
                    Some(g) => g.clone(),
                    None => Tensor2::zeros(value.rows(), value.cols()),
                },
                None => Tensor2::zeros(value.rows(), value.cols()),
            };
            if !grad.is_finite() {
                return Err(DiffError::NonFinite {
                    context: format!("gradient of `{name}`"),
                });
            }
            out.insert(name.to_string(), grad);
        }
        Ok(out)
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor2>],
        id: NodeId,
        delta: Tensor2,
    ) -> DiffResult<()> {
        match &mut grads[id.0] {
            Some(g) => g.axpy(1.0, &delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn backward_node(
        &self,
        idx: usize,
        g: &Tensor2,
        grads: &mut [Option<Tensor2>],
    ) -> DiffResult<()> {
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_nt(self.value(*b))?;
                let db = self.value(*a).matmul_tn(g)?;
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone())?;
                let mut db = Tensor2::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let v = db.get(0, c) + g.get(r, c);
                        db.set(0, c, v);
                    }
                }
                self.accumulate(grads, *row, db)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::MulElem(a, b) => {
                let da = g.mul_elem(self.value(*b))?;
                let db = g.mul_elem(self.value(*a))?;
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k))?,
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone())?,
            Op::Neg(a) => self.accumulate(grads, *a, g.scale(-1.0))?,
            Op::Relu(a) => {
                let mask = self.value(*a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g.mul_elem(&mask)?)?;
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let dy = y.map(|s| s * (1.0 - s));
                self.accumulate(grads, *a, g.mul_elem(&dy)?)?;
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let dy = y.map(|t| 1.0 - t * t);
                self.accumulate(grads, *a, g.mul_elem(&dy)?)?;
            }
            Op::Exp(a) => {
                let y = &self.nodes[idx].value;
                self.accumulate(grads, *a, g.mul_elem(y)?)?;
            }
            Op::Ln(a) => {
                let dy = self.value(*a).map(|v| 1.0 / v);
                self.accumulate(grads, *a, g.mul_elem(&dy)?)?;
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[idx].value;
                let dy = y.map(|s| 0.5 / s);
                self.accumulate(grads, *a, g.mul_elem(&dy)?)?;
            }
            Op::Clamp(a, lo, hi) => {
                let mask = self
                    .value(*a)
                    .map(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g.mul_elem(&mask)?)?;
            }
            Op::Sum(a) => {
                let v = self.value(*a);
                let da = Tensor2::filled(v.rows(), v.cols(), g.get(0, 0));
                self.accumulate(grads, *a, da)?;
            }
            Op::Mean(a) => {
                let v = self.value(*a);
                let n = v.data().len() as f64;
                let da = Tensor2::filled(v.rows(), v.cols(), g.get(0, 0) / n);
                self.accumulate(grads, *a, da)?;
            }
            Op::MeanRows(a) => {
                let v = self.value(*a);
                let (r, c) = v.shape();
                let mut da = Tensor2::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        da.set(i, j, g.get(0, j) / r as f64);
                    }
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::SumCols(a) => {
                let v = self.value(*a);
                let (r, c) = v.shape();
                let mut da = Tensor2::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        da.set(i, j, g.get(i, 0));
                    }
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::MaxAll(a, arg) => {
                let v = self.value(*a);
                let mut da = Tensor2::zeros(v.rows(), v.cols());
                da.data_mut()[*arg] = g.get(0, 0);
                self.accumulate(grads, *a, da)?;
            }
            Op::SliceCols(a, start, len) => {
                let v = self.value(*a);
                let mut da = Tensor2::zeros(v.rows(), v.cols());
                for i in 0..v.rows() {
                    for j in 0..*len {
                        da.set(i, start + j, g.get(i, j));
                    }
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::SliceRows(a, start, len) => {
                let v = self.value(*a);
                let mut da = Tensor2::zeros(v.rows(), v.cols());
                for i in 0..*len {
                    for j in 0..v.cols() {
                        da.set(start + i, j, g.get(i, j));
                    }
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).rows();
                let c = g.cols();
                let da = Tensor2::from_vec(ra, c, g.data()[..ra * c].to_vec())?;
                let db =
                    Tensor2::from_vec(g.rows() - ra, c, g.data()[ra * c..].to_vec())?;
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let r = g.rows();
                let mut da = Tensor2::zeros(r, ca);
                let mut db = Tensor2::zeros(r, cb);
                for i in 0..r {
                    for j in 0..ca {
                        da.set(i, j, g.get(i, j));
                    }
                    for j in 0..cb {
                        db.set(i, j, g.get(i, ca + j));
                    }
                }
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
        }
        Ok(())
    }
}
