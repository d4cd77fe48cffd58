//! The op tape. Every forward op appends one node holding its output and the
//! ids of its inputs; `backward` walks the nodes in reverse, pushing adjoint
//! contributions into the inputs and finally into the owning `ParamSet`.
//! Nodes only ever reference earlier nodes, so one reverse sweep suffices.

use super::params::{ParamId, ParamSet};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Tanh,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    ElementwiseMul,
    ConcatLastAxis,
}

#[derive(Debug)]
enum Op<E: Scalar> {
    Leaf { param: Option<ParamId> },
    Matmul { a: TensorId, b: TensorId },
    MatVec { m: TensorId, v: TensorId },
    Unary { kind: UnaryOp, x: TensorId },
    Ewise { kind: BinaryOp, a: TensorId, b: TensorId },
    Concat { a: TensorId, b: TensorId, axis: usize },
    StackRows { parts: Vec<TensorId> },
    SliceRows { x: TensorId, start: usize },
    Reshape { x: TensorId },
    Transpose { x: TensorId },
    AddRowBroadcast { m: TensorId, v: TensorId },
    AddScalarBroadcast { x: TensorId, s: TensorId },
    Scale { x: TensorId, c: E },
    MaskedSoftmax { x: TensorId, mask: Vec<bool> },
    Embedding { table: TensorId, ids: Vec<usize> },
    Bce { pred: TensorId, targets: Vec<bool> },
}

#[derive(Debug)]
struct Node<E: Scalar> {
    shape: Vec<usize>,
    data: Vec<E>,
    op: Op<E>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<E>, op: Op<E>, needs_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node<E> {
        &self.nodes[id.0]
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn value(&self, id: TensorId) -> &[E] {
        &self.node(id).data
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> E {
        debug_assert_eq!(self.node(id).data.len(), 1);
        self.node(id).data[0]
    }

    /// Stage a parameter's current value. Gradients flow back to the owning
    /// `ParamSet` entry on `backward`.
    pub fn param(&mut self, params: &ParamSet<E>, id: ParamId) -> TensorId {
        let p = params.get(id);
        self.push(
            p.value.shape().to_vec(),
            p.value.data().to_vec(),
            Op::Leaf { param: Some(id) },
            true,
        )
    }

    /// Stage a non-trainable input.
    pub fn constant(&mut self, t: Tensor<E>) -> TensorId {
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(shape, data, Op::Leaf { param: None }, false)
    }

    pub fn constant_vec(&mut self, shape: Vec<usize>, data: Vec<E>) -> Result<TensorId> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.constant(t))
    }

    /// Stage f32 payload data (features, topic vectors) as a constant.
    pub fn constant_f32(&mut self, shape: Vec<usize>, data: &[f32]) -> Result<TensorId> {
        let converted: Vec<E> = data.iter().map(|v| E::from_f32(*v)).collect();
        self.constant_vec(shape, converted)
    }

    /// Matrix product of two rank-2 tensors [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let da = &self.node(a).data;
        let db = &self.node(b).data;
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aip * *bv;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b }, needs))
    }

    /// Matrix-vector product [r,c] x [c] -> [r].
    pub fn matvec(&mut self, m: TensorId, v: TensorId) -> Result<TensorId> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: sm,
                rhs: sv,
            });
        }
        let (r, c) = (sm[0], sm[1]);
        let dm = &self.node(m).data;
        let dv = &self.node(v).data;
        let mut out = vec![E::ZERO; r];
        for i in 0..r {
            let mut acc = E::ZERO;
            for (mv, vv) in dm[i * c..(i + 1) * c].iter().zip(dv) {
                acc += *mv * *vv;
            }
            out[i] = acc;
        }
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push(vec![r], out, Op::MatVec { m, v }, needs))
    }

    pub fn apply_unary(&mut self, kind: UnaryOp, x: TensorId) -> TensorId {
        let data: Vec<E> = self
            .node(x)
            .data
            .iter()
            .map(|v| match kind {
                UnaryOp::Tanh => v.tanh(),
                UnaryOp::Relu => v.maximum(E::ZERO),
                UnaryOp::Sigmoid => E::ONE / (E::ONE + (-*v).exp()),
            })
            .collect();
        let shape = self.node(x).shape.clone();
        let needs = self.needs(x);
        self.push(shape, data, Op::Unary { kind, x }, needs)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.apply_unary(UnaryOp::Tanh, x)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.apply_unary(UnaryOp::Relu, x)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.apply_unary(UnaryOp::Sigmoid, x)
    }

    pub fn apply_binary(&mut self, kind: BinaryOp, a: TensorId, b: TensorId) -> Result<TensorId> {
        if kind == BinaryOp::ConcatLastAxis {
            let rank = self.shape(a).len();
            return self.concat_axis(a, b, rank.saturating_sub(1));
        }
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: match kind {
                    BinaryOp::Add => "add",
                    BinaryOp::Sub => "sub",
                    BinaryOp::ElementwiseMul => "elementwise_mul",
                    BinaryOp::ConcatLastAxis => unreachable!(),
                },
                lhs: sa,
                rhs: sb,
            });
        }
        let da = &self.node(a).data;
        let db = &self.node(b).data;
        let out: Vec<E> = da
            .iter()
            .zip(db)
            .map(|(x, y)| match kind {
                BinaryOp::Add => *x + *y,
                BinaryOp::Sub => *x - *y,
                BinaryOp::ElementwiseMul => *x * *y,
                BinaryOp::ConcatLastAxis => unreachable!(),
            })
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(sa, out, Op::Ewise { kind, a, b }, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply_binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply_binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply_binary(BinaryOp::ElementwiseMul, a, b)
    }

    pub fn concat_last_axis(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply_binary(BinaryOp::ConcatLastAxis, a, b)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat_axis(&mut self, a: TensorId, b: TensorId, axis: usize) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (la, lb) = (sa[axis] * inner, sb[axis] * inner);
        let da = &self.node(a).data;
        let db = &self.node(b).data;
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * la..(o + 1) * la]);
            out.extend_from_slice(&db[o * lb..(o + 1) * lb]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Concat { a, b, axis }, needs))
    }

    /// Stack same-shaped tensors along a new leading axis.
    pub fn stack_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("stack_rows: empty part list"));
        };
        let part_shape = self.shape(*first).to_vec();
        let mut out = Vec::with_capacity(parts.len() * self.node(*first).data.len());
        let mut needs = false;
        for p in parts {
            if self.shape(*p) != part_shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: part_shape,
                    rhs: self.shape(*p).to_vec(),
                });
            }
            out.extend_from_slice(&self.node(*p).data);
            needs |= self.needs(*p);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&part_shape);
        Ok(self.push(
            shape,
            out,
            Op::StackRows {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Contiguous slice along the leading axis.
    pub fn slice_rows(&mut self, x: TensorId, start: usize, rows: usize) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || start + rows > sx[0] {
            return Err(Error::IndexOutOfRange {
                what: "slice_rows",
                index: start + rows,
                len: sx.first().copied().unwrap_or(0),
            });
        }
        let inner: usize = sx[1..].iter().product();
        let data = self.node(x).data[start * inner..(start + rows) * inner].to_vec();
        let mut shape = sx.clone();
        shape[0] = rows;
        let needs = self.needs(x);
        Ok(self.push(shape, data, Op::SliceRows { x, start }, needs))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.node(x).data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let data = self.node(x).data.clone();
        let needs = self.needs(x);
        Ok(self.push(shape, data, Op::Reshape { x }, needs))
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (r, c) = (sx[0], sx[1]);
        let dx = &self.node(x).data;
        let mut out = vec![E::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = dx[i * c + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![c, r], out, Op::Transpose { x }, needs))
    }

    /// Add a length-c vector to every row of an [r,c] matrix.
    pub fn add_row_broadcast(&mut self, m: TensorId, v: TensorId) -> Result<TensorId> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: sm,
                rhs: sv,
            });
        }
        let (r, c) = (sm[0], sm[1]);
        let dm = &self.node(m).data;
        let dv = &self.node(v).data;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(dm[i * c + j] + dv[j]);
            }
        }
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push(vec![r, c], out, Op::AddRowBroadcast { m, v }, needs))
    }

    /// Add a single-element tensor to every element of x.
    pub fn add_scalar_broadcast(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.node(s).data.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "add_scalar_broadcast",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sval = self.node(s).data[0];
        let out: Vec<E> = self.node(x).data.iter().map(|v| *v + sval).collect();
        let shape = self.node(x).shape.clone();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(shape, out, Op::AddScalarBroadcast { x, s }, needs))
    }

    pub fn scale(&mut self, x: TensorId, c: E) -> TensorId {
        let out: Vec<E> = self.node(x).data.iter().map(|v| *v * c).collect();
        let shape = self.node(x).shape.clone();
        let needs = self.needs(x);
        self.push(shape, out, Op::Scale { x, c }, needs)
    }

    /// Softmax over the unmasked positions of a rank-1 tensor, computed with
    /// max subtraction. Masked positions (mask[i] == false) are exactly 0 in
    /// the output and receive no gradient.
    pub fn masked_softmax(&mut self, x: TensorId, mask: &[bool]) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 1 || sx[0] != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                lhs: sx,
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|m| *m) {
            return Err(Error::invalid("masked_softmax: every position is masked"));
        }
        let dx = &self.node(x).data;
        let mut max = None::<E>;
        for (v, m) in dx.iter().zip(mask) {
            if *m && max.is_none_or(|cur| *v > cur) {
                max = Some(*v);
            }
        }
        let max = max.expect("at least one unmasked position");
        let mut out = vec![E::ZERO; dx.len()];
        let mut denom = E::ZERO;
        for (i, (v, m)) in dx.iter().zip(mask).enumerate() {
            if *m {
                let e = (*v - max).exp();
                out[i] = e;
                denom += e;
            }
        }
        for (o, m) in out.iter_mut().zip(mask) {
            if *m {
                *o = *o / denom;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            sx,
            out,
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
            },
            needs,
        ))
    }

    /// Gather rows of a [vocab, dim] table. Gradients scatter-add back, so
    /// repeated ids accumulate.
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding_lookup",
                lhs: st,
                rhs: vec![],
            });
        }
        if ids.is_empty() {
            return Err(Error::invalid("embedding_lookup: empty id list"));
        }
        let (vocab, dim) = (st[0], st[1]);
        for id in ids {
            if *id >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "embedding id",
                    index: *id,
                    len: vocab,
                });
            }
        }
        let dt = &self.node(table).data;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for id in ids {
            out.extend_from_slice(&dt[id * dim..(id + 1) * dim]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Mean binary cross-entropy between predicted probabilities [n] and
    /// boolean targets. Predictions are clamped to [1e-7, 1 - 1e-7] first, so
    /// the loss stays finite even at exactly 0 or 1. Minimizing this loss
    /// maximizes the data log-likelihood.
    pub fn bce_loss(&mut self, pred: TensorId, targets: &[bool]) -> Result<TensorId> {
        let sp = self.shape(pred).to_vec();
        if sp.len() != 1 || sp[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_loss",
                lhs: sp,
                rhs: vec![targets.len()],
            });
        }
        if targets.is_empty() {
            return Err(Error::invalid("bce_loss: empty batch"));
        }
        let eps = E::from_f64(1e-7);
        let one_m_eps = E::ONE - eps;
        let dp = &self.node(pred).data;
        let mut acc = E::ZERO;
        for (p, y) in dp.iter().zip(targets) {
            let c = p.maximum(eps).minimum(one_m_eps);
            acc += if *y { c.ln() } else { (E::ONE - c).ln() };
        }
        let n = E::from_f64(targets.len() as f64);
        let loss = -(acc / n);
        let needs = self.needs(pred);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Bce {
                pred,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate into
    /// the `ParamSet`; calling backward twice without zeroing doubles them.
    pub fn backward(&self, loss: TensorId, params: &mut ParamSet<E>) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![E::ONE]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        params.get_mut(*pid).value.accumulate_grad(&g);
                    }
                }
                Op::Matmul { a, b } => {
                    let sa = &self.nodes[a.0].shape;
                    let (m, k) = (sa[0], sa[1]);
                    let n = self.nodes[b.0].shape[1];
                    if self.needs(*a) {
                        let db = &self.nodes[b.0].data;
                        let ga = accum(&mut grads, *a, m * k);
                        for i in 0..m {
                            for j in 0..k {
                                let mut acc = E::ZERO;
                                for p in 0..n {
                                    acc += g[i * n + p] * db[j * n + p];
                                }
                                ga[i * k + j] += acc;
                            }
                        }
                    }
                    if self.needs(*b) {
                        let da = &self.nodes[a.0].data;
                        let gb = accum(&mut grads, *b, k * n);
                        for j in 0..k {
                            for p in 0..n {
                                let mut acc = E::ZERO;
                                for i in 0..m {
                                    acc += da[i * k + j] * g[i * n + p];
                                }
                                gb[j * n + p] += acc;
                            }
                        }
                    }
                }
                Op::MatVec { m, v } => {
                    let (r, c) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                    if self.needs(*m) {
                        let dv = &self.nodes[v.0].data;
                        let gm = accum(&mut grads, *m, r * c);
                        for i in 0..r {
                            for j in 0..c {
                                gm[i * c + j] += g[i] * dv[j];
                            }
                        }
                    }
                    if self.needs(*v) {
                        let dm = &self.nodes[m.0].data;
                        let gv = accum(&mut grads, *v, c);
                        for i in 0..r {
                            for j in 0..c {
                                gv[j] += g[i] * dm[i * c + j];
                            }
                        }
                    }
                }
                Op::Unary { kind, x } => {
                    if self.needs(*x) {
                        let y = &node.data;
                        let gx = accum(&mut grads, *x, y.len());
                        match kind {
                            UnaryOp::Tanh => {
                                for i in 0..y.len() {
                                    gx[i] += g[i] * (E::ONE - y[i] * y[i]);
                                }
                            }
                            UnaryOp::Relu => {
                                for i in 0..y.len() {
                                    if y[i] > E::ZERO {
                                        gx[i] += g[i];
                                    }
                                }
                            }
                            UnaryOp::Sigmoid => {
                                for i in 0..y.len() {
                                    gx[i] += g[i] * y[i] * (E::ONE - y[i]);
                                }
                            }
                        }
                    }
                }
                Op::Ewise { kind, a, b } => {
                    match kind {
                        BinaryOp::Add => {
                            if self.needs(*a) {
                                add_into(accum(&mut grads, *a, g.len()), &g);
                            }
                            if self.needs(*b) {
                                add_into(accum(&mut grads, *b, g.len()), &g);
                            }
                        }
                        BinaryOp::Sub => {
                            if self.needs(*a) {
                                add_into(accum(&mut grads, *a, g.len()), &g);
                            }
                            if self.needs(*b) {
                                let gb = accum(&mut grads, *b, g.len());
                                for (o, gi) in gb.iter_mut().zip(&g) {
                                    *o -= *gi;
                                }
                            }
                        }
                        BinaryOp::ElementwiseMul => {
                            if self.needs(*a) {
                                let db = &self.nodes[b.0].data;
                                let ga = accum(&mut grads, *a, g.len());
                                for i in 0..g.len() {
                                    ga[i] += g[i] * db[i];
                                }
                            }
                            if self.needs(*b) {
                                let da = &self.nodes[a.0].data;
                                let gb = accum(&mut grads, *b, g.len());
                                for i in 0..g.len() {
                                    gb[i] += g[i] * da[i];
                                }
                            }
                        }
                        BinaryOp::ConcatLastAxis => unreachable!("concat is its own node"),
                    }
                }
                Op::Concat { a, b, axis } => {
                    let sa = self.nodes[a.0].shape.clone();
                    let sb = self.nodes[b.0].shape.clone();
                    let outer: usize = sa[..*axis].iter().product();
                    let inner: usize = sa[*axis + 1..].iter().product();
                    let (la, lb) = (sa[*axis] * inner, sb[*axis] * inner);
                    if self.needs(*a) {
                        let ga = accum(&mut grads, *a, outer * la);
                        for o in 0..outer {
                            let src = &g[o * (la + lb)..o * (la + lb) + la];
                            add_into(&mut ga[o * la..(o + 1) * la], src);
                        }
                    }
                    if self.needs(*b) {
                        let gb = accum(&mut grads, *b, outer * lb);
                        for o in 0..outer {
                            let src = &g[o * (la + lb) + la..(o + 1) * (la + lb)];
                            add_into(&mut gb[o * lb..(o + 1) * lb], src);
                        }
                    }
                }
                Op::StackRows { parts } => {
                    let inner = if parts.is_empty() {
                        0
                    } else {
                        self.nodes[parts[0].0].data.len()
                    };
                    for (row, p) in parts.iter().enumerate() {
                        if self.needs(*p) {
                            let gp = accum(&mut grads, *p, inner);
                            add_into(gp, &g[row * inner..(row + 1) * inner]);
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    if self.needs(*x) {
                        let sx = &self.nodes[x.0].shape;
                        let inner: usize = sx[1..].iter().product();
                        let total = self.nodes[x.0].data.len();
                        let gx = accum(&mut grads, *x, total);
                        add_into(&mut gx[start * inner..start * inner + g.len()], &g);
                    }
                }
                Op::Reshape { x } => {
                    if self.needs(*x) {
                        add_into(accum(&mut grads, *x, g.len()), &g);
                    }
                }
                Op::Transpose { x } => {
                    if self.needs(*x) {
                        let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                        let gx = accum(&mut grads, *x, r * c);
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::AddRowBroadcast { m, v } => {
                    let (r, c) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                    if self.needs(*m) {
                        add_into(accum(&mut grads, *m, r * c), &g);
                    }
                    if self.needs(*v) {
                        let gv = accum(&mut grads, *v, c);
                        for i in 0..r {
                            for j in 0..c {
                                gv[j] += g[i * c + j];
                            }
                        }
                    }
                }
                Op::AddScalarBroadcast { x, s } => {
                    if self.needs(*x) {
                        add_into(accum(&mut grads, *x, g.len()), &g);
                    }
                    if self.needs(*s) {
                        let mut acc = E::ZERO;
                        for gi in &g {
                            acc += *gi;
                        }
                        accum(&mut grads, *s, 1)[0] += acc;
                    }
                }
                Op::Scale { x, c } => {
                    if self.needs(*x) {
                        let gx = accum(&mut grads, *x, g.len());
                        for i in 0..g.len() {
                            gx[i] += g[i] * *c;
                        }
                    }
                }
                Op::MaskedSoftmax { x, mask } => {
                    if self.needs(*x) {
                        let y = &node.data;
                        let mut dot = E::ZERO;
                        for i in 0..y.len() {
                            if mask[i] {
                                dot += g[i] * y[i];
                            }
                        }
                        let gx = accum(&mut grads, *x, y.len());
                        for i in 0..y.len() {
                            if mask[i] {
                                gx[i] += y[i] * (g[i] - dot);
                            }
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    if self.needs(*table) {
                        let dim = self.nodes[table.0].shape[1];
                        let total = self.nodes[table.0].data.len();
                        let gt = accum(&mut grads, *table, total);
                        for (row, id) in ids.iter().enumerate() {
                            add_into(
                                &mut gt[id * dim..(id + 1) * dim],
                                &g[row * dim..(row + 1) * dim],
                            );
                        }
                    }
                }
                Op::Bce { pred, targets } => {
                    if self.needs(*pred) {
                        let eps = E::from_f64(1e-7);
                        let one_m_eps = E::ONE - eps;
                        let n = E::from_f64(targets.len() as f64);
                        let dp = &self.nodes[pred.0].data;
                        let gp = accum(&mut grads, *pred, dp.len());
                        for (i, (p, y)) in dp.iter().zip(targets).enumerate() {
                            // Zero past the clamp boundary.
                            if *p < eps || *p > one_m_eps {
                                continue;
                            }
                            let term = if *y {
                                E::ONE / *p
                            } else {
                                -(E::ONE / (E::ONE - *p))
                            };
                            gp[i] += g[0] * (-(term / n));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accum<E: Scalar>(grads: &mut [Option<Vec<E>>], id: TensorId, len: usize) -> &mut Vec<E> {
    grads[id.0].get_or_insert_with(|| vec![E::ZERO; len])
}

fn add_into<E: Scalar>(dst: &mut [E], src: &[E]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}
