use super::array::{gemm_acc, gemm_nt_acc, gemm_tn_acc, matmul_dims};
use super::params::{ParamId, ParamStore};
use super::{NdArray, TensorError};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    SumAll(Var),
    SumAxis { x: Var, outer: usize, axis: usize, inner: usize, factor: f64 },
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, outer: usize, inner: usize, extents: Vec<usize> },
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    Clamp(Var),
    CosineRows { x: Var, unit: Vec<f64>, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: NdArray,
    grad: Option<NdArray>,
    op: Op,
    requires_grad: bool,
}

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// A tape of operations supporting one reverse pass.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
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

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&NdArray> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, op_name: &'static str, value: NdArray, op: Op, parents: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(op_name));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_root(&mut self, value: NdArray, op: Op, requires_grad: bool) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite("input"));
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: NdArray) -> Result<Var, TensorError> {
        self.push_root(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: NdArray) -> Result<Var, TensorError> {
        self.push_root(value, Op::Constant, false)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() <= id.index() {
            self.bound.resize(id.index() + 1, None);
        }
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            grad: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.index()] = Some(v);
        v
    }

    /// Copy of `v`'s value with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var, TensorError> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(av.data(), bv.data(), &mut out, m, k, n);
        self.push("matmul_nt", NdArray::from_parts(vec![m, n], out), Op::MatMulNt(a, b), &[a, b])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, TensorError> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = NdArray::from_parts(av.shape().to_vec(), data);
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a vector of length `n` to every row of `x: [..×n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rank() != 1 || rv.len() != xv.last_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: xv.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let n = rv.len();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + rv.data()[i % n]).collect();
        let out = NdArray::from_parts(xv.shape().to_vec(), data);
        self.push("add_row", out, Op::AddRow(x, row), &[x, row])
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, TensorError> {
        let out = self.value(x).map(f);
        self.push(name, out, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.unary("scale", x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.unary("add_scalar", x, Op::AddScalar(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("log", x, Op::Log(x), f64::ln)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Elementwise clamp into `[lo, hi]`; clamped entries pass no gradient.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        self.unary("clamp", x, Op::Clamp(x), |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = NdArray::scalar(self.value(x).sum());
        self.push("sum", out, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis("mean_axis", x, axis, true)
    }

    fn reduce_axis(&mut self, name: &'static str, x: Var, axis: usize, mean: bool) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { op: name, axis, shape });
        }
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let factor = if mean { 1.0 / extent as f64 } else { 1.0 };
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let base = (o * extent + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv.data()[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= factor);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let op = Op::SumAxis { x, outer, axis: extent, inner, factor };
        self.push(name, NdArray::from_parts(out_shape, out), op, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).transpose()?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty("concat"))?;
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis { op: "concat", axis, shape: base });
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            extents.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &e) in parts.iter().zip(&extents) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            parts: parts.to_vec(),
            outer,
            inner,
            extents,
        };
        self.push("concat", NdArray::from_parts(shape, data), op, parts)
    }

    /// Row lookup into `table: [V×d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(TensorError::Rank {
                op: "gather",
                expected: 2,
                got: tv.shape().to_vec(),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Empty("gather"));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index { op: "gather", index: id, bound: v });
            }
            data.extend_from_slice(tv.row(id));
        }
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push("gather", NdArray::from_parts(vec![ids.len(), d], data), op, &[table])
    }

    /// Normalizes each last-axis vector, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let n = xv.last_dim();
        for p in [gain, bias] {
            let s = self.value(p).shape();
            if s != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (k, &v) in row.iter().enumerate() {
                let h = (v - mu) * is;
                xhat.push(h);
                out.push(h * gv[k] + bv[k]);
            }
        }
        let shape = xv.shape().to_vec();
        let op = Op::LayerNorm { x, gain, bias, xhat, inv_std };
        self.push("layer_norm", NdArray::from_parts(shape, out), op, &[x, gain, bias])
    }

    /// Softmax over the last axis. `blocked` (same length as the input)
    /// marks entries forced to probability zero; a fully blocked row is zero.
    pub fn softmax(&mut self, x: Var, blocked: Option<&[bool]>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if let Some(b) = blocked {
            if b.len() != xv.len() {
                return Err(TensorError::DataLength {
                    shape: xv.shape().to_vec(),
                    len: b.len(),
                });
            }
        }
        let n = xv.last_dim();
        let mut out = vec![0.0; xv.len()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let open = |j: usize| blocked.is_none_or(|b| !b[r * n + j]);
            let max = (0..n).filter(|&j| open(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let dst = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if open(j) {
                    let e = (row[j] - max).exp();
                    dst[j] = e;
                    total += e;
                }
            }
            dst.iter_mut().for_each(|v| *v /= total);
        }
        let shape = xv.shape().to_vec();
        self.push("softmax", NdArray::from_parts(shape, out), Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        debug_assert_eq!(out.len(), xv.rows() * n);
        let shape = xv.shape().to_vec();
        self.push("log_softmax", NdArray::from_parts(shape, out), Op::LogSoftmax(x), &[x])
    }

    /// Pairwise cosine similarity of the rows of `x: [T×d]`, giving `[T×T]`.
    /// Zero-norm rows have similarity 0 with everything.
    pub fn cosine_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(TensorError::Rank {
                op: "cosine_rows",
                expected: 2,
                got: xv.shape().to_vec(),
            });
        }
        let (t, d) = (xv.shape()[0], xv.shape()[1]);
        let mut unit = Vec::with_capacity(t * d);
        let mut norms = Vec::with_capacity(t);
        for r in 0..t {
            let row = xv.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            if norm > 0.0 {
                unit.extend(row.iter().map(|v| v / norm));
            } else {
                unit.extend(std::iter::repeat_n(0.0, d));
            }
        }
        let mut out = vec![0.0; t * t];
        gemm_nt_acc(&unit, &unit, &mut out, t, d, t);
        let op = Op::CosineRows { x, unit, norms };
        self.push("cosine_rows", NdArray::from_parts(vec![t, t], out), op, &[x])
    }

    /// Reverse sweep from a scalar node; gradients accumulate into every
    /// node that depends on a leaf or parameter.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = NdArray::from_parts(shape, vec![1.0]);
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            for (p, contribution) in self.local_grads(i, &g) {
                self.accumulate(p, contribution);
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, p: Var, contribution: NdArray) {
        let node = &mut self.nodes[p.0];
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *a += b;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    fn local_grads(&self, i: usize, g: &NdArray) -> Vec<(Var, NdArray)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<f64>| NdArray::from_parts(val(v).shape().to_vec(), data);
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf | Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k, n) = matmul_dims(val(*a), val(*b)).expect("checked in forward");
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt_acc(g.data(), val(*b).data(), &mut ga, m, n, k);
                    out.push((*a, like(*a, ga)));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn_acc(val(*a).data(), g.data(), &mut gb, k, m, n);
                    out.push((*b, like(*b, gb)));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_acc(g.data(), val(*b).data(), &mut ga, m, n, k);
                    out.push((*a, like(*a, ga)));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; n * k];
                    gemm_tn_acc(g.data(), val(*a).data(), &mut gb, n, m, k);
                    out.push((*b, like(*b, gb)));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    out.push((*a, like(*a, d)));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    out.push((*b, like(*b, d)));
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    out.push((*x, g.clone()));
                }
                if self.wants(*row) {
                    let n = val(*row).len();
                    let mut d = vec![0.0; n];
                    for (k, v) in g.data().iter().enumerate() {
                        d[k % n] += v;
                    }
                    out.push((*row, like(*row, d)));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.map(|v| v * c))),
            Op::AddScalar(x) => out.push((*x, g.clone())),
            Op::Exp(x) => {
                let d = g.data().iter().zip(node.value.data()).map(|(a, y)| a * y).collect();
                out.push((*x, like(*x, d)));
            }
            Op::Log(x) => {
                let d = g.data().iter().zip(val(*x).data()).map(|(a, v)| a / v).collect();
                out.push((*x, like(*x, d)));
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(a, v)| if *v > 0.0 { *a } else { 0.0 })
                    .collect();
                out.push((*x, like(*x, d)));
            }
            Op::Clamp(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*x).data().iter().zip(node.value.data()))
                    .map(|(a, (v, y))| if v == y { *a } else { 0.0 })
                    .collect();
                out.push((*x, like(*x, d)));
            }
            Op::SumAll(x) => {
                let n = val(*x).len();
                out.push((*x, like(*x, vec![g.item(); n])));
            }
            Op::SumAxis { x, outer, axis, inner, factor } => {
                let mut d = vec![0.0; outer * axis * inner];
                for o in 0..*outer {
                    for a in 0..*axis {
                        for k in 0..*inner {
                            d[(o * axis + a) * inner + k] = g.data()[o * inner + k] * factor;
                        }
                    }
                }
                out.push((*x, like(*x, d)));
            }
            Op::Transpose(x) => {
                out.push((*x, g.transpose().expect("rank 2")));
            }
            Op::Reshape(x) => out.push((*x, like(*x, g.data().to_vec()))),
            Op::Concat { parts, outer, inner, extents } => {
                let total: usize = extents.iter().sum();
                let mut offset = 0;
                for (&p, &e) in parts.iter().zip(extents) {
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(outer * e * inner);
                        for o in 0..*outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + e * inner]);
                        }
                        out.push((p, like(p, d)));
                    }
                    offset += e;
                }
            }
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let d = tv.last_dim();
                let mut acc = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for k in 0..d {
                        acc[id * d + k] += g.data()[r * d + k];
                    }
                }
                out.push((*table, like(*table, acc)));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = val(*gain).len();
                let gv = val(*gain).data();
                let rows = inv_std.len();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for r in 0..rows {
                        for k in 0..n {
                            let gi = g.data()[r * n + k];
                            dg[k] += gi * xhat[r * n + k];
                            db[k] += gi;
                        }
                    }
                    if self.wants(*gain) {
                        out.push((*gain, like(*gain, dg)));
                    }
                    if self.wants(*bias) {
                        out.push((*bias, like(*bias, db)));
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * n];
                    let nf = n as f64;
                    for r in 0..rows {
                        let dh: Vec<f64> = (0..n).map(|k| g.data()[r * n + k] * gv[k]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / nf;
                        let mean_dh_h = (0..n).map(|k| dh[k] * xhat[r * n + k]).sum::<f64>() / nf;
                        for k in 0..n {
                            dx[r * n + k] = inv_std[r] * (dh[k] - mean_dh - xhat[r * n + k] * mean_dh_h);
                        }
                    }
                    out.push((*x, like(*x, dx)));
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.last_dim();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, like(*x, d)));
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let n = y.last_dim();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        d[r * n + j] = gr[j] - yr[j].exp() * total;
                    }
                }
                out.push((*x, like(*x, d)));
            }
            Op::CosineRows { x, unit, norms } => {
                let t = norms.len();
                let d = unit.len() / t;
                // dL/du_i = Σ_j (G + Gᵀ)_ij u_j
                let sym: Vec<f64> = (0..t * t)
                    .map(|k| g.data()[k] + g.data()[(k % t) * t + k / t])
                    .collect();
                let mut du = vec![0.0; t * d];
                gemm_acc(&sym, unit, &mut du, t, t, d);
                let mut dx = vec![0.0; t * d];
                for r in 0..t {
                    if norms[r] == 0.0 {
                        continue;
                    }
                    let u = &unit[r * d..(r + 1) * d];
                    let gu = &du[r * d..(r + 1) * d];
                    let proj: f64 = u.iter().zip(gu).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        dx[r * d + k] = (gu[k] - u[k] * proj) / norms[r];
                    }
                }
                out.push((*x, like(*x, dx)));
            }
        }
        out
    }

    /// Gradients of every bound parameter after [`Graph::backward`].
    pub fn param_grads(&self) -> Vec<(ParamId, &NdArray)> {
        self.bound
            .iter()
            .flatten()
            .filter_map(|&v| match (&self.nodes[v.0].op, &self.nodes[v.0].grad) {
                (Op::Param(id), Some(g)) => Some((*id, g)),
                _ => None,
            })
            .collect()
    }
}
