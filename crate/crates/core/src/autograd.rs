//! Reverse-mode differentiation over an explicitly recorded graph.
//!
//! A [`Graph`] evaluates eagerly: every op computes its value when it is
//! recorded and remembers its operands. [`Graph::backward`] walks the record
//! in reverse and accumulates `d loss / d node` for every node, writing the
//! parameter gradients into a [`ParamStore`].
//!
//! Stop-gradient and straight-through nodes are "freeze points". When a graph
//! is rebuilt with [`Graph::with_frozen`], those nodes replay the values (or
//! offsets) captured by an earlier build, so a finite-difference probe sees
//! exactly the function whose gradient `backward` reports.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_into, matmul_t_into, norm, t_matmul_into, Tensor};

/// Denominator guard for cosine similarity.
pub const COS_EPS: f64 = 1e-8;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Named parameters with one gradient slot each.
///
/// Equality compares parameter values only; gradient slots are scratch space.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.grads.insert(name.clone(), Tensor::zeros(value.shape()));
        self.values.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.values.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameter and gradient pairs in name order.
    pub fn iter_with_grads(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &Tensor)> {
        self.values
            .iter_mut()
            .zip(self.grads.values())
            .map(|((k, v), g)| (k.as_str(), v, g))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    fn accumulate(&mut self, name: &str, g: &Tensor) {
        if let Some(slot) = self.grads.get_mut(name) {
            slot.add_assign(g);
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Tanh(Var),
    NormalizeRows(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SegmentMean(Var, usize),
    GatherRows(Var, Rc<[Option<usize>]>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Pick(Var, Vec<usize>),
    CosineMatrix(Var, Var),
    ScaleByElem(Var, Var, usize),
    BlockMatMulT(Var, Var, usize),
    BlockMatMul(Var, Var, usize),
    StopGradient,
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Values captured at freeze points during one graph build.
#[derive(Clone, Debug, Default)]
pub struct FrozenPoints(Vec<Tensor>);

/// Recorded computation graph.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    frozen: Option<Arc<FrozenPoints>>,
    captured: Vec<Tensor>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: None,
            captured: Vec::new(),
        }
    }

    /// A graph whose freeze points replay `frozen` instead of their live values.
    pub fn with_frozen(frozen: Arc<FrozenPoints>) -> Self {
        Self {
            frozen: Some(frozen),
            ..Self::new()
        }
    }

    /// Freeze-point values captured so far.
    pub fn frozen_points(&self) -> FrozenPoints {
        FrozenPoints(self.captured.clone())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn label(&self, v: Var) -> String {
        match &self.nodes[v.0].op {
            Op::Param(name) => name.clone(),
            _ => format!("#{}", v.0),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::shape(op, self.label(a), self.shape(a), self.label(b), self.shape(b))
    }

    /// Differentiable leaf holding an input value.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Loads parameter `name`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Index(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push(value, Op::Param(name.to_string()));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn next_frozen(&mut self) -> Option<Tensor> {
        let idx = self.captured.len();
        self.frozen.as_ref().map(|f| f.0[idx].clone())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, a, b));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    /// Adds a bias row to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(a).dims2();
        if self.value(bias).len() != c {
            return Err(self.shape_err("add_row", a, bias));
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x += b[i % c];
        }
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 || self.value(b).rank() != 2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b)))
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(self.shape_err("matmul_t", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_t_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulT(a, b)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// Each row divided by `max(|row|, COS_EPS)`.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let (r, c) = value.dims2();
        let data = value.data_mut();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let n = norm(row).max(COS_EPS);
            row.iter_mut().for_each(|x| *x /= n);
        }
        self.push(value, Op::NormalizeRows(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::Mean(a))
    }

    /// Row sums: `r x c -> [r]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, _) = t.dims2();
        let data = (0..r).map(|i| t.row(i).iter().sum()).collect();
        self.push(Tensor::vector(data), Op::SumCols(a))
    }

    /// Mean over consecutive blocks of `seg` rows: `(B*seg) x c -> B x c`.
    pub fn segment_mean(&mut self, a: Var, seg: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if seg == 0 || r % seg != 0 {
            return Err(Error::shape("segment_mean", self.label(a), t.shape(), "segment", &[seg]));
        }
        let b = r / seg;
        let mut out = vec![0.0; b * c];
        for i in 0..r {
            let orow = &mut out[(i / seg) * c..(i / seg + 1) * c];
            for (o, &x) in orow.iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        let inv = 1.0 / seg as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        Ok(self.push(Tensor::matrix(b, c, out), Op::SegmentMean(a, seg)))
    }

    /// Selects rows by index; `None` produces a zero row.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[Option<usize>]>) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if idx.is_empty() {
            return Err(Error::Index("gather_rows with no indices".into()));
        }
        let mut out = vec![0.0; idx.len() * c];
        for (i, ix) in idx.iter().enumerate() {
            if let Some(src) = *ix {
                if src >= r {
                    return Err(Error::Index(format!(
                        "gather_rows: row {src} out of range for {}",
                        self.label(a)
                    )));
                }
                out[i * c..(i + 1) * c].copy_from_slice(t.row(src));
            }
        }
        Ok(self.push(Tensor::matrix(idx.len(), c, out), Op::GatherRows(a, idx)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if width == 0 || start + width > c {
            return Err(Error::shape("slice_cols", self.label(a), t.shape(), "range", &[start, width]));
        }
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + width]);
        }
        Ok(self.push(Tensor::matrix(r, width, out), Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Tensor::matrix(r, total, out), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        for &p in parts {
            if self.value(p).cols() != c {
                return Err(self.shape_err("concat_rows", parts[0], p));
            }
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let r = out.len() / c;
        Ok(self.push(Tensor::matrix(r, c, out), Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Row-wise softmax. Rank-1 inputs are treated as one row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let (r, _) = value.dims2();
        for i in 0..r {
            softmax_in_place(value.row_mut(i));
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let (r, _) = value.dims2();
        for i in 0..r {
            let row = value.row_mut(i);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::Index(format!("pick: bad indices for {}", self.label(a))));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| t.get2(i, j)).collect();
        Ok(self.push(Tensor::vector(data), Op::Pick(a, idx)))
    }

    /// Pairwise cosine similarities `a_i . b_j / max(|a_i| |b_j|, eps)`, clamped to [-1, 1].
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2();
        let (m, d2) = self.value(b).dims2();
        if d != d2 {
            return Err(self.shape_err("cosine_matrix", a, b));
        }
        let ta = self.value(a);
        let tb = self.value(b);
        let na: Vec<f64> = (0..n).map(|i| norm(ta.row(i))).collect();
        let nb: Vec<f64> = (0..m).map(|j| norm(tb.row(j))).collect();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let c = dot(ta.row(i), tb.row(j)) / (na[i] * nb[j]).max(COS_EPS);
                out[i * m + j] = c.clamp(-1.0, 1.0);
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out), Op::CosineMatrix(a, b)))
    }

    /// `a * s[i]` with `s` differentiable.
    pub fn scale_by_elem(&mut self, a: Var, s: Var, i: usize) -> Result<Var> {
        if i >= self.value(s).len() {
            return Err(Error::Index(format!("scale_by_elem: index {i} out of range")));
        }
        let factor = self.value(s).data()[i];
        let value = self.value(a).map(|x| x * factor);
        Ok(self.push(value, Op::ScaleByElem(a, s, i)))
    }

    /// Per-block `a_b * b_b^T` over blocks of `blk` rows: `(B*blk) x d -> (B*blk) x blk`.
    pub fn block_matmul_t(&mut self, a: Var, b: Var, blk: usize) -> Result<Var> {
        let (r, d) = self.value(a).dims2();
        if self.shape(a) != self.shape(b) || blk == 0 || r % blk != 0 {
            return Err(self.shape_err("block_matmul_t", a, b));
        }
        let mut out = vec![0.0; r * blk];
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        for s in 0..r / blk {
            let lo = s * blk * d;
            let hi = (s + 1) * blk * d;
            matmul_t_into(&ta[lo..hi], &tb[lo..hi], &mut out[s * blk * blk..(s + 1) * blk * blk], blk, d, blk);
        }
        Ok(self.push(Tensor::matrix(r, blk, out), Op::BlockMatMulT(a, b, blk)))
    }

    /// Per-block `p_b * v_b`: `(B*blk) x blk` times `(B*blk) x d`.
    pub fn block_matmul(&mut self, p: Var, v: Var, blk: usize) -> Result<Var> {
        let (r, c) = self.value(p).dims2();
        let (r2, d) = self.value(v).dims2();
        if c != blk || r != r2 || r % blk != 0 {
            return Err(self.shape_err("block_matmul", p, v));
        }
        let mut out = vec![0.0; r * d];
        let (tp, tv) = (self.value(p).data(), self.value(v).data());
        for s in 0..r / blk {
            let pb = &tp[s * blk * blk..(s + 1) * blk * blk];
            let vb = &tv[s * blk * d..(s + 1) * blk * d];
            matmul_into(pb, vb, &mut out[s * blk * d..(s + 1) * blk * d], blk, blk, d);
        }
        Ok(self.push(Tensor::matrix(r, d, out), Op::BlockMatMul(p, v, blk)))
    }

    /// Identity forward, zero backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let live = self.value(a).clone();
        let value = self.next_frozen().unwrap_or(live);
        self.captured.push(value.clone());
        self.push(value, Op::StopGradient)
    }

    /// Forward value `z`, identity Jacobian to `h`.
    pub fn straight_through(&mut self, h: Var, z: Tensor) -> Result<Var> {
        if self.shape(h) != z.shape() {
            return Err(Error::shape("straight_through", self.label(h), self.shape(h), "quantized", z.shape()));
        }
        let value = match self.next_frozen() {
            Some(offset) => {
                let mut v = self.value(h).clone();
                v.add_assign(&offset);
                v
            }
            None => z,
        };
        let mut offset = value.clone();
        for (o, x) in offset.data_mut().iter_mut().zip(self.value(h).data()) {
            *o -= x;
        }
        self.captured.push(offset);
        Ok(self.push(value, Op::StraightThrough(h)))
    }

    /// Gradients of scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape("backward", self.label(loss), lt.shape(), "scalar", &[]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients(grads))
    }

    /// Backward pass from `loss`, accumulating parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<f64> {
        let grads = self.gradients(loss)?;
        for (name, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate(name, g);
            }
        }
        Ok(self.value(loss).item())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::StopGradient => {}
            Op::Add(a, b) => {
                acc(grads, *a, self, |ga| ga.add_assign(g));
                acc(grads, *b, self, |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, self, |ga| ga.add_assign(g));
                acc(grads, *b, self, |gb| {
                    for (x, y) in gb.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(grads, *a, self, |ga| {
                    for ((x, gy), bv) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *x += gy * bv;
                    }
                });
                acc(grads, *b, self, |gb| {
                    for ((x, gy), av) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *x += gy * av;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc(grads, *a, self, |ga| ga.add_assign(g));
                let (r, c) = g.dims2();
                acc(grads, *bias, self, |gb| {
                    let d = gb.data_mut();
                    for row in 0..r {
                        for (x, gy) in d.iter_mut().zip(&g.data()[row * c..(row + 1) * c]) {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(grads, *a, self, |ga| {
                    for (x, gy) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += s * gy;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(grads, *a, self, |ga| matmul_t_into(g.data(), vb.data(), ga.data_mut(), m, n, k));
                acc(grads, *b, self, |gb| t_matmul_into(va.data(), g.data(), gb.data_mut(), m, k, n));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).rows();
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(grads, *a, self, |ga| matmul_into(g.data(), vb.data(), ga.data_mut(), m, n, k));
                acc(grads, *b, self, |gb| t_matmul_into(g.data(), va.data(), gb.data_mut(), m, n, k));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(grads, *a, self, |ga| {
                    for ((x, gy), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *x += gy * (1.0 - yv * yv);
                    }
                });
            }
            Op::NormalizeRows(a) => {
                let y = &node.value;
                let va = self.value(*a);
                let (r, c) = y.dims2();
                acc(grads, *a, self, |ga| {
                    let gd = ga.data_mut();
                    for i in 0..r {
                        let span = i * c..(i + 1) * c;
                        let n = norm(&va.data()[span.clone()]);
                        let (yr, gr) = (&y.data()[span.clone()], &g.data()[span.clone()]);
                        if n > COS_EPS {
                            let proj = dot(yr, gr);
                            for j in 0..c {
                                gd[i * c + j] += (gr[j] - yr[j] * proj) / n;
                            }
                        } else {
                            for j in 0..c {
                                gd[i * c + j] += gr[j] / COS_EPS;
                            }
                        }
                    }
                });
            }
            Op::Square(a) => {
                let va = self.value(*a);
                acc(grads, *a, self, |ga| {
                    for ((x, gy), av) in ga.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *x += 2.0 * av * gy;
                    }
                });
            }
            Op::Sum(a) => {
                let gy = g.item();
                acc(grads, *a, self, |ga| ga.data_mut().iter_mut().for_each(|x| *x += gy));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gy = g.item() / n;
                acc(grads, *a, self, |ga| ga.data_mut().iter_mut().for_each(|x| *x += gy));
            }
            Op::SumCols(a) => {
                let c = self.value(*a).cols();
                acc(grads, *a, self, |ga| {
                    for (j, x) in ga.data_mut().iter_mut().enumerate() {
                        *x += g.data()[j / c];
                    }
                });
            }
            Op::SegmentMean(a, seg) => {
                let (r, c) = self.value(*a).dims2();
                let inv = 1.0 / *seg as f64;
                acc(grads, *a, self, |ga| {
                    for row in 0..r {
                        let src = &g.data()[(row / seg) * c..(row / seg + 1) * c];
                        for (x, gy) in ga.row_mut(row).iter_mut().zip(src) {
                            *x += gy * inv;
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = g.cols();
                acc(grads, *a, self, |ga| {
                    for (row, ix) in idx.iter().enumerate() {
                        if let Some(src) = *ix {
                            for (x, gy) in ga.row_mut(src).iter_mut().zip(&g.data()[row * c..(row + 1) * c]) {
                                *x += gy;
                            }
                        }
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let (r, w) = g.dims2();
                acc(grads, *a, self, |ga| {
                    for row in 0..r {
                        let dst = &mut ga.row_mut(row)[*start..start + w];
                        for (x, gy) in dst.iter_mut().zip(&g.data()[row * w..(row + 1) * w]) {
                            *x += gy;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(grads, p, self, |gp| {
                        for row in 0..r {
                            let src = &g.data()[row * total + offset..row * total + offset + w];
                            for (x, gy) in gp.row_mut(row).iter_mut().zip(src) {
                                *x += gy;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(grads, p, self, |gp| {
                        for (x, gy) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *x += gy;
                        }
                    });
                    offset += n;
                }
            }
            Op::Reshape(a) => {
                acc(grads, *a, self, |ga| {
                    for (x, gy) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += gy;
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (r, c) = y.dims2();
                acc(grads, *a, self, |ga| {
                    for row in 0..r {
                        let yr = y.row(row);
                        let gr = &g.data()[row * c..(row + 1) * c];
                        let s = dot(yr, gr);
                        for ((x, yv), gy) in ga.row_mut(row).iter_mut().zip(yr).zip(gr) {
                            *x += yv * (gy - s);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let (r, c) = y.dims2();
                acc(grads, *a, self, |ga| {
                    for row in 0..r {
                        let yr = y.row(row);
                        let gr = &g.data()[row * c..(row + 1) * c];
                        let s: f64 = gr.iter().sum();
                        for ((x, yv), gy) in ga.row_mut(row).iter_mut().zip(yr).zip(gr) {
                            *x += gy - yv.exp() * s;
                        }
                    }
                });
            }
            Op::Pick(a, idx) => {
                let c = self.value(*a).cols();
                acc(grads, *a, self, |ga| {
                    for (row, &j) in idx.iter().enumerate() {
                        ga.data_mut()[row * c + j] += g.data()[row];
                    }
                });
            }
            Op::CosineMatrix(a, b) => self.backprop_cosine(*a, *b, g, grads),
            Op::ScaleByElem(a, s, i) => {
                let factor = self.value(*s).data()[*i];
                let va = self.value(*a);
                acc(grads, *a, self, |ga| {
                    for (x, gy) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += factor * gy;
                    }
                });
                let ds = dot(va.data(), g.data());
                acc(grads, *s, self, |gs| gs.data_mut()[*i] += ds);
            }
            Op::BlockMatMulT(a, b, blk) => {
                let (r, d) = self.value(*a).dims2();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let gd = g.data();
                for s in 0..r / blk {
                    let lo = s * blk * d;
                    let hi = (s + 1) * blk * d;
                    let gb = &gd[s * blk * blk..(s + 1) * blk * blk];
                    acc(grads, *a, self, |ga| matmul_into(gb, &vb[lo..hi], &mut ga.data_mut()[lo..hi], *blk, *blk, d));
                    acc(grads, *b, self, |gbv| t_matmul_into(gb, &va[lo..hi], &mut gbv.data_mut()[lo..hi], *blk, *blk, d));
                }
            }
            Op::BlockMatMul(p, v, blk) => {
                let (r, d) = self.value(*v).dims2();
                let (vp, vv) = (self.value(*p).data(), self.value(*v).data());
                let gd = g.data();
                for s in 0..r / blk {
                    let plo = s * blk * blk;
                    let phi = (s + 1) * blk * blk;
                    let vlo = s * blk * d;
                    let vhi = (s + 1) * blk * d;
                    acc(grads, *p, self, |gp| {
                        matmul_t_into(&gd[vlo..vhi], &vv[vlo..vhi], &mut gp.data_mut()[plo..phi], *blk, d, *blk)
                    });
                    acc(grads, *v, self, |gv| {
                        t_matmul_into(&vp[plo..phi], &gd[vlo..vhi], &mut gv.data_mut()[vlo..vhi], *blk, *blk, d)
                    });
                }
            }
            Op::StraightThrough(h) => {
                acc(grads, *h, self, |gh| gh.add_assign(g));
            }
        }
    }

    fn backprop_cosine(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, d) = ta.dims2();
        let m = tb.rows();
        let na: Vec<f64> = (0..n).map(|i| norm(ta.row(i))).collect();
        let nb: Vec<f64> = (0..m).map(|j| norm(tb.row(j))).collect();
        let mut ga = vec![0.0; n * d];
        let mut gb = vec![0.0; m * d];
        for i in 0..n {
            let ai = ta.row(i);
            for j in 0..m {
                let gy = g.data()[i * m + j];
                if gy == 0.0 {
                    continue;
                }
                let bj = tb.row(j);
                let prod = na[i] * nb[j];
                let denom = prod.max(COS_EPS);
                let c = dot(ai, bj);
                // the guard is constant below COS_EPS
                let (ka, kb) = if prod > COS_EPS {
                    (c * nb[j] / (na[i] * denom * denom), c * na[i] / (nb[j] * denom * denom))
                } else {
                    (0.0, 0.0)
                };
                for t in 0..d {
                    ga[i * d + t] += gy * (bj[t] / denom - ka * ai[t]);
                    gb[j * d + t] += gy * (ai[t] / denom - kb * bj[t]);
                }
            }
        }
        acc(grads, a, self, |x| {
            for (o, v) in x.data_mut().iter_mut().zip(&ga) {
                *o += v;
            }
        });
        acc(grads, b, self, |x| {
            for (o, v) in x.data_mut().iter_mut().zip(&gb) {
                *o += v;
            }
        });
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, graph: &Graph, f: impl FnOnce(&mut Tensor)) {
    if matches!(graph.nodes[v.0].op, Op::StopGradient) {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(graph.nodes[v.0].value.shape()));
    f(slot);
}

/// Per-node gradients from [`Graph::gradients`].
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when no path reaches it.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Zeroes the gradient slots, builds the graph, and runs the backward pass.
pub fn forward_backward<F>(store: &mut ParamStore, build: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut graph = Graph::new();
    let loss = build(&mut graph, store)?;
    graph.backward(loss, store)
}

/// Scalar cosine similarity of two vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", "a", &[a.len()], "b", &[b.len()]));
    }
    Ok((dot(a, b) / (norm(a) * norm(b)).max(COS_EPS)).clamp(-1.0, 1.0))
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Central-difference step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-5;
/// Magnitude floor in the relative-error denominator.
pub const FD_FLOOR: f64 = 1e-4;

/// Relative error `|a - n| / max(|a|, |n|, FD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Compares analytic parameter gradients against central differences.
///
/// Freeze points (stop-gradient, straight-through) replay their base-point
/// values during the perturbed evaluations.
pub fn check_gradients<F>(store: &ParamStore, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var> + Sync,
{
    let mut base = store.clone();
    base.zero_grads();
    let mut graph = Graph::new();
    let loss = build(&mut graph, &base)?;
    graph.backward(loss, &mut base)?;
    let frozen = Arc::new(graph.frozen_points());
    drop(graph);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_frozen(Arc::clone(&frozen));
        let l = build(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let coords: Vec<(String, usize)> = base
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |k| (name.to_string(), k)))
        .collect();
    let errors = crate::par::map_indexed(coords.len(), |c| -> Result<f64> {
        let (name, k) = &coords[c];
        let mut probe = base.clone();
        let orig = probe.get(name).unwrap().data()[*k];
        probe.get_mut(name).unwrap().data_mut()[*k] = orig + FD_STEP;
        let up = eval(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[*k] = orig - FD_STEP;
        let down = eval(&probe)?;
        let numeric = (up - down) / (2.0 * FD_STEP);
        Ok(relative_error(base.grad(name).unwrap().data()[*k], numeric))
    });

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: coords.len(),
    };
    for (c, err) in errors.into_iter().enumerate() {
        let err = err?;
        if err > worst.max_rel_error || worst.worst_param.is_empty() {
            worst.max_rel_error = err;
            worst.worst_param = format!("{}[{}]", coords[c].0, coords[c].1);
        }
    }
    Ok(worst)
}
