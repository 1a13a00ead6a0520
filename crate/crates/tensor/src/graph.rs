use crate::kernels::gemm;
use crate::{Real, Result, Tensor, TensorError, EPS};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    StopGradient,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, Real),
    AddScalar(usize, Real),
    MaxScalar(usize, Real),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize, end: usize },
    Reshape(usize),
    Tanh(usize),
    Sigmoid(usize),
    Elu(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sum { a: usize, axis: usize },
    Mean { a: usize, axis: usize },
    SumAll(usize),
    L2Normalize { a: usize, axis: usize, eps: Real },
    Softmax { a: usize, axis: usize, temperature: Real },
    LogSoftmax { a: usize, axis: usize, temperature: Real },
}

impl Op {
    fn describe(&self) -> String {
        match self {
            Op::Leaf => "leaf".into(),
            Op::StopGradient => "stop_gradient".into(),
            Op::MatMul { trans_b, .. } => {
                if *trans_b {
                    "matmul_nt".into()
                } else {
                    "matmul".into()
                }
            }
            Op::Add(..) => "add".into(),
            Op::Sub(..) => "sub".into(),
            Op::Mul(..) => "mul".into(),
            Op::Div(..) => "div".into(),
            Op::Scale(_, c) => format!("scale[{c}]"),
            Op::AddScalar(_, c) => format!("add_scalar[{c}]"),
            Op::MaxScalar(_, c) => format!("max_scalar[{c}]"),
            Op::Concat { inputs, axis } => format!("concat[n={},axis={axis}]", inputs.len()),
            Op::Slice {
                axis, start, end, ..
            } => format!("slice[axis={axis},{start}..{end}]"),
            Op::Reshape(_) => "reshape".into(),
            Op::Tanh(_) => "tanh".into(),
            Op::Sigmoid(_) => "sigmoid".into(),
            Op::Elu(_) => "elu".into(),
            Op::Softplus(_) => "softplus".into(),
            Op::Exp(_) => "exp".into(),
            Op::Log(_) => "log".into(),
            Op::Square(_) => "square".into(),
            Op::Sum { axis, .. } => format!("sum[axis={axis}]"),
            Op::Mean { axis, .. } => format!("mean[axis={axis}]"),
            Op::SumAll(_) => "sum_all".into(),
            Op::L2Normalize { axis, .. } => format!("l2_normalize[axis={axis}]"),
            Op::Softmax {
                axis, temperature, ..
            } => format!("softmax[axis={axis},t={temperature}]"),
            Op::LogSoftmax {
                axis, temperature, ..
            } => format!("log_softmax[axis={axis},t={temperature}]"),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    scope: usize,
}

/// One recorded operation, as exposed by [`Graph::trace`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub scope: String,
    pub op: String,
}

/// Append-only tape of tensor operations.
///
/// Nodes that do not depend on any gradient-requiring leaf are recorded but
/// skipped by [`Graph::backward`].
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    scopes: Vec<String>,
    scope_stack: Vec<usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let suffix_ok = long.ends_with(short) || short.iter().product::<usize>() == 1;
    if !suffix_ok {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(long.to_vec())
}

/// Sum `grad` (laid out like the broadcast output) into `acc` of length `acc.len()`.
fn reduce_into(acc: &mut [Real], grad: &[Real], f: impl Fn(usize, Real) -> Real) {
    let n = acc.len();
    if n == grad.len() {
        for (i, (a, &g)) in acc.iter_mut().zip(grad).enumerate() {
            *a += f(i, g);
        }
    } else {
        for (i, &g) in grad.iter().enumerate() {
            acc[i % n] += f(i, g);
        }
    }
}

#[inline]
fn at(x: &[Real], i: usize) -> Real {
    if x.len() == 1 {
        x[0]
    } else {
        x[i % x.len()]
    }
}

fn slot(adj: &mut [Option<Vec<Real>>], j: usize, len: usize) -> &mut [Real] {
    adj[j].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            scopes: vec![String::new()],
            scope_stack: vec![0],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Label subsequent nodes with `name` until the matching [`Graph::pop_scope`].
    pub fn push_scope(&mut self, name: &str) {
        let id = match self.scopes.iter().position(|s| s == name) {
            Some(id) => id,
            None => {
                self.scopes.push(name.to_string());
                self.scopes.len() - 1
            }
        };
        self.scope_stack.push(id);
    }

    pub fn pop_scope(&mut self) {
        if self.scope_stack.len() > 1 {
            self.scope_stack.pop();
        }
    }

    /// Structural record of every node: scope label and op descriptor (no values, no shapes).
    pub fn trace(&self) -> Vec<TraceEntry> {
        self.nodes
            .iter()
            .map(|n| TraceEntry {
                scope: self.scopes[n.scope].clone(),
                op: if matches!(n.op, Op::Leaf) && !n.requires_grad {
                    "const".into()
                } else {
                    n.op.describe()
                },
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let scope = *self.scope_stack.last().unwrap_or(&0);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scope,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v.0)
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    /// Gradient-requiring leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// `a [m,k] @ b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m,k] @ b^T` where `b` is stored `[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let mismatch = || TensorError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            0.0,
            &mut out,
        );
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            rg,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
        op: Op,
    ) -> Result<Var> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let n: usize = shape.iter().product();
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let out: Vec<Real> = if x.len() == y.len() {
            x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()
        } else {
            (0..n).map(|i| f(at(x, i), at(y, i))).collect()
        };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::new(&shape, out)?, op, rg))
    }

    /// Elementwise sum; the smaller operand broadcasts over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |p, q| p / q, Op::Div(a.0, b.0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(Real) -> Real, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect())
            .expect("unary preserves shape");
        let rg = self.rg(a.0);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a.0, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: Real) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a.0, c))
    }

    /// Elementwise `max(a, c)`; gradient passes only where `a > c`.
    pub fn max_scalar(&mut self, a: Var, c: Real) -> Var {
        self.unary(a, |x| x.max(c), Op::MaxScalar(a.0, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Real::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Real::exp, Op::Exp(a.0))
    }

    /// Natural log with inputs clamped at [`EPS`].
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(EPS).ln(), Op::Log(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let same_rank = s.len() == base.len();
            if !same_rank
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|v| self.rg(v.0));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of shape {s:?}"),
            });
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let width = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + width]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.rg(a.0);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Slice {
                a: a.0,
                axis,
                start,
                end,
            },
            rg,
        ))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidArgument {
                op: if mean { "mean" } else { "sum" },
                msg: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        if mean && n > 0 {
            let inv = 1.0 / n as Real;
            out.iter_mut().for_each(|x| *x *= inv);
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(a.0);
        let op = if mean {
            Op::Mean { a: a.0, axis }
        } else {
            Op::Sum { a: a.0, axis }
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, rg))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Scalar sum of every element.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: Real = self.value(a).data().iter().sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(total), Op::SumAll(a.0), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as Real)
    }

    /// `x / max(||x||, eps)` along `axis`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: Real) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidArgument {
                op: "l2_normalize",
                msg: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let norm = (0..n).map(|i| src[idx(i)] * src[idx(i)]).sum::<Real>().sqrt();
                let d = norm.max(eps);
                for i in 0..n {
                    out[idx(i)] = src[idx(i)] / d;
                }
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(
            Tensor::new(&s, out)?,
            Op::L2Normalize { a: a.0, axis, eps },
            rg,
        ))
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, temperature: Real, log: bool) -> Result<Var> {
        let name = if log { "log_softmax" } else { "softmax" };
        let s = self.shape(a).to_vec();
        if axis >= s.len() || temperature <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: name,
                msg: format!("axis {axis}, temperature {temperature} for shape {s:?}"),
            });
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let max = (0..n)
                    .map(|i| src[idx(i)] / temperature)
                    .fold(Real::NEG_INFINITY, Real::max);
                let mut z = 0.0;
                for i in 0..n {
                    let e = (src[idx(i)] / temperature - max).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                if log {
                    let lz = z.ln() + max;
                    for i in 0..n {
                        out[idx(i)] = src[idx(i)] / temperature - lz;
                    }
                } else {
                    for i in 0..n {
                        out[idx(i)] /= z;
                    }
                }
            }
        }
        let rg = self.rg(a.0);
        let op = if log {
            Op::LogSoftmax {
                a: a.0,
                axis,
                temperature,
            }
        } else {
            Op::Softmax {
                a: a.0,
                axis,
                temperature,
            }
        };
        Ok(self.push(Tensor::new(&s, out)?, op, rg))
    }

    /// `softmax(x / temperature)` along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize, temperature: Real) -> Result<Var> {
        self.softmax_impl(a, axis, temperature, false)
    }

    /// `log softmax(x / temperature)` along `axis`.
    pub fn log_softmax(&mut self, a: Var, axis: usize, temperature: Real) -> Result<Var> {
        self.softmax_impl(a, axis, temperature, true)
    }

    /// Reverse-mode pass from a scalar `loss`.
    ///
    /// Gradients add into the per-leaf accumulators, so calling this twice
    /// without [`Graph::zero_grads`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        if !self.rg(loss.0) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<Real>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            if matches!(self.nodes[i].op, Op::Leaf) {
                let shape = self.nodes[i].value.shape().to_vec();
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(Tensor::new(&shape, g)?),
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn propagate(&self, i: usize, g: &[Real], adj: &mut [Option<Vec<Real>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        macro_rules! acc {
            ($j:expr) => {
                slot(adj, $j, nodes[$j].value.len())
            };
        }
        match &nodes[i].op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul { a, b, trans_b } => {
                let sa = nodes[*a].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = g.len() / m;
                if self.rg(*a) {
                    // dA = dC @ op(B)^T
                    let da = acc!(*a);
                    gemm(m, n, k, g, false, nodes[*b].value.data(), !trans_b, 1.0, da);
                }
                if self.rg(*b) {
                    let db = acc!(*b);
                    if *trans_b {
                        // dB[n,k] = dC^T @ A
                        gemm(n, m, k, g, true, nodes[*a].value.data(), false, 1.0, db);
                    } else {
                        // dB[k,n] = A^T @ dC
                        gemm(k, m, n, nodes[*a].value.data(), true, g, false, 1.0, db);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    reduce_into(acc!(*a), g, |_, x| x);
                }
                if self.rg(*b) {
                    reduce_into(acc!(*b), g, |_, x| x);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    reduce_into(acc!(*a), g, |_, x| x);
                }
                if self.rg(*b) {
                    reduce_into(acc!(*b), g, |_, x| -x);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (nodes[*a].value.data(), nodes[*b].value.data());
                if self.rg(*a) {
                    reduce_into(acc!(*a), g, |k, d| d * at(y, k));
                }
                if self.rg(*b) {
                    reduce_into(acc!(*b), g, |k, d| d * at(x, k));
                }
            }
            Op::Div(a, b) => {
                let (x, y) = (nodes[*a].value.data(), nodes[*b].value.data());
                if self.rg(*a) {
                    reduce_into(acc!(*a), g, |k, d| d / at(y, k));
                }
                if self.rg(*b) {
                    reduce_into(acc!(*b), g, |k, d| {
                        let q = at(y, k);
                        -d * at(x, k) / (q * q)
                    });
                }
            }
            Op::Scale(a, c) => {
                acc!(*a).iter_mut().zip(g).for_each(|(p, d)| *p += c * d);
            }
            Op::AddScalar(a, _) | Op::Reshape(a) => {
                acc!(*a).iter_mut().zip(g).for_each(|(p, d)| *p += d);
            }
            Op::MaxScalar(a, c) => {
                let x = nodes[*a].value.data();
                acc!(*a)
                    .iter_mut()
                    .zip(g.iter().zip(x))
                    .for_each(|(p, (d, xv))| {
                        if xv > c {
                            *p += d
                        }
                    });
            }
            Op::Tanh(a) => {
                acc!(*a)
                    .iter_mut()
                    .zip(g.iter().zip(out))
                    .for_each(|(p, (d, y))| *p += d * (1.0 - y * y));
            }
            Op::Sigmoid(a) => {
                acc!(*a)
                    .iter_mut()
                    .zip(g.iter().zip(out))
                    .for_each(|(p, (d, y))| *p += d * y * (1.0 - y));
            }
            Op::Elu(a) => {
                let x = nodes[*a].value.data();
                acc!(*a)
                    .iter_mut()
                    .zip(g.iter().zip(x.iter().zip(out)))
                    .for_each(|(p, (d, (xv, y)))| {
                        *p += if *xv > 0.0 { *d } else { d * (y + 1.0) }
                    });
            }
            Op::Softplus(a) => {
                let x = nodes[*a].value.data();
                acc!(*a)
                    .iter_mut()
                    .zip(g.iter().zip(x))
                    .for_each(|(p, (d, xv))| *p += d * sigmoid(*xv));
            }
            Op::Exp(a) => {
                acc!(*a)
                    .iter_mut()
                    .zip(g.iter().zip(out))
                    .for_each(|(p, (d, y))| *p += d * y);
            }
            Op::Log(a) => {
                let x = nodes[*a].value.data();
                acc!(*a)
                    .iter_mut()
                    .zip(g.iter().zip(x))
                    .for_each(|(p, (d, xv))| {
                        if *xv > EPS {
                            *p += d / xv
                        }
                    });
            }
            Op::Square(a) => {
                let x = nodes[*a].value.data();
                acc!(*a)
                    .iter_mut()
                    .zip(g.iter().zip(x))
                    .for_each(|(p, (d, xv))| *p += 2.0 * d * xv);
            }
            Op::Concat { inputs, axis } => {
                let shape = nodes[i].value.shape();
                let (outer, _, inner) = axis_split(shape, *axis);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &j in inputs {
                    let chunk = nodes[j].value.shape()[*axis] * inner;
                    if self.rg(j) {
                        let dj = acc!(j);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            dj[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(p, d)| *p += d);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice {
                a,
                axis,
                start,
                end,
            } => {
                let (outer, n, inner) = axis_split(nodes[*a].value.shape(), *axis);
                let width = (end - start) * inner;
                let da = acc!(*a);
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    da[base..base + width]
                        .iter_mut()
                        .zip(&g[o * width..(o + 1) * width])
                        .for_each(|(p, d)| *p += d);
                }
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let (outer, n, inner) = axis_split(nodes[*a].value.shape(), *axis);
                let f = if matches!(nodes[i].op, Op::Mean { .. }) {
                    1.0 / n as Real
                } else {
                    1.0
                };
                let da = acc!(*a);
                for o in 0..outer {
                    for k in 0..n {
                        let dst = &mut da[(o * n + k) * inner..(o * n + k + 1) * inner];
                        dst.iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                            .for_each(|(p, d)| *p += f * d);
                    }
                }
            }
            Op::SumAll(a) => {
                let d = g[0];
                acc!(*a).iter_mut().for_each(|p| *p += d);
            }
            Op::L2Normalize { a, axis, eps } => {
                let x = nodes[*a].value.data();
                let (outer, n, inner) = axis_split(nodes[*a].value.shape(), *axis);
                let da = acc!(*a);
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + j;
                        let norm = (0..n).map(|k| x[idx(k)] * x[idx(k)]).sum::<Real>().sqrt();
                        if norm > *eps {
                            let dot: Real = (0..n).map(|k| out[idx(k)] * g[idx(k)]).sum();
                            for k in 0..n {
                                da[idx(k)] += (g[idx(k)] - out[idx(k)] * dot) / norm;
                            }
                        } else {
                            for k in 0..n {
                                da[idx(k)] += g[idx(k)] / eps;
                            }
                        }
                    }
                }
            }
            Op::Softmax {
                a,
                axis,
                temperature,
            } => {
                let (outer, n, inner) = axis_split(nodes[*a].value.shape(), *axis);
                let da = acc!(*a);
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + j;
                        let dot: Real = (0..n).map(|k| out[idx(k)] * g[idx(k)]).sum();
                        for k in 0..n {
                            da[idx(k)] += out[idx(k)] * (g[idx(k)] - dot) / temperature;
                        }
                    }
                }
            }
            Op::LogSoftmax {
                a,
                axis,
                temperature,
            } => {
                let (outer, n, inner) = axis_split(nodes[*a].value.shape(), *axis);
                let da = acc!(*a);
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + j;
                        let total: Real = (0..n).map(|k| g[idx(k)]).sum();
                        for k in 0..n {
                            da[idx(k)] += (g[idx(k)] - out[idx(k)].exp() * total) / temperature;
                        }
                    }
                }
            }
        }
    }
}
