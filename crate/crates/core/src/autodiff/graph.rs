use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. Binary ops broadcast their second operand when it
/// is a single value or a row matching the last dimension of the first.
#[derive(Clone, Debug, PartialEq)]
pub enum Op<S> {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    ScalarMul(S),
    AddScalar(S),
    Sigmoid,
    Tanh,
    Relu,
    /// Natural log; errors on non-positive input.
    Log,
    /// Softmax over the last axis.
    Softmax,
    /// Log-softmax over the last axis.
    LogSoftmax,
    MeanAxis(usize),
    Sum,
    /// Euclidean norm over the last axis.
    L2Norm,
    Concat(usize),
    /// Row gather from a 2-D table (embedding lookup).
    Lookup(Vec<usize>),
    Reshape(Vec<usize>),
    /// One element per row of a 2-D view: `out[r] = x[r, idx[r]]`.
    Pick(Vec<usize>),
    Clamp(S, S),
    /// Identity forward, no gradient.
    Detach,
}

impl<S> Op<S> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::ScalarMul(_) => "scalar_mul",
            Op::AddScalar(_) => "add_scalar",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Log => "log",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::MeanAxis(_) => "mean_axis",
            Op::Sum => "sum",
            Op::L2Norm => "l2_norm",
            Op::Concat(_) => "concat",
            Op::Lookup(_) => "lookup",
            Op::Reshape(_) => "reshape",
            Op::Pick(_) => "pick",
            Op::Clamp(..) => "clamp",
            Op::Detach => "detach",
        }
    }
}

struct Node<S> {
    op: Op<S>,
    inputs: Vec<Var>,
    value: Tensor<S>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

/// Tape of tensor operations in creation (topological) order.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op<S> {
        &self.nodes[v.0].op
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf nodes that accumulate gradients.
    pub fn leaves(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].op == Op::Leaf && self.nodes[i].requires_grad)
            .map(Var)
            .collect()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Records `op` applied to `inputs` and computes its forward value.
    pub fn apply(&mut self, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Op::Leaf => return Err(Error::Invalid("leaf nodes are created with Graph::leaf".into())),
            Op::MatMul | Op::Add | Op::Sub | Op::Mul => Some(2),
            Op::Concat(_) => None,
            _ => Some(1),
        };
        match arity {
            Some(n) if inputs.len() != n => {
                return Err(Error::shape(op.name(), format!("expected {n} inputs, got {}", inputs.len())))
            }
            None if inputs.is_empty() => return Err(Error::shape(op.name(), "no inputs")),
            _ => {}
        }
        let value = self.forward(&op, inputs)?;
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op != Op::Detach && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, inputs: inputs.to_vec(), value, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn broadcast(&self, op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<Broadcast> {
        if a.shape() == b.shape() {
            Ok(Broadcast::Same)
        } else if b.numel() == 1 {
            Ok(Broadcast::Scalar)
        } else if b.numel() == a.cols() && b.cols() == a.cols() {
            Ok(Broadcast::Row)
        } else {
            Err(Error::shape(op, format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape())))
        }
    }

    fn forward(&self, op: &Op<S>, inputs: &[Var]) -> Result<Tensor<S>> {
        let x = self.value(inputs[0]);
        let name = op.name();
        Ok(match op {
            Op::Leaf => unreachable!(),
            Op::MatMul => {
                let b = self.value(inputs[1]);
                if x.rank() != 2 || b.rank() != 2 || x.shape()[1] != b.shape()[0] {
                    return Err(Error::shape(name, format!("{:?} x {:?}", x.shape(), b.shape())));
                }
                let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
                Tensor::from_parts(vec![m, n], matmul(x.data(), b.data(), m, k, n))
            }
            Op::Add | Op::Sub | Op::Mul => {
                let b = self.value(inputs[1]);
                let mode = self.broadcast(name, x, b)?;
                let f: fn(S, S) -> S = match op {
                    Op::Add => |p, q| p + q,
                    Op::Sub => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let cols = x.cols();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let q = match mode {
                            Broadcast::Same => b.data()[i],
                            Broadcast::Row => b.data()[i % cols],
                            Broadcast::Scalar => b.data()[0],
                        };
                        f(p, q)
                    })
                    .collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Op::ScalarMul(s) => x.map(|v| v * *s),
            Op::AddScalar(s) => x.map(|v| v + *s),
            Op::Sigmoid => x.map(sigmoid),
            Op::Tanh => x.map(|v| v.tanh()),
            Op::Relu => x.map(|v| if v > S::zero() { v } else { S::zero() }),
            Op::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| v <= S::zero()) {
                    return Err(Error::Domain { op: name, detail: format!("log of non-positive value {bad}") });
                }
                x.map(|v| v.ln())
            }
            Op::Softmax => Tensor::from_parts(x.shape().to_vec(), softmax_rows(x.data(), x.cols(), false)),
            Op::LogSoftmax => Tensor::from_parts(x.shape().to_vec(), softmax_rows(x.data(), x.cols(), true)),
            Op::MeanAxis(axis) => {
                let (outer, n, inner) = split_axis(name, x.shape(), *axis)?;
                let mut out = vec![0.0f64; outer * inner];
                for o in 0..outer {
                    for a in 0..n {
                        let base = (o * n + a) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += x.data()[base + i].as_f64();
                        }
                    }
                }
                let mut shape = x.shape().to_vec();
                shape.remove(*axis);
                if shape.is_empty() {
                    shape.push(1);
                }
                Tensor::from_parts(shape, out.into_iter().map(|v| S::of(v / n as f64)).collect())
            }
            Op::Sum => {
                let total: f64 = x.data().iter().map(|v| v.as_f64()).sum();
                Tensor::scalar(S::of(total))
            }
            Op::L2Norm => {
                let cols = x.cols();
                let data = x
                    .data()
                    .chunks(cols)
                    .map(|row| S::of(row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()))
                    .collect();
                let shape = if x.rank() == 1 { vec![1] } else { x.shape()[..x.rank() - 1].to_vec() };
                Tensor::from_parts(shape, data)
            }
            Op::Concat(axis) => {
                let first = x.shape();
                if *axis >= first.len() {
                    return Err(Error::shape(name, format!("axis {axis} out of range for {first:?}")));
                }
                let mut total = 0;
                for v in inputs {
                    let s = self.shape(*v);
                    let compatible = s.len() == first.len()
                        && s.iter().zip(first).enumerate().all(|(d, (p, q))| d == *axis || p == q);
                    if !compatible {
                        return Err(Error::shape(name, format!("{s:?} incompatible with {first:?} on axis {axis}")));
                    }
                    total += s[*axis];
                }
                let outer: usize = first[..*axis].iter().product();
                let mut data = Vec::with_capacity(outer * total * first[axis + 1..].iter().product::<usize>());
                for o in 0..outer {
                    for v in inputs {
                        let t = self.value(*v);
                        let chunk = t.numel() / outer;
                        data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                let mut shape = first.to_vec();
                shape[*axis] = total;
                Tensor::from_parts(shape, data)
            }
            Op::Lookup(indices) => {
                if x.rank() != 2 {
                    return Err(Error::shape(name, format!("table must be 2-D, got {:?}", x.shape())));
                }
                if indices.is_empty() {
                    return Err(Error::shape(name, "no indices"));
                }
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let mut data = Vec::with_capacity(indices.len() * cols);
                for &i in indices {
                    if i >= rows {
                        return Err(Error::shape(name, format!("index {i} out of range for {rows} rows")));
                    }
                    data.extend_from_slice(&x.data()[i * cols..(i + 1) * cols]);
                }
                Tensor::from_parts(vec![indices.len(), cols], data)
            }
            Op::Reshape(shape) => x.reshaped(shape).map_err(|_| {
                Error::shape(name, format!("cannot reshape {:?} into {shape:?}", x.shape()))
            })?,
            Op::Pick(indices) => {
                let (rows, cols) = (x.rows(), x.cols());
                if indices.len() != rows {
                    return Err(Error::shape(name, format!("{} indices for {rows} rows", indices.len())));
                }
                let mut data = Vec::with_capacity(rows);
                for (r, &i) in indices.iter().enumerate() {
                    if i >= cols {
                        return Err(Error::shape(name, format!("index {i} out of range for {cols} columns")));
                    }
                    data.push(x.data()[r * cols + i]);
                }
                Tensor::from_parts(vec![rows], data)
            }
            Op::Clamp(lo, hi) => x.map(|v| v.max(*lo).min(*hi)),
            Op::Detach => x.clone(),
        })
    }

    /// Reverse sweep from a scalar `loss`. Every gradient-tracking leaf gets
    /// an entry, zero-filled when it does not influence the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let root = self.value(loss);
        if !root.is_scalar() {
            return Err(Error::NotScalar(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.op == Op::Leaf {
                continue;
            }
            let Some(upstream) = grads[id].take() else { continue };
            for (slot, contrib) in self.input_grads(node, &upstream) {
                if !contrib.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                let target = node.inputs[slot];
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += *c),
                    empty => *empty = Some(contrib),
                }
            }
        }

        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if node.op != Op::Leaf || !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(data) => Tensor::from_parts(shape, data),
                    None => Tensor::zeros(&shape),
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    /// Gradient contributions of `node` to each of its inputs, as (slot, grad).
    fn input_grads(&self, node: &Node<S>, up: &[S]) -> Vec<(usize, Vec<S>)> {
        let x = self.value(node.inputs[0]);
        let y = &node.value;
        let elementwise = |f: &dyn Fn(usize) -> S| (0..up.len()).map(|i| up[i] * f(i)).collect::<Vec<S>>();
        match &node.op {
            Op::Leaf | Op::Detach => Vec::new(),
            Op::MatMul => {
                let b = self.value(node.inputs[1]);
                let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
                let mut da = vec![S::zero(); m * k];
                for i in 0..m {
                    let urow = &up[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let brow = &b.data()[kk * n..(kk + 1) * n];
                        let dot: f64 = urow.iter().zip(brow).map(|(u, w)| u.as_f64() * w.as_f64()).sum();
                        da[i * k + kk] = S::of(dot);
                    }
                }
                let mut db = vec![0.0f64; k * n];
                for i in 0..m {
                    let urow = &up[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let a = x.data()[i * k + kk].as_f64();
                        if a == 0.0 {
                            continue;
                        }
                        let drow = &mut db[kk * n..(kk + 1) * n];
                        for (d, u) in drow.iter_mut().zip(urow) {
                            *d += a * u.as_f64();
                        }
                    }
                }
                vec![(0, da), (1, db.into_iter().map(S::of).collect())]
            }
            Op::Add | Op::Sub | Op::Mul => {
                let b = self.value(node.inputs[1]);
                let mode = self.broadcast("backward", x, b).expect("checked in forward");
                let cols = x.cols();
                let bval = |i: usize| match mode {
                    Broadcast::Same => b.data()[i],
                    Broadcast::Row => b.data()[i % cols],
                    Broadcast::Scalar => b.data()[0],
                };
                let (da, db_full): (Vec<S>, Vec<S>) = match node.op {
                    Op::Add => (up.to_vec(), up.to_vec()),
                    Op::Sub => (up.to_vec(), up.iter().map(|&u| -u).collect()),
                    _ => (elementwise(&bval), elementwise(&|i| x.data()[i])),
                };
                let db = match mode {
                    Broadcast::Same => db_full,
                    Broadcast::Row => {
                        let mut acc = vec![0.0f64; cols];
                        for (i, v) in db_full.iter().enumerate() {
                            acc[i % cols] += v.as_f64();
                        }
                        acc.into_iter().map(S::of).collect()
                    }
                    Broadcast::Scalar => vec![S::of(db_full.iter().map(|v| v.as_f64()).sum())],
                };
                vec![(0, da), (1, db)]
            }
            Op::ScalarMul(s) => vec![(0, up.iter().map(|&u| u * *s).collect())],
            Op::AddScalar(_) | Op::Reshape(_) => vec![(0, up.to_vec())],
            Op::Sigmoid => {
                let yd = y.data();
                vec![(0, elementwise(&|i| yd[i] * (S::one() - yd[i])))]
            }
            Op::Tanh => {
                let yd = y.data();
                vec![(0, elementwise(&|i| S::one() - yd[i] * yd[i]))]
            }
            Op::Relu => vec![(0, elementwise(&|i| if x.data()[i] > S::zero() { S::one() } else { S::zero() }))],
            Op::Log => vec![(0, elementwise(&|i| S::one() / x.data()[i]))],
            Op::Softmax => {
                let cols = y.cols();
                let mut dx = Vec::with_capacity(up.len());
                for (yrow, urow) in y.data().chunks(cols).zip(up.chunks(cols)) {
                    let dot: f64 = yrow.iter().zip(urow).map(|(p, u)| p.as_f64() * u.as_f64()).sum();
                    let dot = S::of(dot);
                    dx.extend(yrow.iter().zip(urow).map(|(&p, &u)| p * (u - dot)));
                }
                vec![(0, dx)]
            }
            Op::LogSoftmax => {
                let cols = y.cols();
                let mut dx = Vec::with_capacity(up.len());
                for (yrow, urow) in y.data().chunks(cols).zip(up.chunks(cols)) {
                    let total = S::of(urow.iter().map(|u| u.as_f64()).sum());
                    dx.extend(yrow.iter().zip(urow).map(|(&ly, &u)| u - ly.exp() * total));
                }
                vec![(0, dx)]
            }
            Op::MeanAxis(axis) => {
                let (outer, n, inner) = split_axis("mean_axis", x.shape(), *axis).expect("checked in forward");
                let scale = S::one() / S::of(n as f64);
                let mut dx = vec![S::zero(); x.numel()];
                for o in 0..outer {
                    for a in 0..n {
                        let base = (o * n + a) * inner;
                        for i in 0..inner {
                            dx[base + i] = up[o * inner + i] * scale;
                        }
                    }
                }
                vec![(0, dx)]
            }
            Op::Sum => vec![(0, vec![up[0]; x.numel()])],
            Op::L2Norm => {
                let cols = x.cols();
                let mut dx = Vec::with_capacity(x.numel());
                for (r, row) in x.data().chunks(cols).enumerate() {
                    let norm = y.data()[r];
                    if norm > S::zero() {
                        dx.extend(row.iter().map(|&v| up[r] * v / norm));
                    } else {
                        // subgradient at the origin
                        dx.extend(std::iter::repeat(S::zero()).take(cols));
                    }
                }
                vec![(0, dx)]
            }
            Op::Concat(axis) => {
                let outer: usize = x.shape()[..*axis].iter().product();
                let chunks: Vec<usize> = node.inputs.iter().map(|v| self.value(*v).numel() / outer).collect();
                let row: usize = chunks.iter().sum();
                let mut parts: Vec<Vec<S>> = chunks.iter().map(|c| Vec::with_capacity(c * outer)).collect();
                for o in 0..outer {
                    let mut offset = o * row;
                    for (p, &c) in parts.iter_mut().zip(&chunks) {
                        p.extend_from_slice(&up[offset..offset + c]);
                        offset += c;
                    }
                }
                parts.into_iter().enumerate().collect()
            }
            Op::Lookup(indices) => {
                let cols = x.shape()[1];
                let mut dx = vec![S::zero(); x.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        dx[i * cols + c] += up[r * cols + c];
                    }
                }
                vec![(0, dx)]
            }
            Op::Pick(indices) => {
                let cols = x.cols();
                let mut dx = vec![S::zero(); x.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    dx[r * cols + i] = up[r];
                }
                vec![(0, dx)]
            }
            Op::Clamp(lo, hi) => {
                let xd = x.data();
                vec![(0, elementwise(&|i| if xd[i] >= *lo && xd[i] <= *hi { S::one() } else { S::zero() }))]
            }
        }
    }

    // Convenience wrappers around `apply`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        self.apply(Op::ScalarMul(s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Result<Var> {
        self.apply(Op::AddScalar(s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -S::one())
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_scalar(n, S::one())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }

    /// `ln(clamp(a, lo, 1))`.
    pub fn log_clamped(&mut self, a: Var, lo: S) -> Result<Var> {
        let c = self.clamp(a, lo, S::one())?;
        self.log(c)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::MeanAxis(axis), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, S::one() / S::of(n as f64))
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::L2Norm, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat(axis), parts)
    }

    pub fn lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.apply(Op::Lookup(indices.to_vec()), &[table])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.apply(Op::Pick(indices.to_vec()), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Result<Var> {
        self.apply(Op::Clamp(lo, hi), &[a])
    }

    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Detach, &[a])
    }

    /// Sums a list of scalars left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or_else(|| Error::Invalid("empty sum".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }
}

/// Gradients of a scalar with respect to the leaves of a graph.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a tracked leaf. Panics for untracked or interior nodes.
    pub fn wrt(&self, v: Var) -> &Tensor<S> {
        self.get(v).unwrap_or_else(|| panic!("no gradient recorded for node {}", v.0))
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for kk in 0..k {
            let av = a[i * k + kk].as_f64();
            if av == 0.0 {
                continue;
            }
            for (o, w) in acc.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += av * w.as_f64();
            }
        }
        out.extend(acc.iter().map(|&v| S::of(v)));
    }
    out
}

fn softmax_rows<S: Scalar>(x: &[S], cols: usize, log: bool) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let total: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        if log {
            let lse = total.ln();
            out.extend(row.iter().map(|v| S::of(v.as_f64() - max - lse)));
        } else {
            out.extend(row.iter().map(|v| S::of((v.as_f64() - max).exp() / total)));
        }
    }
    out
}

fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}
