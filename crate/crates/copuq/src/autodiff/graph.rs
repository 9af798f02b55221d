//! Reverse-mode automatic differentiation over a static computation graph.
//!
//! A [`Graph`] is built once from a fixed primitive set (affine map,
//! elementwise arithmetic, sigmoid, exp, ln, square, sum/mean reductions,
//! concatenation, elementwise max, clamp) and stays immutable afterwards.
//! Node ids are topological by construction, so a forward pass is a single
//! in-order sweep and a backward pass a single reverse sweep.
//!
//! Leaves are named tensors: parameters (trainable) and inputs (bound per
//! evaluation). [`Evaluation::backward`] returns exact gradients for every
//! leaf reachable from the requested outputs, inputs included — gradients
//! with respect to inputs are what drives the perturbation search.

use std::collections::{BTreeMap, HashMap};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param(String),
    /// y = x·W + b with x: [n], W: [n, m], b: [m].
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Max(NodeId, NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    MaxScalar(NodeId, f64),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat(Vec<NodeId>),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
}

impl Op {
    fn describe(&self) -> String {
        match self {
            Op::Input(n) => format!("input {n}"),
            Op::Param(n) => format!("param {n}"),
            Op::Affine { .. } => "affine".into(),
            Op::Add(..) => "add".into(),
            Op::Sub(..) => "sub".into(),
            Op::Mul(..) => "mul".into(),
            Op::Max(..) => "max".into(),
            Op::AddScalar(..) => "add_scalar".into(),
            Op::MulScalar(..) => "mul_scalar".into(),
            Op::MaxScalar(..) => "max_scalar".into(),
            Op::Sigmoid(_) => "sigmoid".into(),
            Op::Exp(_) => "exp".into(),
            Op::Ln(_) => "ln".into(),
            Op::Square(_) => "square".into(),
            Op::Sum(_) => "sum".into(),
            Op::Mean(_) => "mean".into(),
            Op::Concat(_) => "concat".into(),
            Op::Clamp { .. } => "clamp".into(),
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) => vec![],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Max(a, b) => vec![*a, *b],
            Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::MaxScalar(a, _)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Clamp { x: a, .. } => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Trainable leaf values, keyed by name. Iteration order is fixed
/// (sorted by name) so parameter updates are deterministic.
#[derive(Debug, Clone, Default)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-evaluation input values, keyed by input leaf name.
#[derive(Debug, Clone, Default)]
pub struct Bindings(HashMap<String, Tensor>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: Tensor) -> &mut Self {
        self.0.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }
}

/// Gradients of one scalar output with respect to leaf tensors,
/// keyed by leaf name. Each gradient has the shape of its leaf.
#[derive(Debug, Clone)]
pub struct GradientMap(BTreeMap<String, Tensor>);

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

/// An immutable computation graph over named leaves.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape });
        id
    }

    fn push_leaf(&mut self, op: Op, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.leaves.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate leaf name `{name}`"
            )));
        }
        let id = self.push(op, shape.to_vec());
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Declare an input leaf, bound per evaluation.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.push_leaf(Op::Input(name.to_string()), name, shape)
    }

    /// Declare a parameter leaf, supplied from [`Params`].
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.push_leaf(Op::Param(name.to_string()), name, shape)
    }

    /// y = x·W + b, with x: [n], W: [n, m], b: [m], result [m].
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let ok = xs.len() == 1
            && ws.len() == 2
            && bs.len() == 1
            && ws[0] == xs[0]
            && ws[1] == bs[0];
        if !ok {
            return Err(Error::ShapeMismatch {
                context: "affine",
                expected: vec![xs[0], bs[0]],
                got: ws.to_vec(),
            });
        }
        let m = bs[0];
        Ok(self.push(Op::Affine { x, w, b }, vec![m]))
    }

    fn binary_shape(&self, a: NodeId, b: NodeId, context: &'static str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (la, lb): (usize, usize) = (sa.iter().product(), sb.iter().product());
        if sa == sb {
            Ok(sa.to_vec())
        } else if la == 1 {
            Ok(sb.to_vec())
        } else if lb == 1 {
            Ok(sa.to_vec())
        } else {
            Err(Error::ShapeMismatch {
                context,
                expected: sa.to_vec(),
                got: sb.to_vec(),
            })
        }
    }

    /// Elementwise sum. One operand may be a single-element tensor, which
    /// broadcasts over the other.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    /// Elementwise maximum. Ties propagate the gradient to the first operand.
    pub fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape(a, b, "max")?;
        Ok(self.push(Op::Max(a, b), shape))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::AddScalar(a, c), shape)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::MulScalar(a, c), shape)
    }

    /// Elementwise max against a constant; the constant side carries no
    /// gradient and ties take the identity branch.
    pub fn max_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::MaxScalar(a, c), shape)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp(a), shape)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Ln(a), shape)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Square(a), shape)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), vec![1])
    }

    /// Concatenate 1-D tensors into one 1-D tensor.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("concat"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 1 {
                return Err(Error::ShapeMismatch {
                    context: "concat (1-D only)",
                    expected: vec![s.iter().product()],
                    got: s.to_vec(),
                });
            }
            total += s[0];
        }
        Ok(self.push(Op::Concat(parts.to_vec()), vec![total]))
    }

    /// Clamp entries into `[lo, hi]`. The gradient is identity strictly
    /// inside and at the boundary, zero outside.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!(
                "clamp bounds out of order: [{lo}, {hi}]"
            )));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Clamp { x, lo, hi }, shape))
    }

    /// Evaluate the ancestor closure of `requested` in topological order.
    ///
    /// Only nodes needed for the requested outputs are computed, so inputs
    /// outside that closure may stay unbound. Any non-finite value is an
    /// error, never a silent result.
    pub fn forward(
        &self,
        params: &Params,
        inputs: &Bindings,
        requested: &[NodeId],
    ) -> Result<Evaluation<'_>> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<usize> = requested.iter().map(|id| id.0).collect();
        while let Some(i) = stack.pop() {
            if needed[i] {
                continue;
            }
            needed[i] = true;
            for dep in self.nodes[i].op.inputs() {
                stack.push(dep.0);
            }
        }

        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for i in 0..self.nodes.len() {
            if !needed[i] {
                continue;
            }
            let node = &self.nodes[i];
            let value = self.eval_node(node, &values, params, inputs)?;
            if value.shape() != node.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: "forward (bound leaf shape)",
                    expected: node.shape.clone(),
                    got: value.shape().to_vec(),
                });
            }
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: node.op.describe(),
                });
            }
            values[i] = Some(value);
        }

        Ok(Evaluation {
            graph: self,
            values,
        })
    }

    fn eval_node(
        &self,
        node: &Node,
        values: &[Option<Tensor>],
        params: &Params,
        inputs: &Bindings,
    ) -> Result<Tensor> {
        let val = |id: NodeId| values[id.0].as_ref().expect("topological order");
        Ok(match &node.op {
            Op::Input(name) => inputs
                .get(name)
                .ok_or_else(|| Error::UnboundInput(name.clone()))?
                .clone(),
            Op::Param(name) => params
                .get(name)
                .ok_or_else(|| Error::UnknownLeaf(name.clone()))?
                .clone(),
            Op::Affine { x, w, b } => {
                let (x, w, b) = (val(*x), val(*w), val(*b));
                let n = x.len();
                let m = b.len();
                let mut out = b.data().to_vec();
                let wd = w.data();
                for i in 0..n {
                    let xi = x.data()[i];
                    if xi == 0.0 {
                        continue;
                    }
                    let row = &wd[i * m..(i + 1) * m];
                    for (o, wv) in out.iter_mut().zip(row) {
                        *o += xi * wv;
                    }
                }
                Tensor::new(vec![m], out)?
            }
            Op::Add(a, b) => broadcast_zip(val(*a), val(*b), |x, y| x + y),
            Op::Sub(a, b) => broadcast_zip(val(*a), val(*b), |x, y| x - y),
            Op::Mul(a, b) => broadcast_zip(val(*a), val(*b), |x, y| x * y),
            Op::Max(a, b) => broadcast_zip(val(*a), val(*b), f64::max),
            Op::AddScalar(a, c) => map(val(*a), |x| x + c),
            Op::MulScalar(a, c) => map(val(*a), |x| x * c),
            Op::MaxScalar(a, c) => map(val(*a), |x| x.max(*c)),
            Op::Sigmoid(a) => map(val(*a), |x| sigmoid(x)),
            Op::Exp(a) => map(val(*a), |x| x.exp()),
            Op::Ln(a) => map(val(*a), |x| x.ln()),
            Op::Square(a) => map(val(*a), |x| x * x),
            Op::Sum(a) => Tensor::scalar(val(*a).data().iter().sum()),
            Op::Mean(a) => {
                let t = val(*a);
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            }
            Op::Concat(parts) => {
                let mut data = Vec::new();
                for p in parts {
                    data.extend_from_slice(val(*p).data());
                }
                Tensor::from_vec(data)
            }
            Op::Clamp { x, lo, hi } => map(val(*x), |v| v.clamp(*lo, *hi)),
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        .expect("same length")
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        Tensor::new(
            a.shape().to_vec(),
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
        .expect("same length")
    } else if a.len() == 1 {
        let x = a.data()[0];
        map(b, |y| f(x, y))
    } else {
        let y = b.data()[0];
        map(a, |x| f(x, y))
    }
}

/// Result of a forward pass; holds the values of all evaluated nodes.
pub struct Evaluation<'g> {
    graph: &'g Graph,
    values: Vec<Option<Tensor>>,
}

impl Evaluation<'_> {
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.values[id.0].as_ref().ok_or(Error::NotEvaluated(id.0))
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.value(id)?.item()
    }

    /// Reverse sweep from a scalar node. Gradients accumulate by summation
    /// when a node feeds several consumers. Returns a gradient for every
    /// leaf inside the evaluated closure (zeros when the output does not
    /// depend on it).
    pub fn backward(&self, output: NodeId) -> Result<GradientMap> {
        let out_val = self.value(output)?;
        if !out_val.is_scalar() {
            return Err(Error::NonScalarOutput {
                node: output.0,
                shape: out_val.shape().to_vec(),
            });
        }

        let n = self.graph.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut map = BTreeMap::new();
        for (name, id) in &self.graph.leaves {
            if let Some(value) = &self.values[id.0] {
                let grad = grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                map.insert(name.clone(), grad);
            }
        }
        Ok(GradientMap(map))
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.graph.nodes[i];
        let val = |id: NodeId| -> Result<&Tensor> { self.value(id) };
        let mut acc = |id: NodeId, contribution: Contribution<'_>| {
            let shape = self.graph.nodes[id.0].shape.clone();
            let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            contribution.add_into(slot);
        };

        match &node.op {
            Op::Input(_) | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (val(*x)?, val(*w)?);
                let n = xv.len();
                let m = g.len();
                let gd = g.data();
                let wd = wv.data();
                // dx[i] = sum_j g[j] * w[i, j]
                {
                    let shape = self.graph.nodes[x.0].shape.clone();
                    let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(&shape));
                    let dx = slot.data_mut();
                    for i in 0..n {
                        let row = &wd[i * m..(i + 1) * m];
                        dx[i] += row.iter().zip(gd).map(|(w, g)| w * g).sum::<f64>();
                    }
                }
                // dw[i, j] = x[i] * g[j]
                {
                    let shape = self.graph.nodes[w.0].shape.clone();
                    let slot = grads[w.0].get_or_insert_with(|| Tensor::zeros(&shape));
                    let dw = slot.data_mut();
                    for i in 0..n {
                        let xi = xv.data()[i];
                        if xi == 0.0 {
                            continue;
                        }
                        let row = &mut dw[i * m..(i + 1) * m];
                        for (d, gj) in row.iter_mut().zip(gd) {
                            *d += xi * gj;
                        }
                    }
                }
                acc(*b, Contribution::dense(gd.to_vec()));
            }
            Op::Add(a, b) => {
                acc(*a, Contribution::from_upstream(g));
                acc(*b, Contribution::from_upstream(g));
            }
            Op::Sub(a, b) => {
                acc(*a, Contribution::from_upstream(g));
                acc(*b, Contribution::scaled_upstream(g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a)?, val(*b)?);
                acc(*a, Contribution::product(g, bv));
                acc(*b, Contribution::product(g, av));
            }
            Op::Max(a, b) => {
                let (av, bv) = (val(*a)?, val(*b)?);
                let pick_a: Vec<f64> = masked(g, av, bv, |x, y| x >= y);
                let pick_b: Vec<f64> = masked(g, av, bv, |x, y| x < y);
                acc(*a, Contribution::dense_maybe_reduce(pick_a));
                acc(*b, Contribution::dense_maybe_reduce(pick_b));
            }
            Op::AddScalar(a, _) => acc(*a, Contribution::from_upstream(g)),
            Op::MulScalar(a, c) => acc(*a, Contribution::scaled_upstream(g, *c)),
            Op::MaxScalar(a, c) => {
                let av = val(*a)?;
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gi, &x)| if x >= *c { gi } else { 0.0 })
                    .collect();
                acc(*a, Contribution::dense(data));
            }
            Op::Sigmoid(a) => {
                let out = &self.values[i].as_ref().expect("evaluated");
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gi, &s)| gi * s * (1.0 - s))
                    .collect();
                acc(*a, Contribution::dense(data));
            }
            Op::Exp(a) => {
                let out = &self.values[i].as_ref().expect("evaluated");
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gi, &e)| gi * e)
                    .collect();
                acc(*a, Contribution::dense(data));
            }
            Op::Ln(a) => {
                let av = val(*a)?;
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gi, &x)| gi / x)
                    .collect();
                acc(*a, Contribution::dense(data));
            }
            Op::Square(a) => {
                let av = val(*a)?;
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gi, &x)| 2.0 * x * gi)
                    .collect();
                acc(*a, Contribution::dense(data));
            }
            Op::Sum(a) => {
                let g0 = g.data()[0];
                acc(*a, Contribution::Broadcast(g0));
            }
            Op::Mean(a) => {
                let len = val(*a)?.len();
                let g0 = g.data()[0] / len as f64;
                acc(*a, Contribution::Broadcast(g0));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.graph.nodes[p.0].shape[0];
                    let slice = g.data()[offset..offset + len].to_vec();
                    acc(*p, Contribution::dense(slice));
                    offset += len;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x)?;
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &v)| if v >= *lo && v <= *hi { gi } else { 0.0 })
                    .collect();
                acc(*x, Contribution::dense(data));
            }
        }
        Ok(())
    }
}

/// Gradient contribution flowing into a node; handles the scalar-broadcast
/// cases by sum-reducing onto single-element operands.
enum Contribution<'a> {
    Upstream(&'a Tensor, f64),
    Dense(Vec<f64>),
    Broadcast(f64),
    Product(&'a Tensor, &'a Tensor),
}

impl<'a> Contribution<'a> {
    fn from_upstream(g: &'a Tensor) -> Self {
        Contribution::Upstream(g, 1.0)
    }

    fn scaled_upstream(g: &'a Tensor, c: f64) -> Self {
        Contribution::Upstream(g, c)
    }

    fn dense(data: Vec<f64>) -> Self {
        Contribution::Dense(data)
    }

    fn dense_maybe_reduce(data: Vec<f64>) -> Self {
        Contribution::Dense(data)
    }

    fn product(g: &'a Tensor, other: &'a Tensor) -> Self {
        Contribution::Product(g, other)
    }

    fn add_into(self, slot: &mut Tensor) {
        let n = slot.len();
        let dst = slot.data_mut();
        match self {
            Contribution::Upstream(g, c) => {
                if g.len() == n {
                    for (d, &gi) in dst.iter_mut().zip(g.data()) {
                        *d += c * gi;
                    }
                } else {
                    // operand was broadcast from a single element
                    dst[0] += c * g.data().iter().sum::<f64>();
                }
            }
            Contribution::Dense(data) => {
                if data.len() == n {
                    for (d, gi) in dst.iter_mut().zip(data) {
                        *d += gi;
                    }
                } else {
                    dst[0] += data.iter().sum::<f64>();
                }
            }
            Contribution::Broadcast(v) => {
                for d in dst.iter_mut() {
                    *d += v;
                }
            }
            Contribution::Product(g, other) => {
                // d(a*b)/da = g * b, with either side possibly broadcast
                let gd = g.data();
                let od = other.data();
                if n == gd.len() {
                    if od.len() == n {
                        for ((d, &gi), &ov) in dst.iter_mut().zip(gd).zip(od) {
                            *d += gi * ov;
                        }
                    } else {
                        let ov = od[0];
                        for (d, &gi) in dst.iter_mut().zip(gd) {
                            *d += gi * ov;
                        }
                    }
                } else {
                    // this operand is the broadcast single element
                    if od.len() == gd.len() {
                        dst[0] += gd.iter().zip(od).map(|(&gi, &ov)| gi * ov).sum::<f64>();
                    } else {
                        dst[0] += od[0] * gd.iter().sum::<f64>();
                    }
                }
            }
        }
    }
}

fn masked(g: &Tensor, a: &Tensor, b: &Tensor, take: impl Fn(f64, f64) -> bool) -> Vec<f64> {
    let av = |i: usize| {
        if a.len() == 1 {
            a.data()[0]
        } else {
            a.data()[i]
        }
    };
    let bv = |i: usize| {
        if b.len() == 1 {
            b.data()[0]
        } else {
            b.data()[i]
        }
    };
    g.data()
        .iter()
        .enumerate()
        .map(|(i, &gi)| if take(av(i), bv(i)) { gi } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_scalar(g: &Graph, params: &Params, inputs: &Bindings, id: NodeId) -> f64 {
        g.forward(params, inputs, &[id]).unwrap().scalar(id).unwrap()
    }

    #[test]
    fn square_forward() {
        let mut g = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let y = g.square(x);
        let mut b = Bindings::new();
        b.bind("x", Tensor::scalar(3.0));
        assert_eq!(eval_scalar(&g, &Params::new(), &b, y), 9.0);
    }

    #[test]
    fn sigmoid_midpoint() {
        let mut g = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let y = g.sigmoid(x);
        let mut b = Bindings::new();
        b.bind("x", Tensor::scalar(0.0));
        assert_eq!(eval_scalar(&g, &Params::new(), &b, y), 0.5);
    }

    #[test]
    fn mean_reduction() {
        let mut g = Graph::new();
        let x = g.input("x", &[4]).unwrap();
        let y = g.mean(x);
        let mut b = Bindings::new();
        b.bind("x", Tensor::from_vec(vec![1.0, 2.0, 3.0, 6.0]));
        assert_eq!(eval_scalar(&g, &Params::new(), &b, y), 3.0);
    }

    #[test]
    fn cube_gradient() {
        // y = x^3 = x * x^2, dy/dx = 3x^2 = 12 at x = 2
        let mut g = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let x2 = g.square(x);
        let y = g.mul(x, x2).unwrap();
        let mut b = Bindings::new();
        b.bind("x", Tensor::scalar(2.0));
        let eval = g.forward(&Params::new(), &b, &[y]).unwrap();
        assert_eq!(eval.scalar(y).unwrap(), 8.0);
        let grads = eval.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().data()[0], 12.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let y = g.sigmoid(x);
        let mut b = Bindings::new();
        b.bind("x", Tensor::scalar(0.0));
        let eval = g.forward(&Params::new(), &b, &[y]).unwrap();
        let grads = eval.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().data()[0], 0.25);
    }

    #[test]
    fn affine_sum_gradient_is_input() {
        // y = sum(x·W) with x the 3-vector of ones: dy/dW[i][j] = x[i] = 1
        let mut g = Graph::new();
        let x = g.input("x", &[3]).unwrap();
        let w = g.param("w", &[3, 2]).unwrap();
        let bias = g.param("b", &[2]).unwrap();
        let h = g.affine(x, w, bias).unwrap();
        let y = g.sum(h);

        let mut params = Params::new();
        params.insert("w", Tensor::zeros(&[3, 2]));
        params.insert("b", Tensor::zeros(&[2]));
        let mut b = Bindings::new();
        b.bind("x", Tensor::from_vec(vec![1.0, 1.0, 1.0]));

        let eval = g.forward(&params, &b, &[y]).unwrap();
        let grads = eval.backward(y).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.0; 6]);
        assert_eq!(grads.get("b").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn gradient_accumulates_over_consumers() {
        // y = x + x^2; dy/dx = 1 + 2x = 7 at x = 3
        let mut g = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let x2 = g.square(x);
        let y = g.add(x, x2).unwrap();
        let mut b = Bindings::new();
        b.bind("x", Tensor::scalar(3.0));
        let eval = g.forward(&Params::new(), &b, &[y]).unwrap();
        let grads = eval.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().data()[0], 7.0);
    }

    #[test]
    fn scalar_broadcast_mul() {
        let mut g = Graph::new();
        let v = g.input("v", &[3]).unwrap();
        let s = g.input("s", &[1]).unwrap();
        let p = g.mul(v, s).unwrap();
        let y = g.sum(p);
        let mut b = Bindings::new();
        b.bind("v", Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        b.bind("s", Tensor::scalar(2.0));
        let eval = g.forward(&Params::new(), &b, &[y]).unwrap();
        assert_eq!(eval.scalar(y).unwrap(), 12.0);
        let grads = eval.backward(y).unwrap();
        assert_eq!(grads.get("s").unwrap().data()[0], 6.0);
        assert_eq!(grads.get("v").unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn unbound_needed_input_errors() {
        let mut g = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let y = g.square(x);
        let err = g.forward(&Params::new(), &Bindings::new(), &[y]);
        assert!(matches!(err, Err(Error::UnboundInput(_))));
    }

    #[test]
    fn lazy_forward_skips_unrequested_branches() {
        let mut g = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let unused = g.input("unused", &[1]).unwrap();
        let _dead = g.square(unused);
        let y = g.square(x);
        let mut b = Bindings::new();
        b.bind("x", Tensor::scalar(2.0));
        // `unused` stays unbound; the branch is never needed
        assert_eq!(eval_scalar(&g, &Params::new(), &b, y), 4.0);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let y = g.ln(x);
        let mut b = Bindings::new();
        b.bind("x", Tensor::scalar(-1.0));
        let err = g.forward(&Params::new(), &b, &[y]);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]).unwrap();
        let y = g.square(x);
        let mut b = Bindings::new();
        b.bind("x", Tensor::from_vec(vec![1.0, 2.0]));
        let eval = g.forward(&Params::new(), &b, &[y]).unwrap();
        assert!(matches!(
            eval.backward(y),
            Err(Error::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn clamp_gradient_zero_outside_identity_inside() {
        let mut g = Graph::new();
        let x = g.input("x", &[3]).unwrap();
        let c = g.clamp(x, 0.0, 1.0).unwrap();
        let y = g.sum(c);
        let mut b = Bindings::new();
        b.bind("x", Tensor::from_vec(vec![-0.5, 0.5, 1.0]));
        let eval = g.forward(&Params::new(), &b, &[y]).unwrap();
        let grads = eval.backward(y).unwrap();
        // boundary value 1.0 takes the interior branch
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut g = Graph::new();
        let a = g.input("a", &[2]).unwrap();
        let b_in = g.input("b", &[1]).unwrap();
        let cat = g.concat(&[a, b_in]).unwrap();
        let sq = g.square(cat);
        let y = g.sum(sq);
        let mut b = Bindings::new();
        b.bind("a", Tensor::from_vec(vec![1.0, 2.0]));
        b.bind("b", Tensor::from_vec(vec![3.0]));
        let eval = g.forward(&Params::new(), &b, &[y]).unwrap();
        assert_eq!(eval.scalar(y).unwrap(), 14.0);
        let grads = eval.backward(y).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[2.0, 4.0]);
        assert_eq!(grads.get("b").unwrap().data(), &[6.0]);
    }
}
