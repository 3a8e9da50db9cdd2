//! Static computation graph with forward evaluation and reverse-mode gradients.
//!
//! A [`Graph`] is built once (shape inference happens at build time, so shape
//! errors surface before any data is touched) and can then be evaluated any
//! number of times, in either precision, against a [`Feed`] of leaf values.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::array::{numel, Array};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    Param,
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf {
        name: String,
        kind: LeafKind,
    },
    Zeros,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    Exp(NodeId),
    Ln(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    Sqrt(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    MaxConst {
        x: NodeId,
        c: f64,
    },
    /// `x [n, in] · wᵀ [in, out] + b [out]`.
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    /// NCHW input, OIKK kernel, SAME zero padding, output extent `ceil(in / stride)`.
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    },
    Upsample2(NodeId),
    /// Concatenation along axis 1.
    Concat(Vec<NodeId>),
    /// `[n, d] -> [n, d, h, w]`, every cell a copy of the row.
    Tile {
        x: NodeId,
        h: usize,
        w: usize,
    },
    /// Expands size-1 axes to the node's shape (ranks must agree).
    Broadcast(NodeId),
    Sum {
        x: NodeId,
        axes: Vec<usize>,
    },
    Mean {
        x: NodeId,
        axes: Vec<usize>,
    },
    Detach(NodeId),
    Reshape(NodeId),
    /// `len` consecutive entries along axis 1 starting at `start`.
    Narrow {
        x: NodeId,
        start: usize,
        len: usize,
    },
}

impl Op {
    fn kind_name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Zeros => "zeros",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Softplus(_) => "softplus",
            Op::Relu(_) => "relu",
            Op::Sqrt(_) => "sqrt",
            Op::Clamp { .. } => "clamp",
            Op::MaxConst { .. } => "max_const",
            Op::Affine { .. } => "affine",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2(_) => "upsample2",
            Op::Concat(_) => "concat",
            Op::Tile { .. } => "tile",
            Op::Broadcast(_) => "broadcast",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Detach(_) => "detach",
            Op::Reshape(_) => "reshape",
            Op::Narrow { .. } => "narrow",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Zeros => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddConst(a, _)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Softplus(a)
            | Op::Relu(a)
            | Op::Sqrt(a)
            | Op::Upsample2(a)
            | Op::Broadcast(a)
            | Op::Detach(a)
            | Op::Reshape(a) => vec![*a],
            Op::Clamp { x, .. }
            | Op::MaxConst { x, .. }
            | Op::Tile { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Narrow { x, .. } => vec![*x],
            Op::Affine { x, w, b } | Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
    pub label: String,
}

/// Softplus inputs above this pass through unchanged.
const SOFTPLUS_LINEAR_ABOVE: f64 = 30.0;

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_names: HashSet<String>,
}

/// Leaf values keyed by leaf name.
pub type Feed<T> = HashMap<String, Array<T>>;

/// Leaf gradients keyed by leaf name.
pub type Gradients<T> = BTreeMap<String, Array<T>>;

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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    /// Renames a node for diagnostics.
    pub fn set_label(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id.0].label = label.into();
    }

    /// `(name, kind, shape)` for every leaf in creation order.
    pub fn leaves(&self) -> impl Iterator<Item = (&str, LeafKind, &[usize])> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Leaf { name, kind } => Some((name.as_str(), *kind, n.shape.as_slice())),
            _ => None,
        })
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let label = match &op {
            Op::Leaf { name, .. } => name.clone(),
            other => format!("{}#{}", other.kind_name(), id.0),
        };
        self.nodes.push(Node { op, shape, label });
        id
    }

    fn next_label(&self, kind: &str) -> String {
        format!("{kind}#{}", self.nodes.len())
    }

    fn leaf(&mut self, name: &str, shape: &[usize], kind: LeafKind) -> Result<NodeId> {
        if !self.leaf_names.insert(name.to_string()) {
            return Err(Error::contract(name, "duplicate leaf name"));
        }
        if shape.contains(&0) {
            return Err(Error::contract(name, format!("zero extent in {shape:?}")));
        }
        Ok(self.push(
            Op::Leaf {
                name: name.to_string(),
                kind,
            },
            shape.to_vec(),
        ))
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, LeafKind::Input)
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, LeafKind::Param)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> NodeId {
        self.push(Op::Zeros, shape.to_vec())
    }

    fn same_shape(&self, kind: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::contract(
                self.next_label(kind),
                format!("operand shapes differ: {sa:?} vs {sb:?}"),
            ));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    fn unary(&mut self, op: Op, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(op, s)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(Op::Scale(x, c), x)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(Op::AddConst(x, c), x)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Exp(x), x)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Ln(x), x)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Softplus(x), x)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Relu(x), x)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sqrt(x), x)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mul(x, x), self.shape(x).to_vec())
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(Error::contract(
                self.next_label("clamp"),
                format!("empty range [{lo}, {hi}]"),
            ));
        }
        Ok(self.unary(Op::Clamp { x, lo, hi }, x))
    }

    pub fn max_const(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(Op::MaxConst { x, c }, x)
    }

    pub fn detach(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Detach(x), x)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let ok = sx.len() == 2 && sw.len() == 2 && sb.len() == 1 && sx[1] == sw[1] && sb[0] == sw[0];
        if !ok {
            return Err(Error::contract(
                self.next_label("affine"),
                format!("x {sx:?}, w {sw:?}, b {sb:?} (need [n,in], [out,in], [out])"),
            ));
        }
        let shape = vec![sx[0], sw[0]];
        Ok(self.push(Op::Affine { x, w, b }, shape))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let ok = sx.len() == 4
            && sw.len() == 4
            && sb.len() == 1
            && sw[1] == sx[1]
            && sw[2] == sw[3]
            && sw[2] % 2 == 1
            && sb[0] == sw[0]
            && (stride == 1 || stride == 2);
        if !ok {
            return Err(Error::contract(
                self.next_label("conv2d"),
                format!("x {sx:?}, w {sw:?}, b {sb:?}, stride {stride}"),
            ));
        }
        let shape = vec![sx[0], sw[0], sx[2].div_ceil(stride), sx[3].div_ceil(stride)];
        Ok(self.push(Op::Conv2d { x, w, b, stride }, shape))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::contract(
                self.next_label("upsample2"),
                format!("need NCHW, got {s:?}"),
            ));
        }
        let shape = vec![s[0], s[1], 2 * s[2], 2 * s[3]];
        Ok(self.push(Op::Upsample2(x), shape))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let label = self.next_label("concat");
        let first = xs.first().ok_or_else(|| Error::contract(&label, "no operands"))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(Error::contract(&label, format!("rank < 2: {base:?}")));
        }
        let mut channels = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::contract(
                    &label,
                    format!("operand {s:?} incompatible with {base:?}"),
                ));
            }
            channels += s[1];
        }
        let mut shape = base;
        shape[1] = channels;
        Ok(self.push(Op::Concat(xs.to_vec()), shape))
    }

    pub fn tile(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 || h == 0 || w == 0 {
            return Err(Error::contract(
                self.next_label("tile"),
                format!("need [n,d] and h,w > 0, got {s:?}"),
            ));
        }
        let shape = vec![s[0], s[1], h, w];
        Ok(self.push(Op::Tile { x, h, w }, shape))
    }

    pub fn broadcast(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.shape(x);
        let ok = s.len() == shape.len() && s.iter().zip(shape).all(|(&a, &b)| a == b || a == 1) && !shape.contains(&0);
        if !ok {
            return Err(Error::contract(
                self.next_label("broadcast"),
                format!("{s:?} cannot expand to {shape:?}"),
            ));
        }
        Ok(self.push(Op::Broadcast(x), shape.to_vec()))
    }

    fn reduced_shape(&self, kind: &str, x: NodeId, axes: &[usize]) -> Result<Vec<usize>> {
        let s = self.shape(x);
        let unique: HashSet<_> = axes.iter().collect();
        if unique.len() != axes.len() || axes.iter().any(|&a| a >= s.len()) {
            return Err(Error::contract(
                self.next_label(kind),
                format!("bad axes {axes:?} for {s:?}"),
            ));
        }
        Ok(s.iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect())
    }

    pub fn sum(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let shape = self.reduced_shape("sum", x, axes)?;
        Ok(self.push(Op::Sum { x, axes: axes.to_vec() }, shape))
    }

    pub fn mean(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let shape = self.reduced_shape("mean", x, axes)?;
        Ok(self.push(Op::Mean { x, axes: axes.to_vec() }, shape))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.shape(x);
        if numel(s) != numel(shape) || shape.contains(&0) {
            return Err(Error::contract(
                self.next_label("reshape"),
                format!("{s:?} -> {shape:?}"),
            ));
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec()))
    }

    pub fn narrow(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() < 2 || len == 0 || start + len > s[1] {
            return Err(Error::contract(
                self.next_label("narrow"),
                format!("cannot take [{start}, {}) of axis 1 in {s:?}", start + len),
            ));
        }
        let mut shape = s.to_vec();
        shape[1] = len;
        Ok(self.push(Op::Narrow { x, start, len }, shape))
    }

    /// Runs every node forward.
    pub fn evaluate<T: Scalar>(&self, feed: &Feed<T>) -> Result<Evaluation<'_, T>> {
        self.evaluate_pinned(feed, &HashMap::new())
    }

    /// Like [`Graph::evaluate`], but `detach` nodes listed in `pinned` output the
    /// given values instead of their input. Finite differences use this to hold
    /// detached quantities constant, matching what `backward` differentiates.
    pub fn evaluate_pinned<T: Scalar>(
        &self,
        feed: &Feed<T>,
        pinned: &HashMap<NodeId, Array<T>>,
    ) -> Result<Evaluation<'_, T>> {
        let mut values: Vec<Array<T>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let value = match (&node.op, pinned.get(&NodeId(i))) {
                (Op::Detach(_), Some(v)) => v.clone(),
                _ => self.forward_node(node, &values, feed)?,
            };
            if !value.all_finite() {
                return Err(Error::numeric(format!("{} ({})", node.label, node.op.kind_name())));
            }
            values.push(value);
        }
        Ok(Evaluation { graph: self, values })
    }

    fn forward_node<T: Scalar>(&self, node: &Node, vals: &[Array<T>], feed: &Feed<T>) -> Result<Array<T>> {
        let v = |id: NodeId| &vals[id.0];
        let shape = node.shape.as_slice();
        let out = match &node.op {
            Op::Leaf { name, .. } => {
                let a = feed
                    .get(name)
                    .ok_or_else(|| Error::contract(name, "no value supplied for leaf"))?;
                if a.shape() != shape {
                    return Err(Error::contract(
                        name,
                        format!("fed shape {:?}, declared {:?}", a.shape(), shape),
                    ));
                }
                a.clone()
            }
            Op::Zeros => Array::zeros(shape),
            Op::Add(a, b) => zip_map(v(*a), v(*b), |x, y| x + y),
            Op::Sub(a, b) => zip_map(v(*a), v(*b), |x, y| x - y),
            Op::Mul(a, b) => zip_map(v(*a), v(*b), |x, y| x * y),
            Op::Scale(a, c) => {
                let c = T::lit(*c);
                v(*a).map(|x| x * c)
            }
            Op::AddConst(a, c) => {
                let c = T::lit(*c);
                v(*a).map(|x| x + c)
            }
            Op::Exp(a) => v(*a).map(|x| x.exp()),
            Op::Ln(a) => {
                if v(*a).data().iter().any(|&x| x <= T::zero()) {
                    return Err(Error::contract(&node.label, "logarithm of a non-positive value"));
                }
                v(*a).map(|x| x.ln())
            }
            Op::Softplus(a) => v(*a).map(softplus),
            Op::Relu(a) => v(*a).map(|x| if x > T::zero() { x } else { T::zero() }),
            Op::Sqrt(a) => {
                if v(*a).data().iter().any(|&x| x < T::zero()) {
                    return Err(Error::contract(&node.label, "square root of a negative value"));
                }
                v(*a).map(|x| x.sqrt())
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (T::lit(*lo), T::lit(*hi));
                v(*x).map(|t| t.max(lo).min(hi))
            }
            Op::MaxConst { x, c } => {
                let c = T::lit(*c);
                v(*x).map(|t| if t > c { t } else { c })
            }
            Op::Affine { x, w, b } => affine_forward(v(*x), v(*w), v(*b), shape),
            Op::Conv2d { x, w, b, stride } => conv_forward(v(*x), v(*w), v(*b), *stride, shape),
            Op::Upsample2(a) => upsample_forward(v(*a), shape),
            Op::Concat(xs) => {
                let parts: Vec<&Array<T>> = xs.iter().map(|&x| v(x)).collect();
                concat_forward(&parts, shape)
            }
            Op::Tile { x, .. } => {
                let src = v(*x);
                let cells = shape[2] * shape[3];
                let mut out = Vec::with_capacity(numel(shape));
                for &val in src.data() {
                    out.extend(std::iter::repeat_n(val, cells));
                }
                Array::new(shape.to_vec(), out)?
            }
            Op::Broadcast(x) => {
                let src = v(*x);
                let map = broadcast_map(src.shape(), shape);
                Array::new(shape.to_vec(), map.iter().map(|&i| src.data()[i]).collect())?
            }
            Op::Sum { x, axes } | Op::Mean { x, axes } => {
                let src = v(*x);
                let map = reduce_map(src.shape(), axes);
                let mut out = vec![T::zero(); numel(shape)];
                for (&val, &o) in src.data().iter().zip(&map) {
                    out[o] += val;
                }
                if matches!(node.op, Op::Mean { .. }) {
                    let count = T::lit((src.len() / out.len()) as f64);
                    out.iter_mut().for_each(|o| *o /= count);
                }
                Array::new(shape.to_vec(), out)?
            }
            Op::Detach(x) => v(*x).clone(),
            Op::Reshape(x) => v(*x).clone().reshaped(shape.to_vec())?,
            Op::Narrow { x, start, len } => {
                let src = v(*x);
                let inner: usize = shape[2..].iter().product();
                let mut out = Vec::with_capacity(numel(shape));
                for o in 0..shape[0] {
                    let row = src.outer(o);
                    out.extend_from_slice(&row[start * inner..(start + len) * inner]);
                }
                Array::new(shape.to_vec(), out)?
            }
        };
        Ok(out)
    }
}

/// Forward values of one graph evaluation.
pub struct Evaluation<'g, T> {
    graph: &'g Graph,
    values: Vec<Array<T>>,
}

impl<'g, T: Scalar> Evaluation<'g, T> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Current outputs of every `detach` node.
    pub fn detached_values(&self) -> HashMap<NodeId, Array<T>> {
        self.graph
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Detach(_)))
            .map(|(i, _)| (NodeId(i), self.values[i].clone()))
            .collect()
    }

    pub fn value(&self, id: NodeId) -> &Array<T> {
        &self.values[id.0]
    }

    pub fn take(mut self, id: NodeId) -> Array<T> {
        std::mem::replace(&mut self.values[id.0], Array::scalar(T::zero()))
    }

    /// Gradients of a scalar node with respect to every leaf.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients<T>> {
        self.backward_where(seed, |_, _| true)
    }

    /// Gradients with respect to the leaves accepted by `select`.
    ///
    /// Every selected leaf gets an entry; leaves with no path to `seed`
    /// (including those only reachable through `detach`) get exact zeros.
    pub fn backward_where(&self, seed: NodeId, select: impl Fn(&str, LeafKind) -> bool) -> Result<Gradients<T>> {
        let nodes = &self.graph.nodes;
        if numel(&nodes[seed.0].shape) != 1 {
            return Err(Error::contract(
                &nodes[seed.0].label,
                format!("backward seed must be scalar, shape is {:?}", nodes[seed.0].shape),
            ));
        }
        let n = seed.0 + 1;
        let mut needs = vec![false; n];
        for (i, node) in nodes[..n].iter().enumerate() {
            needs[i] = match &node.op {
                Op::Leaf { name, kind } => select(name, *kind),
                Op::Zeros | Op::Detach(_) => false,
                op => op.inputs().iter().any(|x| needs[x.0]),
            };
        }

        let mut adj: Vec<Option<Vec<T>>> = vec![None; n];
        adj[seed.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf { .. } = node.op {
                adj[i] = Some(g);
                continue;
            }
            self.backward_node(node, NodeId(i), &g, &needs, &mut adj)?;
        }

        let mut grads = Gradients::new();
        for (i, node) in nodes.iter().enumerate() {
            if let Op::Leaf { name, kind } = &node.op {
                if !select(name, *kind) {
                    continue;
                }
                let data = adj
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); numel(&node.shape)]);
                grads.insert(name.clone(), Array::new(node.shape.clone(), data)?);
            }
        }
        Ok(grads)
    }

    fn backward_node(
        &self,
        node: &Node,
        id: NodeId,
        g: &[T],
        needs: &[bool],
        adj: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let v = |id: NodeId| &self.values[id.0];
        let out = &self.values[id.0];
        let size = |x: NodeId| v(x).len();
        let mut acc = |x: NodeId, f: &mut dyn FnMut(&mut [T])| {
            if needs[x.0] {
                let slot = adj[x.0].get_or_insert_with(|| vec![T::zero(); size(x)]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf { .. } | Op::Zeros | Op::Detach(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (v(*a).data(), v(*b).data());
                acc(*a, &mut |s| {
                    for ((s, &g), &y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = T::lit(*c);
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * c));
            }
            Op::AddConst(a, _) | Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Exp(a) => acc(*a, &mut |s| {
                for ((s, &g), &y) in s.iter_mut().zip(g).zip(out.data()) {
                    *s += g * y;
                }
            }),
            Op::Ln(a) => {
                let x = v(*a).data();
                acc(*a, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(x) {
                        *s += g / x;
                    }
                })
            }
            Op::Softplus(a) => {
                let x = v(*a).data();
                acc(*a, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(x) {
                        *s += g * softplus_grad(x);
                    }
                })
            }
            Op::Relu(a) => {
                let x = v(*a).data();
                acc(*a, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(x) {
                        if x > T::zero() {
                            *s += g;
                        }
                    }
                })
            }
            Op::Sqrt(a) => acc(*a, &mut |s| {
                let two = T::lit(2.0);
                for ((s, &g), &y) in s.iter_mut().zip(g).zip(out.data()) {
                    *s += g / (two * y);
                }
            }),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (T::lit(*lo), T::lit(*hi));
                let xs = v(*x).data();
                acc(*x, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(xs) {
                        if x >= lo && x <= hi {
                            *s += g;
                        }
                    }
                })
            }
            Op::MaxConst { x, c } => {
                let c = T::lit(*c);
                let xs = v(*x).data();
                acc(*x, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(xs) {
                        if x > c {
                            *s += g;
                        }
                    }
                })
            }
            Op::Affine { x, w, b } => {
                let (sx, sw) = (v(*x).shape(), v(*w).shape());
                let (n, din, dout) = (sx[0], sx[1], sw[0]);
                let (xd, wd) = (v(*x).data(), v(*w).data());
                acc(*x, &mut |s| T::gemm(n, dout, din, g, false, wd, false, s, true));
                acc(*w, &mut |s| T::gemm(dout, n, din, g, true, xd, false, s, true));
                acc(*b, &mut |s| {
                    for row in g.chunks(dout) {
                        add_into(s, row);
                    }
                });
            }
            Op::Conv2d { x, w, b, stride } => {
                let geom = ConvGeom::new(v(*x).shape(), v(*w).shape(), *stride);
                let (xd, wd) = (v(*x).data(), v(*w).data());
                let mut col = vec![T::zero(); geom.col_rows() * geom.out_pixels()];
                let mut dcol = vec![T::zero(); col.len()];
                for i in 0..geom.batch {
                    let gi = &g[i * geom.out_len()..(i + 1) * geom.out_len()];
                    acc(*w, &mut |dw| {
                        geom.im2col(&xd[i * geom.in_len()..(i + 1) * geom.in_len()], &mut col);
                        T::gemm(
                            geom.out_ch,
                            geom.out_pixels(),
                            geom.col_rows(),
                            gi,
                            false,
                            &col,
                            true,
                            dw,
                            true,
                        );
                    });
                    acc(*x, &mut |dx| {
                        T::gemm(
                            geom.col_rows(),
                            geom.out_ch,
                            geom.out_pixels(),
                            wd,
                            true,
                            gi,
                            false,
                            &mut dcol,
                            false,
                        );
                        geom.col2im(&dcol, &mut dx[i * geom.in_len()..(i + 1) * geom.in_len()]);
                    });
                }
                acc(*b, &mut |s| {
                    for (k, plane) in g.chunks(geom.out_pixels()).enumerate() {
                        let sum: T = plane.iter().copied().sum();
                        s[k % geom.out_ch] += sum;
                    }
                });
            }
            Op::Upsample2(a) => {
                let s_in = v(*a).shape().to_vec();
                let (h, w) = (s_in[2], s_in[3]);
                acc(*a, &mut |s| {
                    for (plane, gp) in s.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                plane[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let outer = node.shape[0];
                let inner: usize = node.shape[2..].iter().product();
                let total = node.shape[1] * inner;
                let mut offset = 0;
                for &x in xs {
                    let width = v(x).shape()[1] * inner;
                    acc(x, &mut |s| {
                        for o in 0..outer {
                            add_into(
                                &mut s[o * width..(o + 1) * width],
                                &g[o * total + offset..o * total + offset + width],
                            );
                        }
                    });
                    offset += width;
                }
            }
            Op::Tile { x, h, w } => {
                let cells = h * w;
                acc(*x, &mut |s| {
                    for (s, block) in s.iter_mut().zip(g.chunks(cells)) {
                        *s += block.iter().copied().sum::<T>();
                    }
                });
            }
            Op::Broadcast(x) => {
                let map = broadcast_map(v(*x).shape(), &node.shape);
                acc(*x, &mut |s| {
                    for (&i, &g) in map.iter().zip(g) {
                        s[i] += g;
                    }
                });
            }
            Op::Sum { x, axes } | Op::Mean { x, axes } => {
                let map = reduce_map(v(*x).shape(), axes);
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    T::one() / T::lit((size(*x) / g.len()) as f64)
                } else {
                    T::one()
                };
                acc(*x, &mut |s| {
                    for (s, &o) in s.iter_mut().zip(&map) {
                        *s += g[o] * scale;
                    }
                });
            }
            Op::Narrow { x, start, len } => {
                let inner: usize = node.shape[2..].iter().product();
                let width = v(*x).shape()[1] * inner;
                let part = len * inner;
                acc(*x, &mut |s| {
                    for (o, gp) in g.chunks(part).enumerate() {
                        let at = o * width + start * inner;
                        add_into(&mut s[at..at + part], gp);
                    }
                });
            }
        }
        Ok(())
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(SOFTPLUS_LINEAR_ABOVE) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn softplus_grad<T: Scalar>(x: T) -> T {
    if x > T::lit(SOFTPLUS_LINEAR_ABOVE) {
        T::one()
    } else {
        T::one() / (T::one() + (-x).exp())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn zip_map<T: Scalar>(a: &Array<T>, b: &Array<T>, f: impl Fn(T, T) -> T) -> Array<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape().to_vec(), data).expect("operand shapes checked at build time")
}

/// For every input element, the flat index of the output element it reduces into.
fn reduce_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for d in (0..shape.len()).rev() {
        if !axes.contains(&d) {
            out_strides[d] = stride;
            stride *= shape[d];
        }
    }
    index_map(shape, &out_strides)
}

/// For every output element, the flat index of the input element it copies.
fn broadcast_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; src.len()];
    let mut stride = 1;
    for d in (0..src.len()).rev() {
        strides[d] = if src[d] == 1 { 0 } else { stride };
        stride *= src[d];
    }
    index_map(dst, &strides)
}

fn index_map(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            flat -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    map
}

fn affine_forward<T: Scalar>(x: &Array<T>, w: &Array<T>, b: &Array<T>, shape: &[usize]) -> Array<T> {
    let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    T::gemm(n, din, dout, x.data(), false, w.data(), true, &mut out, true);
    Array::new(shape.to_vec(), out).expect("affine shape")
}

struct ConvGeom {
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize) -> Self {
        let (in_h, in_w, k) = (x[2], x[3], w[2]);
        let (out_h, out_w) = (in_h.div_ceil(stride), in_w.div_ceil(stride));
        let pad = |out: usize, inp: usize| ((out - 1) * stride + k).saturating_sub(inp) / 2;
        ConvGeom {
            batch: x[0],
            in_ch: x[1],
            in_h,
            in_w,
            out_ch: w[0],
            out_h,
            out_w,
            k,
            stride,
            pad_top: pad(out_h, in_h),
            pad_left: pad(out_w, in_w),
        }
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_ch * self.out_pixels()
    }

    /// Output positions `o` along one axis whose input `o·stride + tap - pad` is in bounds.
    fn valid(&self, tap: usize, out: usize, extent: usize, pad: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let lo = if pad > tap { (pad - tap).div_ceil(s) } else { 0 };
        let hi = if extent + pad > tap {
            ((extent + pad - tap - 1) / s + 1).min(out)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    /// Calls `f(col_offset, in_offset, len)` for every run of in-bounds taps;
    /// a run is `len` output pixels reading every `stride`-th input.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let p = self.out_pixels();
        for c in 0..self.in_ch {
            for ky in 0..self.k {
                let rows = self.valid(ky, self.out_h, self.in_h, self.pad_top);
                for kx in 0..self.k {
                    let cols = self.valid(kx, self.out_w, self.in_w, self.pad_left);
                    if cols.is_empty() {
                        continue;
                    }
                    let base = ((c * self.k + ky) * self.k + kx) * p;
                    for oy in rows.clone() {
                        let iy = oy * self.stride + ky - self.pad_top;
                        let ix = cols.start * self.stride + kx - self.pad_left;
                        f(
                            base + oy * self.out_w + cols.start,
                            (c * self.in_h + iy) * self.in_w + ix,
                            cols.len(),
                        );
                    }
                }
            }
        }
    }

    /// Padding positions are never written, so `col` must start zeroed; it can
    /// then be reused across samples of the same geometry.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let s = self.stride;
        self.for_each_run(|dst, src, len| {
            if s == 1 {
                col[dst..dst + len].copy_from_slice(&x[src..src + len]);
            } else {
                for (d, v) in col[dst..dst + len].iter_mut().zip(x[src..].iter().step_by(s)) {
                    *d = *v;
                }
            }
        });
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let s = self.stride;
        self.for_each_run(|src, dst, len| {
            if s == 1 {
                add_into(&mut dx[dst..dst + len], &col[src..src + len]);
            } else {
                for (d, v) in dx[dst..].iter_mut().step_by(s).zip(&col[src..src + len]) {
                    *d += *v;
                }
            }
        });
    }
}

fn conv_forward<T: Scalar>(x: &Array<T>, w: &Array<T>, b: &Array<T>, stride: usize, shape: &[usize]) -> Array<T> {
    let geom = ConvGeom::new(x.shape(), w.shape(), stride);
    let p = geom.out_pixels();
    let mut col = vec![T::zero(); geom.col_rows() * p];
    let mut out = vec![T::zero(); numel(shape)];
    for i in 0..geom.batch {
        geom.im2col(&x.data()[i * geom.in_len()..(i + 1) * geom.in_len()], &mut col);
        let dst = &mut out[i * geom.out_len()..(i + 1) * geom.out_len()];
        for (plane, &bias) in dst.chunks_mut(p).zip(b.data()) {
            plane.iter_mut().for_each(|v| *v = bias);
        }
        T::gemm(geom.out_ch, geom.col_rows(), p, w.data(), false, &col, false, dst, true);
    }
    Array::new(shape.to_vec(), out).expect("conv shape")
}

fn upsample_forward<T: Scalar>(x: &Array<T>, shape: &[usize]) -> Array<T> {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let mut out = Vec::with_capacity(numel(shape));
    for plane in x.data().chunks(h * w) {
        for y in 0..2 * h {
            let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for &val in row {
                out.push(val);
                out.push(val);
            }
        }
    }
    Array::new(shape.to_vec(), out).expect("upsample shape")
}

fn concat_forward<T: Scalar>(parts: &[&Array<T>], shape: &[usize]) -> Array<T> {
    let outer = shape[0];
    let mut out = Vec::with_capacity(numel(shape));
    for o in 0..outer {
        for p in parts {
            out.extend_from_slice(p.outer(o));
        }
    }
    Array::new(shape.to_vec(), out).expect("concat shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feed1(name: &str, a: Array<f64>) -> Feed<f64> {
        let mut f = Feed::new();
        f.insert(name.to_string(), a);
        f
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.input("x", &[3]).unwrap();
        let y = g.relu(x);
        let ev = g
            .evaluate(&feed1("x", Array::from_f64(vec![3], &[-1.0, 0.0, 2.0]).unwrap()))
            .unwrap();
        assert_eq!(ev.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_matches_direct_summation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(n, c, h, w, o, k, stride) in &[
            (2, 3, 5, 7, 4, 3, 1),
            (1, 2, 8, 8, 3, 3, 2),
            (2, 1, 7, 5, 2, 3, 2),
            (1, 2, 6, 9, 2, 5, 1),
            (1, 3, 4, 4, 2, 1, 1),
            (1, 1, 9, 6, 1, 5, 2),
        ] {
            let x = Array::from_fn(&[n, c, h, w], |_| rng.random_range(-1.0..1.0));
            let wt = Array::from_fn(&[o, c, k, k], |_| rng.random_range(-1.0..1.0));
            let b = Array::from_fn(&[o], |_| rng.random_range(-1.0..1.0));
            let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
            let pt = ((oh - 1) * stride + k).saturating_sub(h) / 2;
            let pl = ((ow - 1) * stride + k).saturating_sub(w) / 2;
            let got = conv_forward(&x, &wt, &b, stride, &[n, o, oh, ow]);
            for i in 0..n {
                for oc in 0..o {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc: f64 = b.data()[oc];
                            for ic in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * stride + ky) as isize - pt as isize;
                                        let ix = (ox * stride + kx) as isize - pl as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        acc += wt.data()[((oc * c + ic) * k + ky) * k + kx]
                                            * x.data()[((i * c + ic) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                            let v = got.data()[((i * o + oc) * oh + oy) * ow + ox];
                            assert!((v - acc).abs() < 1e-12, "{:?}", (n, c, h, w, o, k, stride));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_same_padding_center_and_corner() {
        let mut g = Graph::new();
        let x = g.input("x", &[1, 1, 3, 3]).unwrap();
        let w = g.param("w", &[1, 1, 3, 3]).unwrap();
        let b = g.param("b", &[1]).unwrap();
        let y = g.conv2d(x, w, b, 1).unwrap();
        let mut feed = Feed::new();
        feed.insert("x".into(), Array::full(&[1, 1, 3, 3], 1.0));
        feed.insert("w".into(), Array::full(&[1, 1, 3, 3], 1.0));
        feed.insert("b".into(), Array::zeros(&[1]));
        let ev = g.evaluate(&feed).unwrap();
        let out = ev.value(y).data();
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn stride_two_output_extent_is_ceiling() {
        let mut g = Graph::new();
        let x = g.input("x", &[2, 3, 7, 8]).unwrap();
        let w = g.param("w", &[4, 3, 3, 3]).unwrap();
        let b = g.param("b", &[4]).unwrap();
        let y = g.conv2d(x, w, b, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 4, 4]);
    }

    #[test]
    fn mean_over_all_axes() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]).unwrap();
        let m = g.mean_all(x).unwrap();
        let ev = g
            .evaluate(&feed1("x", Array::from_f64(vec![2], &[2.0, 4.0]).unwrap()))
            .unwrap();
        assert_eq!(ev.value(m).item(), 3.0);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = g.param("x", &[4]).unwrap();
        let m = g.mean_all(x).unwrap();
        let ev = g
            .evaluate(&feed1("x", Array::from_f64(vec![4], &[1.0, -2.0, 3.0, 5.0]).unwrap()))
            .unwrap();
        let grads = ev.backward(m).unwrap();
        assert_eq!(grads["x"].data(), &[0.25; 4]);
    }

    #[test]
    fn exp_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param("x", &[1]).unwrap();
        let e = g.exp(x);
        let s = g.sum_all(e).unwrap();
        let ev = g.evaluate(&feed1("x", Array::zeros(&[1]))).unwrap();
        assert_eq!(ev.backward(s).unwrap()["x"].data(), &[1.0]);
    }

    #[test]
    fn detach_blocks_one_factor() {
        let mut g = Graph::new();
        let x = g.param("x", &[1]).unwrap();
        let d = g.detach(x);
        let p = g.mul(x, d).unwrap();
        let s = g.sum_all(p).unwrap();
        let ev = g
            .evaluate(&feed1("x", Array::from_f64(vec![1], &[3.0]).unwrap()))
            .unwrap();
        assert_eq!(ev.backward(s).unwrap()["x"].data(), &[3.0]);
    }

    #[test]
    fn leaf_behind_detach_gets_exact_zero() {
        let mut g = Graph::new();
        let x = g.param("x", &[2]).unwrap();
        let d = g.detach(x);
        let e = g.exp(d);
        let s = g.sum_all(e).unwrap();
        let ev = g
            .evaluate(&feed1("x", Array::from_f64(vec![2], &[0.3, -0.7]).unwrap()))
            .unwrap();
        let grads = ev.backward(s).unwrap();
        assert!(grads["x"].data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn non_scalar_seed_is_contract_error() {
        let mut g = Graph::new();
        let x = g.param("x", &[2]).unwrap();
        let y = g.exp(x);
        let ev = g.evaluate(&feed1("x", Array::zeros(&[2]))).unwrap();
        assert!(matches!(ev.backward(y), Err(Error::Contract { .. })));
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.input("a", &[2]).unwrap();
        let b = g.input("b", &[3]).unwrap();
        match g.add(a, b) {
            Err(Error::Contract { node, .. }) => assert_eq!(node, "add#2"),
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let mut g = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let _ = g.exp(x);
        let err = g
            .evaluate(&feed1("x", Array::from_f64(vec![1], &[1000.0]).unwrap()))
            .err()
            .unwrap();
        assert!(err.is_numeric(), "{err}");
    }

    #[test]
    fn tile_then_concat_layout() {
        let mut g = Graph::new();
        let z = g.input("z", &[1, 2]).unwrap();
        let t = g.tile(z, 2, 2).unwrap();
        let f = g.input("f", &[1, 1, 2, 2]).unwrap();
        let c = g.concat(&[t, f]).unwrap();
        let mut feed = Feed::new();
        feed.insert("z".into(), Array::from_f64(vec![1, 2], &[3.0, 4.0]).unwrap());
        feed.insert("f".into(), Array::full(&[1, 1, 2, 2], 7.0));
        let ev = g.evaluate(&feed).unwrap();
        assert_eq!(
            ev.value(c).data(),
            &[3.0, 3.0, 3.0, 3.0, 4.0, 4.0, 4.0, 4.0, 7.0, 7.0, 7.0, 7.0]
        );
    }

    #[test]
    fn narrow_selects_columns_and_scatters_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", &[2, 3]).unwrap();
        let n = g.narrow(x, 1, 2).unwrap();
        let s = g.sum_all(n).unwrap();
        let ev = g
            .evaluate(&feed1(
                "x",
                Array::from_f64(vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            ))
            .unwrap();
        assert_eq!(ev.value(n).data(), &[2.0, 3.0, 5.0, 6.0]);
        assert_eq!(ev.backward(s).unwrap()["x"].data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let mut g = Graph::new();
        let x = g.input("x", &[1, 1, 1, 2]).unwrap();
        let u = g.upsample2(x).unwrap();
        let ev = g
            .evaluate(&feed1("x", Array::from_f64(vec![1, 1, 1, 2], &[1.0, 2.0]).unwrap()))
            .unwrap();
        assert_eq!(ev.value(u).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn partial_reduction_keeps_other_axes() {
        let mut g = Graph::new();
        let x = g.input("x", &[2, 3]).unwrap();
        let s = g.sum(x, &[1]).unwrap();
        let m = g.mean(x, &[0]).unwrap();
        let ev = g
            .evaluate(&feed1(
                "x",
                Array::from_f64(vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            ))
            .unwrap();
        assert_eq!(ev.value(s).data(), &[6.0, 15.0]);
        assert_eq!(ev.value(m).data(), &[2.5, 3.5, 4.5]);
    }
}
