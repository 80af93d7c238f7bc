use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use crate::scalar::Scalar;

use super::{AutodiffError, Tensor};

/// Index of a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input(String),
    Constant(Arc<Tensor<T>>),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Square(NodeId),
    Neg(NodeId),
    Broadcast(NodeId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Sum(_) => "sum",
            Op::Square(_) => "square",
            Op::Neg(_) => "neg",
            Op::Broadcast(_) => "broadcast",
        }
    }

    fn parents(&self) -> (Option<NodeId>, Option<NodeId>) {
        match *self {
            Op::Input(_) | Op::Constant(_) => (None, None),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => (Some(a), Some(b)),
            Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::Square(a)
            | Op::Neg(a)
            | Op::Broadcast(a) => (Some(a), None),
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
}

/// Named input tensors for one evaluation.
#[derive(Debug, Clone, Default)]
pub struct Bindings<'a, T> {
    map: HashMap<&'a str, &'a Tensor<T>>,
}

impl<'a, T> Bindings<'a, T> {
    pub fn new() -> Self {
        Self { map: HashMap::new() }
    }

    pub fn bind(mut self, name: &'a str, value: &'a Tensor<T>) -> Self {
        self.map.insert(name, value);
        self
    }

    pub fn insert(&mut self, name: &'a str, value: &'a Tensor<T>) {
        self.map.insert(name, value);
    }

    fn get(&self, name: &str) -> Option<&'a Tensor<T>> {
        self.map.get(name).copied()
    }
}

/// Incrementally records primitive operations, checking shapes as it goes.
#[derive(Debug, Clone, Default)]
pub struct GraphBuilder<T> {
    nodes: Vec<Node<T>>,
    inputs: HashMap<String, NodeId>,
}

impl<T: Scalar> GraphBuilder<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inputs: HashMap::new(),
        }
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        if self.inputs.contains_key(name) {
            return Err(AutodiffError::DuplicateInput(name.to_string()));
        }
        let id = self.push(Op::Input(name.to_string()), shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// `[n] x [n, m] -> [m]` or `[r, n] x [n, m] -> [r, m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = match (sa.as_slice(), sb.as_slice()) {
            ([n], [k, m]) if n == k => vec![*m],
            ([r, n], [k, m]) if n == k => vec![*r, *m],
            _ => return Err(AutodiffError::ShapeMismatch(format!("matmul {sa:?} x {sb:?}"))),
        };
        Ok(self.push(Op::MatMul(a, b), out))
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{op} {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    fn unary(&mut self, a: NodeId, op: Op<T>) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(op, s)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Neg(a))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), Vec::new())
    }

    /// Repeats a scalar to any shape, or a `[m]` row to `[r, m]`.
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        let src = self.shape(a).to_vec();
        let ok = src.iter().product::<usize>() == 1
            || src.as_slice() == shape
            || (src.len() == 1 && shape.len() == 2 && src[0] == shape[1]);
        if !ok {
            return Err(AutodiffError::ShapeMismatch(format!("broadcast {src:?} -> {shape:?}")));
        }
        Ok(self.push(Op::Broadcast(a), shape.to_vec()))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId, AutodiffError> {
        let k = self.scalar(c);
        let shape = self.shape(a).to_vec();
        let kb = if shape.is_empty() {
            k
        } else {
            self.broadcast(k, &shape)?
        };
        self.mul(a, kb)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: NodeId, c: T) -> Result<NodeId, AutodiffError> {
        let k = self.scalar(c);
        let shape = self.shape(a).to_vec();
        let kb = if shape.is_empty() {
            k
        } else {
            self.broadcast(k, &shape)?
        };
        self.add(a, kb)
    }

    pub fn build(self, output: NodeId) -> Graph<T> {
        Graph {
            nodes: Arc::new(self.nodes),
            inputs: Arc::new(self.inputs),
            output,
        }
    }
}

/// Immutable computation graph with one designated output.
///
/// Nodes are stored in topological order (construction order), so the graph
/// is acyclic by construction. Evaluation allocates its own scratch space;
/// a graph can be shared across threads.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Arc<Vec<Node<T>>>,
    inputs: Arc<HashMap<String, NodeId>>,
    output: NodeId,
}

type Values<'a, T> = Vec<Option<Cow<'a, Tensor<T>>>>;

impl<T: Scalar> Graph<T> {
    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output.0].shape
    }

    /// Same nodes, different designated output.
    pub fn with_output(&self, output: NodeId) -> Self {
        Self {
            nodes: Arc::clone(&self.nodes),
            inputs: Arc::clone(&self.inputs),
            output,
        }
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn evaluate(&self, bindings: &Bindings<'_, T>) -> Result<Tensor<T>, AutodiffError> {
        let mut out = self.evaluate_nodes(bindings, &[self.output])?;
        Ok(out.pop().expect("one output requested"))
    }

    /// Forward values of several nodes from a single pass.
    pub fn evaluate_nodes(&self, bindings: &Bindings<'_, T>, ids: &[NodeId]) -> Result<Vec<Tensor<T>>, AutodiffError> {
        let values = self.forward(bindings, ids)?;
        Ok(ids
            .iter()
            .map(|id| {
                values[id.0]
                    .as_ref()
                    .expect("requested node evaluated")
                    .as_ref()
                    .clone()
            })
            .collect())
    }

    /// Gradient of the scalar output with respect to the named input.
    pub fn gradient(&self, bindings: &Bindings<'_, T>, wrt: &str) -> Result<Tensor<T>, AutodiffError> {
        let (_, mut grads) = self.value_and_gradients(bindings, &[wrt])?;
        Ok(grads.pop().expect("one gradient requested"))
    }

    /// Output value plus gradients for every name in `wrt`, from one
    /// forward and one backward pass.
    pub fn value_and_gradients(
        &self,
        bindings: &Bindings<'_, T>,
        wrt: &[&str],
    ) -> Result<(T, Vec<Tensor<T>>), AutodiffError> {
        let out_shape = &self.nodes[self.output.0].shape;
        if out_shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarOutput(out_shape.clone()));
        }
        let mut targets = Vec::with_capacity(wrt.len());
        for name in wrt {
            let id = self
                .inputs
                .get(*name)
                .copied()
                .ok_or_else(|| AutodiffError::UnknownInput(name.to_string()))?;
            targets.push(id);
        }

        let values = self.forward(bindings, &[self.output])?;
        let value = values[self.output.0].as_ref().expect("output evaluated").data()[0];

        let n = self.nodes.len();
        let mut requires = vec![false; n];
        for &t in &targets {
            requires[t.0] = true;
        }
        for i in 0..n {
            if requires[i] {
                continue;
            }
            let (a, b) = self.nodes[i].op.parents();
            requires[i] = a.is_some_and(|p| requires[p.0]) || b.is_some_and(|p| requires[p.0]);
        }

        let mut adjoint: Vec<Option<Tensor<T>>> = vec![None; n];
        if requires[self.output.0] {
            adjoint[self.output.0] = Some(Tensor::filled(out_shape, T::one()));
        }
        for i in (0..=self.output.0).rev() {
            if !requires[i] {
                continue;
            }
            let Some(g) = adjoint[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Input(_)) {
                adjoint[i] = Some(g);
                continue;
            }
            self.backprop(NodeId(i), &g, &values, &requires, &mut adjoint);
        }

        let grads = targets
            .iter()
            .map(|t| {
                adjoint[t.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&self.nodes[t.0].shape))
            })
            .collect();
        Ok((value, grads))
    }

    fn forward<'a>(&'a self, bindings: &Bindings<'a, T>, outputs: &[NodeId]) -> Result<Values<'a, T>, AutodiffError> {
        let n = self.nodes.len();
        let mut needed = vec![false; n];
        for id in outputs {
            needed[id.0] = true;
        }
        for i in (0..n).rev() {
            if needed[i] {
                let (a, b) = self.nodes[i].op.parents();
                if let Some(a) = a {
                    needed[a.0] = true;
                }
                if let Some(b) = b {
                    needed[b.0] = true;
                }
            }
        }

        let mut values: Values<'a, T> = vec![None; n];
        for i in 0..n {
            if !needed[i] {
                continue;
            }
            let node = &self.nodes[i];
            let value: Cow<'a, Tensor<T>> = match &node.op {
                Op::Input(name) => {
                    let t = bindings
                        .get(name)
                        .ok_or_else(|| AutodiffError::UnboundInput(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(AutodiffError::ShapeMismatch(format!(
                            "input '{name}' declared {:?}, bound {:?}",
                            node.shape,
                            t.shape()
                        )));
                    }
                    if !t.all_finite() {
                        return Err(AutodiffError::NonFinite(format!("input '{name}'")));
                    }
                    Cow::Borrowed(t)
                }
                Op::Constant(t) => Cow::Borrowed(t.as_ref()),
                op => {
                    let get = |id: NodeId| values[id.0].as_deref().expect("parent evaluated");
                    let t = compute(op, &node.shape, get);
                    if cfg!(debug_assertions) && !t.all_finite() {
                        return Err(AutodiffError::NonFinite(format!("node {i} ({})", op.name())));
                    }
                    Cow::Owned(t)
                }
            };
            values[i] = Some(value);
        }
        Ok(values)
    }

    fn backprop(
        &self,
        id: NodeId,
        g: &Tensor<T>,
        values: &Values<'_, T>,
        requires: &[bool],
        adjoint: &mut [Option<Tensor<T>>],
    ) {
        let val = |n: NodeId| values[n.0].as_deref().expect("forward value present");
        let mut accumulate = |n: NodeId, contrib: Tensor<T>| match &mut adjoint[n.0] {
            Some(acc) => acc.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        };
        let y = val(id);
        match self.nodes[id.0].op {
            Op::Input(_) | Op::Constant(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (k, m) = (tb.shape()[0], tb.shape()[1]);
                let rows = ta.len() / k;
                if requires[a.0] {
                    // dA = G B^T
                    let mut da = vec![T::zero(); ta.len()];
                    for r in 0..rows {
                        let grow = &g.data()[r * m..(r + 1) * m];
                        for i in 0..k {
                            let brow = &tb.data()[i * m..(i + 1) * m];
                            da[r * k + i] = dot(grow, brow);
                        }
                    }
                    accumulate(a, Tensor::new(ta.shape().to_vec(), da).expect("shape"));
                }
                if requires[b.0] {
                    // dB = A^T G
                    let mut db = vec![T::zero(); tb.len()];
                    for r in 0..rows {
                        let arow = &ta.data()[r * k..(r + 1) * k];
                        let grow = &g.data()[r * m..(r + 1) * m];
                        for (i, &av) in arow.iter().enumerate() {
                            let drow = &mut db[i * m..(i + 1) * m];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d = *d + av * gv;
                            }
                        }
                    }
                    accumulate(b, Tensor::new(tb.shape().to_vec(), db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                if requires[a.0] {
                    accumulate(a, g.clone());
                }
                if requires[b.0] {
                    accumulate(b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                if requires[a.0] {
                    accumulate(a, g.zip_map(val(b), |gv, bv| gv * bv));
                }
                if requires[b.0] {
                    accumulate(b, g.zip_map(val(a), |gv, av| gv * av));
                }
            }
            Op::Tanh(a) => accumulate(a, g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv))),
            Op::Relu(a) => accumulate(
                a,
                g.zip_map(val(a), |gv, xv| if xv > T::zero() { gv } else { T::zero() }),
            ),
            Op::Sigmoid(a) => accumulate(a, g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv))),
            Op::Log(a) => accumulate(a, g.zip_map(val(a), |gv, xv| gv / xv)),
            Op::Exp(a) => accumulate(a, g.zip_map(y, |gv, yv| gv * yv)),
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(a, Tensor::filled(val(a).shape(), gv));
            }
            Op::Square(a) => {
                let two = T::one() + T::one();
                accumulate(a, g.zip_map(val(a), |gv, xv| two * xv * gv));
            }
            Op::Neg(a) => accumulate(a, g.map(|gv| -gv)),
            Op::Broadcast(a) => {
                let src = val(a);
                let contrib = if src.len() == 1 {
                    let total = g.data().iter().fold(T::zero(), |acc, &v| acc + v);
                    Tensor::filled(src.shape(), total)
                } else if src.shape() == g.shape() {
                    g.clone()
                } else {
                    let m = src.len();
                    let mut acc = vec![T::zero(); m];
                    for row in g.data().chunks(m) {
                        for (s, &v) in acc.iter_mut().zip(row) {
                            *s = *s + v;
                        }
                    }
                    Tensor::new(src.shape().to_vec(), acc).expect("shape")
                };
                accumulate(a, contrib);
            }
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn compute<'v, T: Scalar>(op: &Op<T>, shape: &[usize], get: impl Fn(NodeId) -> &'v Tensor<T>) -> Tensor<T> {
    match *op {
        Op::Input(_) | Op::Constant(_) => unreachable!("leaf nodes are not computed"),
        Op::MatMul(a, b) => {
            let (ta, tb) = (get(a), get(b));
            let (k, m) = (tb.shape()[0], tb.shape()[1]);
            let rows = ta.len() / k;
            let mut out = vec![T::zero(); rows * m];
            for r in 0..rows {
                let arow = &ta.data()[r * k..(r + 1) * k];
                let orow = &mut out[r * m..(r + 1) * m];
                for (i, &av) in arow.iter().enumerate() {
                    let brow = &tb.data()[i * m..(i + 1) * m];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o = *o + av * bv;
                    }
                }
            }
            Tensor::new(shape.to_vec(), out).expect("shape")
        }
        Op::Add(a, b) => get(a).zip_map(get(b), |x, y| x + y),
        Op::Mul(a, b) => get(a).zip_map(get(b), |x, y| x * y),
        Op::Tanh(a) => get(a).map(|x| x.tanh()),
        Op::Relu(a) => get(a).map(|x| if x > T::zero() { x } else { T::zero() }),
        Op::Sigmoid(a) => get(a).map(sigmoid),
        Op::Log(a) => get(a).map(|x| x.ln()),
        Op::Exp(a) => get(a).map(|x| x.exp()),
        Op::Square(a) => get(a).map(|x| x * x),
        Op::Neg(a) => get(a).map(|x| -x),
        Op::Sum(a) => Tensor::scalar(get(a).data().iter().fold(T::zero(), |acc, &v| acc + v)),
        Op::Broadcast(a) => {
            let src = get(a);
            let total: usize = shape.iter().product();
            let data = if src.len() == 1 {
                vec![src.data()[0]; total]
            } else {
                src.data().iter().copied().cycle().take(total).collect()
            };
            Tensor::new(shape.to_vec(), data).expect("shape")
        }
    }
}

/// Logistic function, evaluated without overflow for large |x|.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
