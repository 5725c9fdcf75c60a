use super::primitive::{evaluate, vjp, Primitive};
use super::{DiffError, Tensor};

/// Stable identifier of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Parameters in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Source {
    Constant,
    Param(ParamId),
    Op { kind: Primitive, inputs: Vec<NodeId> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    source: Source,
}

/// Linear record of primitive applications, in evaluation order.
///
/// Node values double as the saved activations for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<(ParamId, NodeId)>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that rejects non-finite inputs and outputs at every primitive.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn unchecked() -> Self {
        Self {
            checked: false,
            ..Self::new()
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, source: Source) -> NodeId {
        self.nodes.push(Node { value, source });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<(), DiffError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(DiffError::DanglingNode(id.0))
        }
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Source::Constant)
    }

    /// Leaf node holding the current value of a parameter. Repeated requests
    /// for the same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.param_nodes.iter().find(|(p, _)| *p == id) {
            return node;
        }
        let node = self.push(store.value(id).clone(), Source::Param(id));
        self.param_nodes.push((id, node));
        node
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    /// Evaluates `kind` on recorded nodes and appends the application.
    pub fn apply(&mut self, kind: Primitive, inputs: &[NodeId]) -> Result<NodeId, DiffError> {
        for &i in inputs {
            self.check(i)?;
        }
        let values: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
        if self.checked && values.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite {
                context: format!("input to {kind}"),
            });
        }
        let out = evaluate(kind, &values)?;
        if self.checked && !out.is_finite() {
            return Err(DiffError::NonFinite {
                context: format!("output of {kind}"),
            });
        }
        Ok(self.push(
            out,
            Source::Op {
                kind,
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Reverse sweep from `output` seeded with `seed`; parameter gradients are
    /// added into `store`. Intermediate gradients are dropped once consumed.
    pub fn backward(
        &self,
        output: NodeId,
        seed: &Tensor,
        store: &mut ParamStore,
    ) -> Result<(), DiffError> {
        self.check(output)?;
        if seed.shape() != self.value(output).shape() {
            return Err(DiffError::SeedShape {
                seed: seed.shape().to_vec(),
                output: self.value(output).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.source {
                Source::Constant => {}
                Source::Param(pid) => {
                    if pid.0 >= store.len() {
                        return Err(DiffError::UnknownParam(pid.0));
                    }
                    store.get_mut(*pid).grad.add_assign(&g);
                }
                Source::Op { kind, inputs } => {
                    let values: Vec<&Tensor> =
                        inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
                    let input_grads = vjp(*kind, &values, &node.value, &g);
                    for (&inp, ig) in inputs.iter().zip(input_grads) {
                        if inp.0 >= idx {
                            return Err(DiffError::DanglingNode(inp.0));
                        }
                        match &mut grads[inp.0] {
                            Some(acc) => acc.add_assign(&ig),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Re-evaluates every recorded application from the leaves, reading
    /// parameter leaves from `store`. Returns the fresh node values.
    pub fn replay(&self, store: &ParamStore) -> Result<Vec<Tensor>, DiffError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.source {
                Source::Constant => node.value.clone(),
                Source::Param(pid) => store.value(*pid).clone(),
                Source::Op { kind, inputs } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&i| &values[i.0]).collect();
                    evaluate(*kind, &ins)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Sign pattern of every relu input on the tape. Two evaluations of the
    /// same graph with equal signatures lie in the same linear region of all
    /// relus.
    pub fn kink_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Source::Op {
                kind: Primitive::Relu,
                inputs,
            } = &node.source
            {
                sig.extend(
                    self.nodes[inputs[0].0]
                        .value
                        .data()
                        .iter()
                        .map(|&v| if v > 0.0 { 1 } else if v < 0.0 { -1 } else { 0 }),
                );
            }
        }
        sig
    }

    /// Primitive kinds recorded on the tape, in order.
    pub fn kinds(&self) -> Vec<Primitive> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.source {
                Source::Op { kind, .. } => Some(*kind),
                _ => None,
            })
            .collect()
    }

    // Shorthands used by model and loss code.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::SoftmaxRows, &[a])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Concat { axis: 1 }, &[a, b])
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Concat { axis: 0 }, &[a, b])
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Slice { axis: 0, start, len }, &[a])
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Slice { axis: 1, start, len }, &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId, DiffError> {
        self.apply(Primitive::BroadcastRows { rows }, &[a])
    }

    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> Result<NodeId, DiffError> {
        self.apply(Primitive::LayerNormRows { eps }, &[a])
    }

    /// `x * w + b` with `b` a `1 x n` row broadcast over the rows of `x`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let xw = self.matmul(x, w)?;
        let rows = self.value(xw).rows();
        let bb = self.broadcast_rows(b, rows)?;
        self.add(xw, bb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]));
        let mut tape = Tape::new();
        let xn = tape.param(&store, x);
        let s = tape.sum(xn).unwrap();
        tape.backward(s, &Tensor::scalar(1.0), &mut store).unwrap();
        assert_eq!(store.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_of_square_gradient() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]));
        let mut tape = Tape::new();
        let xn = tape.param(&store, x);
        let sq = tape.mul(xn, xn).unwrap();
        let m = tape.mean(sq).unwrap();
        tape.backward(m, &Tensor::scalar(1.0), &mut store).unwrap();
        let g = store.grad(x).data();
        let expected = [2.0 / 3.0, 4.0 / 3.0, 2.0];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::ones(&[2, 2]));
        let mut tape = Tape::new();
        let xn = tape.param(&store, x);
        let err = tape.backward(xn, &Tensor::scalar(1.0), &mut store).unwrap_err();
        assert!(matches!(err, DiffError::SeedShape { .. }));
    }

    #[test]
    fn foreign_node_is_dangling() {
        let mut other = Tape::new();
        for _ in 0..5 {
            other.constant(Tensor::scalar(1.0));
        }
        let foreign = NodeId(4);
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(
            tape.add(c, foreign),
            Err(DiffError::DanglingNode(4))
        ));
        let mut store = ParamStore::new();
        assert!(matches!(
            tape.backward(foreign, &Tensor::scalar(1.0), &mut store),
            Err(DiffError::DanglingNode(4))
        ));
    }

    #[test]
    fn checked_tape_rejects_non_finite() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let err = tape.log(z).unwrap_err();
        assert!(matches!(err, DiffError::NonFinite { .. }));
        let mut loose = Tape::unchecked();
        let z = loose.constant(Tensor::scalar(0.0));
        let l = loose.log(z).unwrap();
        assert_eq!(loose.scalar(l), f64::NEG_INFINITY);
    }

    #[test]
    fn param_leaf_is_shared_within_tape() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        assert_eq!(tape.param(&store, x), tape.param(&store, x));
    }

    #[test]
    fn replay_matches_recorded_values() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::from_rows(&[vec![0.3, -0.2], vec![0.1, 0.7]]));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let wn = tape.param(&store, w);
        let h = tape.matmul(x, wn).unwrap();
        let s = tape.softmax_rows(h).unwrap();
        let out = tape.sum(s).unwrap();
        let replayed = tape.replay(&store).unwrap();
        assert_eq!(replayed[out.index()].data(), tape.value(out).data());
        assert_eq!(replayed[s.index()], *tape.value(s));
    }
}
