//! Tensor expression graphs: construction, validation, evaluation,
//! fingerprinting and optimization.
//!
//! A [`Graph`] is an append-only node table. Every node only refers to nodes
//! created before it, so node ids are already a topological order. Graphs are
//! produced by a [`GraphBuilder`] and are immutable afterwards; passes such as
//! [`optimize`] return new graphs.

mod model_file;
mod node;
mod optimize;
mod shape;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kernels;
use crate::tensor::{Shape, Tensor};

pub use model_file::{ModelError, ModelFile, OpSpec, TensorRole, TensorSpec};
pub use node::{Arity, Node, NodeId, NodeKind, BCE_EPSILON};
pub use optimize::optimize;
pub use shape::broadcast;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("shape mismatch in {kind}: {detail}")]
    ShapeMismatch { kind: &'static str, detail: String },
    #[error("{kind} expects {expected} inputs, got {got}")]
    ArityError {
        kind: &'static str,
        expected: Arity,
        got: usize,
    },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("invalid attribute: {0}")]
    InvalidAttribute(String),
    #[error("invalid bounds for {name}: {detail}")]
    InvalidBounds { name: String, detail: String },
    #[error("missing value for {name} ({id})")]
    MissingInput { id: NodeId, name: String },
    #[error("input {name} expects shape {expected}, got {got}")]
    InputShape {
        name: String,
        expected: Shape,
        got: Shape,
    },
}

/// Elementwise closed interval for one variable tensor. `lo` and `hi` either
/// have the variable's shape or are scalars broadcast over it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Tensor,
    pub hi: Tensor,
}

impl Bounds {
    /// Scalar interval broadcast over the whole variable.
    pub fn uniform(lo: f64, hi: f64) -> Self {
        Self {
            lo: Tensor::scalar(lo),
            hi: Tensor::scalar(hi),
        }
    }

    pub fn is_broadcast(&self) -> bool {
        self.lo.shape().rank() == 0
    }

    #[inline]
    pub fn lo_at(&self, i: usize) -> f64 {
        if self.is_broadcast() {
            self.lo.data()[0]
        } else {
            self.lo.data()[i]
        }
    }

    #[inline]
    pub fn hi_at(&self, i: usize) -> f64 {
        if self.is_broadcast() {
            self.hi.data()[0]
        } else {
            self.hi.data()[i]
        }
    }

    /// Full-shape copy of these bounds.
    pub fn expand(&self, shape: &Shape) -> Bounds {
        if !self.is_broadcast() {
            return self.clone();
        }
        Bounds {
            lo: Tensor::filled(shape.clone(), self.lo.data()[0]),
            hi: Tensor::filled(shape.clone(), self.hi.data()[0]),
        }
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        (self.is_broadcast() || t.shape() == self.lo.shape())
            && t.data()
                .iter()
                .enumerate()
                .all(|(i, v)| self.lo_at(i) <= *v && *v <= self.hi_at(i))
    }

    pub fn midpoint(&self, shape: &Shape) -> Tensor {
        let data = (0..shape.numel()).map(|i| 0.5 * (self.lo_at(i) + self.hi_at(i))).collect();
        Tensor::from_parts_unchecked(shape.clone(), data)
    }

    /// Collapses constant bound tensors to the scalar form.
    fn canonical(self) -> Self {
        let uniform = |t: &Tensor| t.data().iter().all(|v| v.to_bits() == t.data()[0].to_bits());
        if !self.is_broadcast() && uniform(&self.lo) && uniform(&self.hi) {
            Self::uniform(self.lo.data()[0], self.hi.data()[0])
        } else {
            self
        }
    }

    fn check(&self, name: &str, shape: &Shape) -> Result<(), GraphError> {
        let bad = |detail: String| GraphError::InvalidBounds {
            name: name.to_string(),
            detail,
        };
        let fits = |t: &Tensor| t.shape() == shape || t.shape().rank() == 0;
        if !fits(&self.lo) || !fits(&self.hi) || self.lo.shape() != self.hi.shape() {
            return Err(bad(format!(
                "bounds shape {} / {} does not match {shape}",
                self.lo.shape(),
                self.hi.shape()
            )));
        }
        for (i, (lo, hi)) in self.lo.data().iter().zip(self.hi.data()).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(bad(format!("element {i} has a non-finite bound")));
            }
            if lo > hi {
                return Err(bad(format!("element {i} has lo {lo} > hi {hi}")));
            }
        }
        Ok(())
    }
}

/// Bounds per variable node.
pub type BoundsSpec = BTreeMap<NodeId, Bounds>;

/// One problem reported by [`Graph::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub node: Option<NodeId>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(id) => write!(f, "{id}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Content hash of a graph, stable across construction orders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Immutable tensor expression graph.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    private_inputs: Vec<NodeId>,
    parameters: Vec<NodeId>,
    outputs: Vec<NodeId>,
    bounds: BoundsSpec,
    fingerprint: OnceLock<Fingerprint>,
}

impl Clone for Graph {
    fn clone(&self) -> Self {
        Self {
            nodes: self.nodes.clone(),
            private_inputs: self.private_inputs.clone(),
            parameters: self.parameters.clone(),
            outputs: self.outputs.clone(),
            bounds: self.bounds.clone(),
            fingerprint: self.fingerprint.clone(),
        }
    }
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, GraphError> {
        self.nodes.get(id.0).ok_or(GraphError::UnknownNode(id))
    }

    pub fn shape(&self, id: NodeId) -> &Shape {
        &self.nodes[id.0].shape
    }

    pub fn private_inputs(&self) -> &[NodeId] {
        &self.private_inputs
    }

    pub fn parameters(&self) -> &[NodeId] {
        &self.parameters
    }

    /// Private inputs followed by parameters.
    pub fn variables(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.private_inputs.iter().chain(&self.parameters).copied()
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn bounds(&self) -> &BoundsSpec {
        &self.bounds
    }

    pub fn name(&self, id: NodeId) -> Option<&str> {
        self.nodes.get(id.0).and_then(|n| n.name.as_deref())
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .find(|n| n.name.as_deref() == Some(name))
            .map(|n| n.id)
    }

    /// Variable node with the given name.
    pub fn variable(&self, name: &str) -> Option<NodeId> {
        self.variables().find(|&id| self.name(id) == Some(name))
    }

    /// Total element count of all outputs.
    pub fn output_size(&self) -> usize {
        self.outputs.iter().map(|&o| self.shape(o).numel()).sum()
    }

    /// Copy of this graph with the bounds replaced.
    pub fn with_bounds(&self, bounds: BoundsSpec) -> Result<Graph, GraphError> {
        let mut b = self.to_builder();
        b.bounds.clear();
        for (id, bound) in bounds {
            b.set_bounds(id, bound)?;
        }
        Ok(b.finish())
    }

    /// Reopens the node table for appending.
    pub fn to_builder(&self) -> GraphBuilder {
        GraphBuilder {
            nodes: self.nodes.clone(),
            private_inputs: self.private_inputs.clone(),
            parameters: self.parameters.clone(),
            outputs: self.outputs.clone(),
            bounds: self.bounds.clone(),
        }
    }

    /// Node ids in a topological order. Construction order already is one;
    /// this re-derives it with Kahn's algorithm so that malformed tables are
    /// detected rather than assumed away.
    pub fn topological_order(&self) -> Result<Vec<NodeId>, Vec<NodeId>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut dangling = Vec::new();
        for node in &self.nodes {
            for input in &node.inputs {
                if input.0 >= n {
                    dangling.push(node.id);
                    continue;
                }
                indegree[node.id.0] += 1;
                users[input.0].push(node.id.0);
            }
        }
        if !dangling.is_empty() {
            return Err(dangling);
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(NodeId(i));
            for &u in &users[i] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() == n {
            Ok(order)
        } else {
            Err((0..n).filter(|&i| indegree[i] > 0).map(NodeId).collect())
        }
    }

    /// Checks structural invariants and bound coverage. Reports every
    /// violation found.
    pub fn validate(&self) -> Result<(), Vec<Diagnostic>> {
        let mut diags = Vec::new();
        let mut push = |node: Option<NodeId>, message: String| diags.push(Diagnostic { node, message });

        if self.outputs.is_empty() {
            push(None, "no outputs".into());
        }
        for &o in &self.outputs {
            if o.0 >= self.nodes.len() {
                push(Some(o), "output refers to a node outside the table".into());
            }
        }
        if let Err(stuck) = self.topological_order() {
            for id in stuck {
                push(Some(id), "node is part of a cycle or has a dangling input".into());
            }
        }
        for node in &self.nodes {
            if node.inputs.iter().any(|i| i.0 >= node.id.0) {
                push(Some(node.id), "input refers to a later node".into());
            }
            if !node.kind.arity().accepts(node.inputs.len()) {
                push(
                    Some(node.id),
                    format!(
                        "{} expects {} inputs, got {}",
                        node.kind.name(),
                        node.kind.arity(),
                        node.inputs.len()
                    ),
                );
            }
            if node.kind.is_variable() && node.name.is_none() {
                push(Some(node.id), "variable without a name".into());
            }
        }
        let mut seen = HashSet::new();
        for id in self.variables() {
            match self.nodes.get(id.0) {
                Some(n) if n.kind.is_variable() => {
                    if let Some(name) = &n.name {
                        if !seen.insert(name.clone()) {
                            push(Some(id), format!("duplicate variable name {name:?}"));
                        }
                    }
                }
                _ => push(Some(id), "declared variable is not an Input or Parameter".into()),
            }
        }
        for (k, &id) in self.private_inputs.iter().enumerate() {
            if !self.bounds.contains_key(&id) {
                let name = self.name(id).unwrap_or("?");
                push(Some(id), format!("missing bounds on input #{k} ({name})"));
            }
        }
        for (&id, b) in &self.bounds {
            match self.nodes.get(id.0) {
                Some(n) => {
                    if let Err(e) = b.check(n.name.as_deref().unwrap_or("?"), &n.shape) {
                        push(Some(id), e.to_string());
                    }
                }
                None => push(Some(id), "bounds refer to an unknown node".into()),
            }
        }
        if diags.is_empty() {
            Ok(())
        } else {
            Err(diags)
        }
    }

    /// Nodes reachable backwards from the outputs.
    pub fn live_nodes(&self) -> Vec<bool> {
        let mut live = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = self.outputs.clone();
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut live[id.0], true) {
                continue;
            }
            stack.extend(self.nodes[id.0].inputs.iter().copied());
        }
        live
    }

    /// Evaluates every node and returns all values, indexed by node id.
    pub fn evaluate_all(&self, inputs: &HashMap<NodeId, Tensor>) -> Result<Vec<Tensor>, GraphError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.kind {
                NodeKind::Input | NodeKind::Parameter => {
                    let name = node.name.clone().unwrap_or_default();
                    let v = inputs
                        .get(&node.id)
                        .ok_or(GraphError::MissingInput { id: node.id, name: name.clone() })?;
                    if v.shape() != &node.shape {
                        return Err(GraphError::InputShape {
                            name,
                            expected: node.shape.clone(),
                            got: v.shape().clone(),
                        });
                    }
                    v.clone()
                }
                kind => {
                    let args: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i.0]).collect();
                    kernels::eval(kind, &args, &node.shape)
                }
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Evaluates the graph outputs.
    pub fn evaluate(&self, inputs: &HashMap<NodeId, Tensor>) -> Result<Vec<Tensor>, GraphError> {
        let mut values = self.evaluate_all(inputs)?;
        Ok(self
            .outputs
            .iter()
            .map(|o| std::mem::replace(&mut values[o.0], Tensor::scalar(0.0)))
            .collect())
    }

    /// Structural hash of each node: kind, attributes, shape, variable name
    /// and the hashes of its inputs. Independent of node numbering.
    pub fn node_hashes(&self) -> Vec<[u8; 32]> {
        let mut hashes: Vec<[u8; 32]> = Vec::with_capacity(self.nodes.len());
        let mut buf = Vec::new();
        for node in &self.nodes {
            buf.clear();
            node.kind.write_key(&mut buf);
            node::write_shape(&mut buf, &node.shape);
            if node.kind.is_variable() {
                buf.extend_from_slice(node.name.as_deref().unwrap_or("").as_bytes());
                buf.push(0);
            }
            for i in &node.inputs {
                buf.extend_from_slice(&hashes[i.0]);
            }
            hashes.push(Sha256::digest(&buf).into());
        }
        hashes
    }

    /// Content hash over outputs, variable roles and bounds. Memoized.
    pub fn fingerprint(&self) -> Fingerprint {
        *self.fingerprint.get_or_init(|| self.compute_fingerprint())
    }

    fn compute_fingerprint(&self) -> Fingerprint {
        let hashes = self.node_hashes();
        let mut h = Sha256::new();
        h.update(b"outputs");
        for o in &self.outputs {
            h.update(hashes[o.0]);
        }
        let mut vars: Vec<(&str, u8, NodeId)> = self
            .private_inputs
            .iter()
            .map(|&id| (self.name(id).unwrap_or(""), 0u8, id))
            .chain(self.parameters.iter().map(|&id| (self.name(id).unwrap_or(""), 1u8, id)))
            .collect();
        vars.sort();
        for (name, role, id) in vars {
            h.update(b"var");
            h.update(name.as_bytes());
            h.update([0, role]);
            h.update(hashes[id.0]);
            match self.bounds.get(&id) {
                Some(b) => {
                    h.update(b"b");
                    for v in b.lo.data().iter().chain(b.hi.data()) {
                        h.update(v.to_bits().to_le_bytes());
                    }
                }
                None => h.update(b"u"),
            }
        }
        Fingerprint(h.finalize().into())
    }
}

/// Append-only constructor for [`Graph`].
#[derive(Debug, Clone, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    private_inputs: Vec<NodeId>,
    parameters: Vec<NodeId>,
    outputs: Vec<NodeId>,
    bounds: BoundsSpec,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, GraphError> {
        self.nodes.get(id.0).ok_or(GraphError::UnknownNode(id))
    }

    pub fn shape(&self, id: NodeId) -> Result<&Shape, GraphError> {
        self.node(id).map(|n| &n.shape)
    }

    fn push(&mut self, kind: NodeKind, inputs: Vec<NodeId>, shape: Shape, name: Option<String>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            id,
            kind,
            inputs,
            shape,
            name,
        });
        id
    }

    /// Declares a private input tensor.
    pub fn input(&mut self, name: impl Into<String>, shape: Shape) -> NodeId {
        let id = self.push(NodeKind::Input, Vec::new(), shape, Some(name.into()));
        self.private_inputs.push(id);
        id
    }

    /// Declares a non-private variable such as a weight matrix.
    pub fn parameter(&mut self, name: impl Into<String>, shape: Shape) -> NodeId {
        let id = self.push(NodeKind::Parameter, Vec::new(), shape, Some(name.into()));
        self.parameters.push(id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().clone();
        self.push(NodeKind::Constant(value), Vec::new(), shape, None)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Appends an operation node after checking arity and shapes.
    pub fn build(&mut self, kind: NodeKind, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        if kind.is_variable() {
            return Err(GraphError::InvalidAttribute(
                "variables are declared with input() or parameter()".into(),
            ));
        }
        if !kind.arity().accepts(inputs.len()) {
            return Err(GraphError::ArityError {
                kind: kind.name(),
                expected: kind.arity(),
                got: inputs.len(),
            });
        }
        let shapes = inputs
            .iter()
            .map(|&i| self.shape(i))
            .collect::<Result<Vec<_>, _>>()?;
        let shape = shape::infer(&kind, &shapes)?;
        Ok(self.push(kind, inputs.to_vec(), shape, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.build(NodeKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.build(NodeKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.build(NodeKind::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.build(NodeKind::Div, &[a, b])
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.build(NodeKind::Neg, &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.build(NodeKind::MatMul, &[a, b])
    }

    pub fn pow(&mut self, a: NodeId, exponent: f64) -> Result<NodeId, GraphError> {
        self.build(NodeKind::Pow { exponent }, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.build(NodeKind::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.build(NodeKind::Log, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.build(NodeKind::Sigmoid, &[a])
    }

    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId, GraphError> {
        self.build(NodeKind::Sum { axis }, &[a])
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId, GraphError> {
        self.build(NodeKind::Mean { axis }, &[a])
    }

    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, GraphError> {
        self.build(NodeKind::Clip { lo, hi }, &[a])
    }

    pub fn bce(&mut self, prediction: NodeId, target: NodeId) -> Result<NodeId, GraphError> {
        self.build(NodeKind::BinaryCrossEntropy, &[prediction, target])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.build(NodeKind::Transpose, &[a])
    }

    /// Same elements viewed under `shape`.
    pub fn reshape(&mut self, a: NodeId, shape: Shape) -> Result<NodeId, GraphError> {
        if self.shape(a)? == &shape {
            return Ok(a);
        }
        self.build(NodeKind::Concat { shape }, &[a])
    }

    /// Attaches elementwise bounds to a variable.
    pub fn set_bounds(&mut self, id: NodeId, bounds: Bounds) -> Result<(), GraphError> {
        let node = self.node(id)?;
        if !node.kind.is_variable() {
            return Err(GraphError::InvalidBounds {
                name: id.to_string(),
                detail: "bounds may only be attached to inputs and parameters".into(),
            });
        }
        bounds.check(node.name.as_deref().unwrap_or("?"), &node.shape)?;
        self.bounds.insert(id, bounds.canonical());
        Ok(())
    }

    /// Scalar interval broadcast over the whole variable.
    pub fn bound_uniform(&mut self, id: NodeId, lo: f64, hi: f64) -> Result<(), GraphError> {
        self.set_bounds(id, Bounds::uniform(lo, hi))
    }

    pub fn output(&mut self, id: NodeId) -> Result<(), GraphError> {
        self.node(id)?;
        self.outputs.push(id);
        Ok(())
    }

    pub fn set_outputs(&mut self, outputs: Vec<NodeId>) -> Result<(), GraphError> {
        for &o in &outputs {
            self.node(o)?;
        }
        self.outputs = outputs;
        Ok(())
    }

    pub fn finish(self) -> Graph {
        Graph {
            nodes: self.nodes,
            private_inputs: self.private_inputs,
            parameters: self.parameters,
            outputs: self.outputs,
            bounds: self.bounds,
            fingerprint: OnceLock::new(),
        }
    }
}
