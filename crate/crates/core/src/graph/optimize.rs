//! Semantics-preserving graph rewrites: dead-node removal, constant folding,
//! algebraic identities and common-subexpression elimination.

use std::collections::HashMap;

use super::{Graph, GraphBuilder, NodeId, NodeKind};
use crate::kernels;
use crate::tensor::Tensor;

const MAX_PASSES: usize = 16;

/// Returns an equivalent graph with at most as many nodes. Declared inputs and
/// parameters are always kept, even when no output depends on them.
pub fn optimize(graph: &Graph) -> Graph {
    let mut current = rewrite(graph);
    for _ in 0..MAX_PASSES {
        let next = rewrite(&current);
        if next.len() >= current.len() {
            break;
        }
        current = next;
    }
    if current.len() > graph.len() {
        return graph.clone();
    }
    current
}

enum Rewrite {
    Existing(NodeId),
    Node(NodeKind, Vec<NodeId>),
    Constant(Tensor),
}

struct Rewriter {
    out: GraphBuilder,
    interned: HashMap<(Vec<u8>, Vec<NodeId>), NodeId>,
    key: Vec<u8>,
}

impl Rewriter {
    fn kind(&self, id: NodeId) -> &NodeKind {
        &self.out.nodes[id.0].kind
    }

    fn constant(&self, id: NodeId) -> Option<&Tensor> {
        self.kind(id).as_constant()
    }

    fn is_const_all(&self, id: NodeId, value: f64) -> bool {
        self.constant(id).is_some_and(|t| t.is_all(value))
    }

    fn same_shape(&self, id: NodeId, shape: &crate::tensor::Shape) -> bool {
        &self.out.nodes[id.0].shape == shape
    }

    /// Emits a node through the hash-consing table.
    fn intern(&mut self, kind: NodeKind, inputs: Vec<NodeId>, name: Option<String>) -> NodeId {
        self.key.clear();
        kind.write_key(&mut self.key);
        let key = (self.key.clone(), inputs);
        if let Some(&id) = self.interned.get(&key) {
            return id;
        }
        let inputs = key.1.clone();
        let id = if let NodeKind::Constant(t) = &kind {
            let id = self.out.constant(t.clone());
            self.out.nodes[id.0].name = name;
            id
        } else {
            let id = self
                .out
                .build(kind, &inputs)
                .expect("rewrites preserve shape validity");
            self.out.nodes[id.0].name = name;
            id
        };
        self.interned.insert(key, id);
        id
    }

    fn emit(&mut self, rewrite: Rewrite, name: Option<String>) -> NodeId {
        match rewrite {
            Rewrite::Existing(id) => id,
            Rewrite::Constant(t) => self.intern(NodeKind::Constant(t), Vec::new(), None),
            Rewrite::Node(kind, inputs) => {
                // A rewritten node may itself be foldable or simplifiable.
                match self.simplify(&kind, &inputs) {
                    Some(Rewrite::Node(k, i)) if k == kind && i == inputs => self.intern(k, i, name),
                    Some(next) => self.emit(next, name),
                    None => self.intern(kind, inputs, name),
                }
            }
        }
    }

    fn simplify(&self, kind: &NodeKind, inputs: &[NodeId]) -> Option<Rewrite> {
        if !kind.is_leaf() && inputs.iter().all(|&i| self.constant(i).is_some()) {
            let args: Vec<&Tensor> = inputs.iter().map(|&i| self.constant(i).unwrap()).collect();
            let shapes: Vec<&crate::tensor::Shape> = args.iter().map(|a| a.shape()).collect();
            let shape = super::shape::infer(kind, &shapes).ok()?;
            let value = kernels::eval(kind, &args, &shape);
            if value.is_finite() {
                return Some(Rewrite::Constant(value));
            }
            return None;
        }
        let out_shape = {
            let shapes: Vec<&crate::tensor::Shape> =
                inputs.iter().map(|&i| &self.out.nodes[i.0].shape).collect();
            super::shape::infer(kind, &shapes).ok()?
        };
        match kind {
            NodeKind::Add => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.is_const_all(b, 0.0) && self.same_shape(a, &out_shape) {
                    return Some(Rewrite::Existing(a));
                }
                if self.is_const_all(a, 0.0) && self.same_shape(b, &out_shape) {
                    return Some(Rewrite::Existing(b));
                }
            }
            NodeKind::Sub => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.is_const_all(b, 0.0) && self.same_shape(a, &out_shape) {
                    return Some(Rewrite::Existing(a));
                }
                if self.is_const_all(a, 0.0) && self.same_shape(b, &out_shape) {
                    return Some(Rewrite::Node(NodeKind::Neg, vec![b]));
                }
            }
            NodeKind::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.is_const_all(b, 1.0) && self.same_shape(a, &out_shape) {
                    return Some(Rewrite::Existing(a));
                }
                if self.is_const_all(a, 1.0) && self.same_shape(b, &out_shape) {
                    return Some(Rewrite::Existing(b));
                }
                if self.is_const_all(a, 0.0) || self.is_const_all(b, 0.0) {
                    return Some(Rewrite::Constant(Tensor::zeros(out_shape)));
                }
            }
            NodeKind::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.is_const_all(b, 1.0) && self.same_shape(a, &out_shape) {
                    return Some(Rewrite::Existing(a));
                }
            }
            NodeKind::Neg => {
                let a = inputs[0];
                if matches!(self.kind(a), NodeKind::Neg) {
                    return Some(Rewrite::Existing(self.out.nodes[a.0].inputs[0]));
                }
            }
            NodeKind::Pow { exponent } => {
                if *exponent == 1.0 {
                    return Some(Rewrite::Existing(inputs[0]));
                }
                if *exponent == 0.0 {
                    return Some(Rewrite::Constant(Tensor::ones(out_shape)));
                }
            }
            NodeKind::Transpose => {
                let a = inputs[0];
                if matches!(self.kind(a), NodeKind::Transpose) {
                    return Some(Rewrite::Existing(self.out.nodes[a.0].inputs[0]));
                }
            }
            NodeKind::Sum { .. } | NodeKind::Mean { .. } => {
                if self.same_shape(inputs[0], &out_shape) {
                    return Some(Rewrite::Existing(inputs[0]));
                }
            }
            NodeKind::Concat { shape } => {
                if inputs.len() == 1 && self.same_shape(inputs[0], shape) {
                    return Some(Rewrite::Existing(inputs[0]));
                }
                if inputs.iter().any(|&i| matches!(self.kind(i), NodeKind::Concat { .. })) {
                    let flat = inputs
                        .iter()
                        .flat_map(|&i| match self.kind(i) {
                            NodeKind::Concat { .. } => self.out.nodes[i.0].inputs.clone(),
                            _ => vec![i],
                        })
                        .collect();
                    return Some(Rewrite::Node(kind.clone(), flat));
                }
            }
            NodeKind::Slice { start, shape } => {
                let a = inputs[0];
                if *start == 0 && self.same_shape(a, shape) {
                    return Some(Rewrite::Existing(a));
                }
                if matches!(self.kind(a), NodeKind::Concat { .. }) {
                    let len = shape.numel();
                    let mut offset = 0;
                    for &piece in &self.out.nodes[a.0].inputs {
                        let n = self.out.nodes[piece.0].shape.numel();
                        if *start >= offset && start + len <= offset + n {
                            let inner = NodeKind::Slice {
                                start: start - offset,
                                shape: shape.clone(),
                            };
                            return Some(Rewrite::Node(inner, vec![piece]));
                        }
                        if *start < offset + n {
                            break;
                        }
                        offset += n;
                    }
                }
            }
            _ => {}
        }
        None
    }
}

fn rewrite(graph: &Graph) -> Graph {
    let mut live = graph.live_nodes();
    for v in graph.variables() {
        live[v.0] = true;
    }
    let mut rw = Rewriter {
        out: GraphBuilder::new(),
        interned: HashMap::new(),
        key: Vec::new(),
    };
    let mut map: Vec<Option<NodeId>> = vec![None; graph.len()];
    for node in graph.nodes() {
        if !live[node.id.0] {
            continue;
        }
        let new_id = match &node.kind {
            NodeKind::Input | NodeKind::Parameter => {
                let id = NodeId(rw.out.nodes.len());
                rw.out.nodes.push(super::Node {
                    id,
                    kind: node.kind.clone(),
                    inputs: Vec::new(),
                    shape: node.shape.clone(),
                    name: node.name.clone(),
                });
                id
            }
            kind => {
                let inputs: Vec<NodeId> = node
                    .inputs
                    .iter()
                    .map(|i| map[i.0].expect("inputs of live nodes are live"))
                    .collect();
                let rewrite = Rewrite::Node(kind.clone(), inputs);
                rw.emit(rewrite, node.name.clone())
            }
        };
        map[node.id.0] = Some(new_id);
    }
    let remap = |id: &NodeId| map[id.0].expect("declared nodes are kept");
    let mut out = rw.out;
    out.private_inputs = graph.private_inputs().iter().map(remap).collect();
    out.parameters = graph.parameters().iter().map(remap).collect();
    out.outputs = graph.outputs().iter().map(remap).collect();
    out.bounds = graph
        .bounds()
        .iter()
        .map(|(id, b)| (remap(id), b.clone()))
        .collect();
    out.finish()
}
