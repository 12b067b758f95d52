//! Reverse-mode differentiation as a graph-to-graph transform.
//!
//! [`jacobian`] appends one backward pass per output element to a copy of the
//! forward graph and concatenates the resulting adjoints into an explicit
//! `(output_size, wrt_size)` matrix. The forward subgraph is shared by every
//! pass and the result is run through [`optimize`], so constant seeds fold away
//! and identical subexpressions are merged. Because the result is an ordinary
//! graph, the transform composes: [`higher_order`] simply iterates it.

use std::collections::HashMap;

use thiserror::Error;

use crate::graph::{optimize, Fingerprint, Graph, GraphBuilder, GraphError, Node, NodeId, NodeKind, BCE_EPSILON};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{kind} node {node} has no derivative rule")]
    NonDifferentiable { kind: &'static str, node: NodeId },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("{0} is not an Input or Parameter node")]
    NotAVariable(NodeId),
    #[error("{0} appears more than once in the differentiation targets")]
    DuplicateTarget(NodeId),
    #[error("graph has no outputs")]
    NoOutputs,
    #[error("derivative order must be at least 1")]
    InvalidOrder,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Graph whose only output is the flattened Jacobian.
#[derive(Debug, Clone)]
pub struct JacobianGraph {
    pub graph: Graph,
    /// Differentiation targets, as ids in `graph`.
    pub wrt: Vec<NodeId>,
    /// Fingerprint of the graph that was differentiated.
    pub source: Fingerprint,
    pub rows: usize,
    pub cols: usize,
}

impl JacobianGraph {
    pub fn output(&self) -> NodeId {
        self.graph.outputs()[0]
    }
}

/// Contributions `(input position, adjoint)` produced by one rule.
type Contributions = Vec<(usize, NodeId)>;

/// Vector-Jacobian product for one node kind: given the node and the adjoint
/// of its output, returns the adjoints flowing into its inputs.
type VjpRule = fn(&mut GraphBuilder, &Node, NodeId) -> Result<Contributions, GraphError>;

/// Derivative rules, one per node kind. Leaves have no inputs and need none.
fn rule_for(kind: &NodeKind) -> Option<VjpRule> {
    use NodeKind::*;
    Some(match kind {
        Input | Parameter | Constant(_) => return None,
        Add => vjp_add,
        Sub => vjp_sub,
        Mul => vjp_mul,
        Div => vjp_div,
        Neg => vjp_neg,
        MatMul => vjp_matmul,
        Pow { .. } => vjp_pow,
        Exp => vjp_exp,
        Log => vjp_log,
        Sigmoid => vjp_sigmoid,
        Sum { .. } | Mean { .. } => vjp_reduce,
        Clip { .. } => vjp_clip,
        BinaryCrossEntropy => vjp_bce,
        Transpose => vjp_transpose,
        Expand { .. } => vjp_expand,
        Concat { .. } => vjp_concat,
        Slice { .. } => vjp_slice,
        ClipMask { .. } => vjp_zero,
    })
}

/// Sums a broadcast adjoint back down to the operand's shape.
fn unbroadcast(b: &mut GraphBuilder, g: NodeId, target: &Shape) -> Result<NodeId, GraphError> {
    if b.shape(g)? == target {
        return Ok(g);
    }
    let s = b.sum(g, None)?;
    b.reshape(s, target.clone())
}

fn input_shape(b: &GraphBuilder, node: &Node, i: usize) -> Result<Shape, GraphError> {
    b.shape(node.inputs[i]).cloned()
}

fn vjp_add(b: &mut GraphBuilder, n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    let (sa, sb) = (input_shape(b, n, 0)?, input_shape(b, n, 1)?);
    Ok(vec![(0, unbroadcast(b, g, &sa)?), (1, unbroadcast(b, g, &sb)?)])
}

fn vjp_sub(b: &mut GraphBuilder, n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    let (sa, sb) = (input_shape(b, n, 0)?, input_shape(b, n, 1)?);
    let ng = b.neg(g)?;
    Ok(vec![(0, unbroadcast(b, g, &sa)?), (1, unbroadcast(b, ng, &sb)?)])
}

fn vjp_mul(b: &mut GraphBuilder, n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    let (x, y) = (n.inputs[0], n.inputs[1]);
    let (sa, sb) = (input_shape(b, n, 0)?, input_shape(b, n, 1)?);
    let gx = b.mul(g, y)?;
    let gy = b.mul(g, x)?;
    Ok(vec![(0, unbroadcast(b, gx, &sa)?), (1, unbroadcast(b, gy, &sb)?)])
}

fn vjp_div(b: &mut GraphBuilder, n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    let den = n.inputs[1];
    let (sa, sb) = (input_shape(b, n, 0)?, input_shape(b, n, 1)?);
    let gx = b.div(g, den)?;
    // d(a/b)/db = -(a/b)/b
    let gy = b.mul(g, n.id)?;
    let gy = b.div(gy, den)?;
    let gy = b.neg(gy)?;
    Ok(vec![(0, unbroadcast(b, gx, &sa)?), (1, unbroadcast(b, gy, &sb)?)])
}

fn vjp_neg(b: &mut GraphBuilder, _n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    Ok(vec![(0, b.neg(g)?)])
}

fn vjp_matmul(b: &mut GraphBuilder, n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    let (x, y) = (n.inputs[0], n.inputs[1]);
    let yt = b.transpose(y)?;
    let xt = b.transpose(x)?;
    Ok(vec![(0, b.matmul(g, yt)?), (1, b.matmul(xt, g)?)])
}

fn vjp_pow(b: &mut GraphBuilder, n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    let NodeKind::Pow { exponent } = n.kind else { unreachable!() };
    if exponent == 0.0 {
        return Ok(Vec::new());
    }
    let k = b.scalar(exponent);
    let p = b.pow(n.inputs[0], exponent - 1.0)?;
    let d = b.mul(k, p)?;
    Ok(vec![(0, b.mul(g, d)?)])
}

fn vjp_exp(b: &mut GraphBuilder, n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    Ok(vec![(0, b.mul(g, n.id)?)])
}

fn vjp_log(b: &mut GraphBuilder, n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    Ok(vec![(0, b.div(g, n.inputs[0])?)])
}

fn vjp_sigmoid(b: &mut GraphBuilder, n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    let one = b.scalar(1.0);
    let rest = b.sub(one, n.id)?;
    let d = b.mul(n.id, rest)?;
    Ok(vec![(0, b.mul(g, d)?)])
}

fn vjp_reduce(b: &mut GraphBuilder, n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    let sa = input_shape(b, n, 0)?;
    let (axis, mean) = match n.kind {
        NodeKind::Sum { axis } => (axis, false),
        NodeKind::Mean { axis } => (axis, true),
        _ => unreachable!(),
    };
    let g = if mean {
        let count = sa.numel() / n.shape.numel();
        let scale = b.scalar(1.0 / count as f64);
        b.mul(g, scale)?
    } else {
        g
    };
    let spread = match axis {
        None => {
            let ones = b.constant(Tensor::ones(sa.clone()));
            let m = b.mul(g, ones)?;
            b.reshape(m, sa)?
        }
        Some(ax) => b.build(
            NodeKind::Expand {
                axis: ax,
                size: sa.dims()[ax],
            },
            &[g],
        )?,
    };
    Ok(vec![(0, spread)])
}

fn vjp_clip(b: &mut GraphBuilder, n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    let NodeKind::Clip { lo, hi } = n.kind else { unreachable!() };
    let mask = b.build(NodeKind::ClipMask { lo, hi }, &[n.inputs[0]])?;
    Ok(vec![(0, b.mul(g, mask)?)])
}

fn vjp_bce(b: &mut GraphBuilder, n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    let (p, t) = (n.inputs[0], n.inputs[1]);
    let (sp, st) = (input_shape(b, n, 0)?, input_shape(b, n, 1)?);
    let count = sp.numel().max(st.numel());
    let scale = b.scalar(1.0 / count as f64);
    let gs = b.mul(g, scale)?;
    let pc = b.clip(p, BCE_EPSILON, 1.0 - BCE_EPSILON)?;
    let one = b.scalar(1.0);
    let q = b.sub(one, pc)?;
    // dL/dp = (p - t) / (p (1 - p))
    let num = b.sub(pc, t)?;
    let den = b.mul(pc, q)?;
    let dp = b.div(num, den)?;
    let gp = b.mul(gs, dp)?;
    // dL/dt = ln((1 - p) / p)
    let ratio = b.div(q, pc)?;
    let dt = b.log(ratio)?;
    let gt = b.mul(gs, dt)?;
    Ok(vec![(0, unbroadcast(b, gp, &sp)?), (1, unbroadcast(b, gt, &st)?)])
}

fn vjp_transpose(b: &mut GraphBuilder, _n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    Ok(vec![(0, b.transpose(g)?)])
}

fn vjp_expand(b: &mut GraphBuilder, n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    let NodeKind::Expand { axis, .. } = n.kind else { unreachable!() };
    Ok(vec![(0, b.sum(g, Some(axis))?)])
}

fn vjp_concat(b: &mut GraphBuilder, n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    let mut offset = 0;
    let mut out = Vec::with_capacity(n.inputs.len());
    for i in 0..n.inputs.len() {
        let shape = input_shape(b, n, i)?;
        let len = shape.numel();
        let piece = b.build(NodeKind::Slice { start: offset, shape }, &[g])?;
        out.push((i, piece));
        offset += len;
    }
    Ok(out)
}

fn vjp_slice(b: &mut GraphBuilder, n: &Node, g: NodeId) -> Result<Contributions, GraphError> {
    let NodeKind::Slice { start, ref shape } = n.kind else { unreachable!() };
    let sa = input_shape(b, n, 0)?;
    let after = sa.numel() - start - shape.numel();
    let mut pieces = Vec::with_capacity(3);
    if start > 0 {
        pieces.push(b.constant(Tensor::zeros(Shape::vector(start))));
    }
    pieces.push(g);
    if after > 0 {
        pieces.push(b.constant(Tensor::zeros(Shape::vector(after))));
    }
    Ok(vec![(0, b.build(NodeKind::Concat { shape: sa }, &pieces)?)])
}

fn vjp_zero(_b: &mut GraphBuilder, _n: &Node, _g: NodeId) -> Result<Contributions, GraphError> {
    Ok(Vec::new())
}

/// Builds a graph computing `d outputs / d wrt` as an explicit matrix.
///
/// Rows enumerate output elements (outputs in order, each flattened row-major);
/// columns enumerate `wrt` elements the same way. Bounds are not required.
pub fn jacobian(graph: &Graph, wrt: &[NodeId]) -> Result<JacobianGraph, AutodiffError> {
    if graph.outputs().is_empty() {
        return Err(AutodiffError::NoOutputs);
    }
    for (i, &w) in wrt.iter().enumerate() {
        let node = graph.node(w).map_err(|_| AutodiffError::UnknownNode(w))?;
        if !node.kind.is_variable() {
            return Err(AutodiffError::NotAVariable(w));
        }
        if wrt[..i].contains(&w) {
            return Err(AutodiffError::DuplicateTarget(w));
        }
    }

    let n = graph.len();
    let mut depends = vec![false; n];
    for &w in wrt {
        depends[w.0] = true;
    }
    for node in graph.nodes() {
        if node.inputs.iter().any(|i| depends[i.0]) {
            depends[node.id.0] = true;
        }
    }
    for node in graph.nodes() {
        if depends[node.id.0] && !node.kind.is_leaf() && rule_for(&node.kind).is_none() {
            return Err(AutodiffError::NonDifferentiable {
                kind: node.kind.name(),
                node: node.id,
            });
        }
    }

    let rows = graph.output_size();
    let cols: usize = wrt.iter().map(|&w| graph.shape(w).numel()).sum();
    let mut b = graph.to_builder();
    let mut pieces = Vec::with_capacity(rows * wrt.len());
    let mut zero_cache: HashMap<NodeId, NodeId> = HashMap::new();

    for &out in graph.outputs() {
        let out_shape = graph.shape(out).clone();
        for element in 0..out_shape.numel() {
            let mut adjoint: HashMap<NodeId, NodeId> = HashMap::new();
            if depends[out.0] {
                let seed = b.constant(Tensor::one_hot(out_shape.clone(), element));
                adjoint.insert(out, seed);
            }
            for id in (0..=out.0).rev() {
                let id = NodeId(id);
                if !depends[id.0] {
                    continue;
                }
                let Some(&g) = adjoint.get(&id) else { continue };
                let node = &graph.nodes()[id.0];
                let Some(rule) = rule_for(&node.kind) else { continue };
                for (pos, contribution) in rule(&mut b, node, g)? {
                    let input = node.inputs[pos];
                    if !depends[input.0] {
                        continue;
                    }
                    let total = match adjoint.get(&input) {
                        Some(&prev) => b.add(prev, contribution)?,
                        None => contribution,
                    };
                    adjoint.insert(input, total);
                }
            }
            for &w in wrt {
                let piece = match adjoint.get(&w) {
                    Some(&g) => g,
                    None => *zero_cache
                        .entry(w)
                        .or_insert_with(|| b.constant(Tensor::zeros(graph.shape(w).clone()))),
                };
                pieces.push(piece);
            }
        }
    }

    let jac_shape = Shape::matrix(rows, cols.max(1));
    let j = if cols == 0 {
        b.constant(Tensor::zeros(jac_shape))
    } else {
        b.build(NodeKind::Concat { shape: jac_shape }, &pieces)?
    };
    b.set_outputs(vec![j])?;
    let optimized = optimize(&b.finish());
    let wrt_new = wrt
        .iter()
        .map(|&w| {
            let name = graph.name(w).expect("variables are named");
            optimized.variable(name).expect("optimize keeps variables")
        })
        .collect();
    Ok(JacobianGraph {
        graph: optimized,
        wrt: wrt_new,
        source: graph.fingerprint(),
        rows,
        cols,
    })
}

/// Applies [`jacobian`] `order` times. Order 2 yields a
/// `(rows * cols, cols)` matrix of second derivatives, and so on.
pub fn higher_order(graph: &Graph, wrt: &[NodeId], order: usize) -> Result<JacobianGraph, AutodiffError> {
    if order == 0 {
        return Err(AutodiffError::InvalidOrder);
    }
    let mut current = jacobian(graph, wrt)?;
    for _ in 1..order {
        let next = jacobian(&current.graph, &current.wrt)?;
        current = JacobianGraph {
            source: graph.fingerprint(),
            ..next
        };
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_graph(f: impl FnOnce(&mut GraphBuilder, NodeId) -> NodeId) -> (Graph, NodeId) {
        let mut b = GraphBuilder::new();
        let x = b.input("x", Shape::scalar());
        let y = f(&mut b, x);
        b.output(y).unwrap();
        let g = b.finish();
        (g, x)
    }

    fn eval_at(j: &JacobianGraph, x: f64) -> Vec<f64> {
        let inputs = j.wrt.iter().map(|&w| (w, Tensor::scalar(x))).collect();
        j.graph.evaluate(&inputs).unwrap()[0].data().to_vec()
    }

    #[test]
    fn affine_jacobian_is_constant() {
        let (g, x) = scalar_graph(|b, x| {
            let a = b.scalar(3.0);
            b.mul(a, x).unwrap()
        });
        let j = jacobian(&g, &[x]).unwrap();
        let out = j.graph.node(j.output()).unwrap();
        assert_eq!(out.kind.as_constant().unwrap().data(), &[3.0]);
        assert_eq!(j.graph.shape(j.output()), &Shape::matrix(1, 1));
    }

    #[test]
    fn square_and_sigmoid() {
        let (g, x) = scalar_graph(|b, x| b.mul(x, x).unwrap());
        assert!((eval_at(&jacobian(&g, &[x]).unwrap(), 0.7)[0] - 1.4).abs() < 1e-15);
        let (g, x) = scalar_graph(|b, x| b.sigmoid(x).unwrap());
        assert_eq!(eval_at(&jacobian(&g, &[x]).unwrap(), 0.0), vec![0.25]);
    }

    #[test]
    fn higher_orders() {
        let (g, x) = scalar_graph(|b, x| b.mul(x, x).unwrap());
        let h = higher_order(&g, &[x], 2).unwrap();
        assert_eq!(eval_at(&h, 0.3), vec![2.0]);
        let (g, x) = scalar_graph(|b, x| {
            let a = b.scalar(3.0);
            b.mul(a, x).unwrap()
        });
        assert_eq!(eval_at(&higher_order(&g, &[x], 2).unwrap(), 0.3), vec![0.0]);
        let (g, x) = scalar_graph(|b, x| b.exp(x).unwrap());
        let e3 = eval_at(&higher_order(&g, &[x], 3).unwrap(), 1.0)[0];
        assert!((e3 - std::f64::consts::E).abs() < 1e-12);
        assert_eq!(higher_order(&g, &[x], 0).unwrap_err(), AutodiffError::InvalidOrder);
    }

    #[test]
    fn clip_derivative_is_one_on_boundary() {
        let (g, x) = scalar_graph(|b, x| b.clip(x, 0.0, 1.0).unwrap());
        let j = jacobian(&g, &[x]).unwrap();
        assert_eq!(eval_at(&j, 1.0), vec![1.0]);
        assert_eq!(eval_at(&j, 0.5), vec![1.0]);
        assert_eq!(eval_at(&j, 1.5), vec![0.0]);
    }

    #[test]
    fn rejects_non_variables() {
        let (g, _) = scalar_graph(|b, x| b.exp(x).unwrap());
        let out = g.outputs()[0];
        assert_eq!(jacobian(&g, &[out]).unwrap_err(), AutodiffError::NotAVariable(out));
    }

    #[test]
    fn matrix_layout() {
        // y = W x with W (2x3), x (3x1): dy/dx = W.
        let mut b = GraphBuilder::new();
        let x = b.input("x", Shape::matrix(3, 1));
        let w = b.constant(Tensor::new(Shape::matrix(2, 3), vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = b.matmul(w, x).unwrap();
        b.output(y).unwrap();
        let g = b.finish();
        let j = jacobian(&g, &[x]).unwrap();
        let c = j.graph.node(j.output()).unwrap().kind.as_constant().unwrap().clone();
        assert_eq!(c.shape(), &Shape::matrix(2, 3));
        assert_eq!(c.data(), &[1., 2., 3., 4., 5., 6.]);
    }
}
