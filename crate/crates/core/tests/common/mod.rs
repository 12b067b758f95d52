//! Naive recursive interpreter sharing no code with the kernels.

#![allow(dead_code)]

use std::collections::HashMap;

use dpgraph_core::{Graph, NodeId, NodeKind, Shape, Tensor};

const KAPPA: f64 = 1e-7;

pub fn reference_eval(graph: &Graph, point: &HashMap<NodeId, Tensor>) -> Vec<Tensor> {
    let mut memo = HashMap::new();
    graph.outputs().iter().map(|&o| eval(graph, o, point, &mut memo)).collect()
}

fn at(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn eval(graph: &Graph, id: NodeId, point: &HashMap<NodeId, Tensor>, memo: &mut HashMap<NodeId, Tensor>) -> Tensor {
    if let Some(t) = memo.get(&id) {
        return t.clone();
    }
    let node = graph.node(id).unwrap();
    let shape = graph.shape(id).clone();
    let args: Vec<Tensor> = node.inputs.iter().map(|&a| eval(graph, a, point, memo)).collect();
    let n = shape.numel();
    let map1 = |f: &dyn Fn(f64) -> f64| (0..n).map(|i| f(args[0].data()[i])).collect::<Vec<_>>();
    let map2 = |f: &dyn Fn(f64, f64) -> f64| (0..n).map(|i| f(at(&args[0], i), at(&args[1], i))).collect::<Vec<_>>();
    let data: Vec<f64> = match &node.kind {
        NodeKind::Input | NodeKind::Parameter => point[&id].data().to_vec(),
        NodeKind::Constant(t) => t.data().to_vec(),
        NodeKind::Add => map2(&|a, b| a + b),
        NodeKind::Sub => map2(&|a, b| a - b),
        NodeKind::Mul => map2(&|a, b| a * b),
        NodeKind::Div => map2(&|a, b| a / b),
        NodeKind::Neg => map1(&|a| -a),
        NodeKind::Pow { exponent } => map1(&|a| a.powf(*exponent)),
        NodeKind::Exp => map1(&f64::exp),
        NodeKind::Log => map1(&f64::ln),
        NodeKind::Sigmoid => map1(&|a| 1.0 / (1.0 + (-a).exp())),
        NodeKind::Clip { lo, hi } => map1(&|a| a.max(*lo).min(*hi)),
        NodeKind::ClipMask { lo, hi } => map1(&|a| if a >= *lo && a <= *hi { 1.0 } else { 0.0 }),
        NodeKind::MatMul => {
            let (a, b) = (&args[0], &args[1]);
            let (r, k, c) = (a.shape().dims()[0], a.shape().dims()[1], b.shape().dims()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = (0..k).map(|l| a.data()[i * k + l] * b.data()[l * c + j]).sum();
                }
            }
            out
        }
        NodeKind::Sum { axis } | NodeKind::Mean { axis } => {
            let mean = matches!(node.kind, NodeKind::Mean { .. });
            let src = &args[0];
            match axis {
                None => {
                    let s: f64 = src.data().iter().sum();
                    vec![if mean { s / src.numel() as f64 } else { s }]
                }
                Some(ax) => {
                    let dims = src.shape().dims();
                    let outer: usize = dims[..*ax].iter().product();
                    let len = dims[*ax];
                    let inner: usize = dims[ax + 1..].iter().product();
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for i in 0..inner {
                            let s: f64 = (0..len).map(|l| src.data()[(o * len + l) * inner + i]).sum();
                            out[o * inner + i] = if mean { s / len as f64 } else { s };
                        }
                    }
                    out
                }
            }
        }
        NodeKind::BinaryCrossEntropy => {
            let m = args[0].numel().max(args[1].numel());
            let total: f64 = (0..m)
                .map(|i| {
                    let p = at(&args[0], i).clamp(KAPPA, 1.0 - KAPPA);
                    let t = at(&args[1], i);
                    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                })
                .sum();
            vec![total / m as f64]
        }
        NodeKind::Transpose => {
            let (r, c) = (args[0].shape().dims()[0], args[0].shape().dims()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = args[0].data()[i * c + j];
                }
            }
            out
        }
        NodeKind::Expand { axis, size } => {
            let dims = args[0].shape().dims();
            let outer: usize = dims[..*axis].iter().product();
            let inner: usize = dims[*axis..].iter().product();
            let mut out = Vec::with_capacity(n);
            for o in 0..outer {
                for _ in 0..*size {
                    out.extend_from_slice(&args[0].data()[o * inner..(o + 1) * inner]);
                }
            }
            out
        }
        NodeKind::Concat { .. } => args.iter().flat_map(|a| a.data().iter().copied()).collect(),
        NodeKind::Slice { start, .. } => args[0].data()[*start..start + n].to_vec(),
    };
    let t = Tensor::new(shape, data).unwrap();
    memo.insert(id, t.clone());
    t
}

pub fn max_abs_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            assert_eq!(x.shape(), y.shape());
            x.max_abs_diff(y).unwrap()
        })
        .fold(0.0, f64::max)
}

/// Evaluation point keyed by variable name, for comparing graphs with
/// different node numbering.
pub fn by_name(graph: &Graph, point: &HashMap<NodeId, Tensor>) -> HashMap<String, Tensor> {
    point.iter().map(|(&id, t)| (graph.name(id).unwrap().to_string(), t.clone())).collect()
}

pub fn from_names(graph: &Graph, named: &HashMap<String, Tensor>) -> HashMap<NodeId, Tensor> {
    graph.variables().map(|v| (v, named[graph.name(v).unwrap()].clone())).collect()
}

pub fn scalar_shape() -> Shape {
    Shape::scalar()
}
