//! Reference query graphs.

use crate::graph::{Graph, GraphBuilder, GraphError, NodeId};
use crate::tensor::{Shape, Tensor};

/// Handles into a graph built by [`mlp_bce`].
#[derive(Debug, Clone)]
pub struct Mlp {
    pub graph: Graph,
    pub input: NodeId,
    /// Weight and bias of each layer, in order.
    pub layers: Vec<(NodeId, NodeId)>,
    /// Output of the last sigmoid.
    pub prediction: NodeId,
    pub loss: NodeId,
}

impl Mlp {
    pub fn parameters(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Number of scalar weights in [`mlp_bce`]: `d*w + w + 2(w^2 + w) + w + 1`.
pub fn mlp_param_count(input_dim: usize, width: usize) -> usize {
    input_dim * width + width + 2 * (width * width + width) + width + 1
}

/// Four linear layers, each followed by a sigmoid, then binary cross-entropy
/// against the constant label `target`.
///
/// The input `x` has shape `(1, input_dim)`; hidden layers have `width`
/// units and the last layer one. Input and every weight are bounded by
/// `[lo, hi]`.
pub fn mlp_bce(input_dim: usize, width: usize, target: f64, (lo, hi): (f64, f64)) -> Result<Mlp, GraphError> {
    let mut b = GraphBuilder::new();
    let x = b.input("x", Shape::matrix(1, input_dim));
    b.bound_uniform(x, lo, hi)?;
    let dims = [(input_dim, width), (width, width), (width, width), (width, 1)];
    let mut h = x;
    let mut layers = Vec::with_capacity(dims.len());
    for (k, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = b.parameter(format!("w{}", k + 1), Shape::matrix(fan_in, fan_out));
        let bias = b.parameter(format!("b{}", k + 1), Shape::matrix(1, fan_out));
        b.bound_uniform(w, lo, hi)?;
        b.bound_uniform(bias, lo, hi)?;
        let z = b.matmul(h, w)?;
        let z = b.add(z, bias)?;
        h = b.sigmoid(z)?;
        layers.push((w, bias));
    }
    let t = b.constant(Tensor::filled(Shape::matrix(1, 1), target));
    let loss = b.bce(h, t)?;
    b.output(loss)?;
    Ok(Mlp {
        graph: b.finish(),
        input: x,
        layers,
        prediction: h,
        loss,
    })
}

/// `mean(x)` over a vector of `n` records bounded by `[lo, hi]`.
pub fn mean_query(n: usize, (lo, hi): (f64, f64)) -> Result<(Graph, NodeId), GraphError> {
    let mut b = GraphBuilder::new();
    let x = b.input("x", Shape::vector(n));
    b.bound_uniform(x, lo, hi)?;
    let m = b.mean(x, None)?;
    b.output(m)?;
    Ok((b.finish(), x))
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    #[test]
    fn mlp_validates_and_counts_parameters() {
        let m = mlp_bce(1, 2, 1.0, (0.0, 1.0)).unwrap();
        m.graph.validate().unwrap();
        let total: usize = m.parameters().iter().map(|&p| m.graph.shape(p).numel()).sum();
        assert_eq!(total, mlp_param_count(1, 2));
        assert_eq!(mlp_param_count(1, 16), 593);
    }

    #[test]
    fn zero_weights_give_ln2_loss() {
        let m = mlp_bce(3, 4, 1.0, (0.0, 1.0)).unwrap();
        let inputs: HashMap<NodeId, Tensor> = m
            .graph
            .variables()
            .map(|v| (v, Tensor::zeros(m.graph.shape(v).clone())))
            .collect();
        let values = m.graph.evaluate_all(&inputs).unwrap();
        assert_eq!(values[m.prediction.0].data(), &[0.5]);
        let loss = values[m.loss.0].item().unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
