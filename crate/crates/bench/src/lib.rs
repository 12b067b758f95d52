//! Shared fixtures for the benchmarks.

use std::collections::HashMap;

use dpgraph_core::models::{mlp_bce, Mlp};
use dpgraph_core::{NodeId, Tensor};

pub const WIDTHS: [usize; 4] = [16, 64, 256, 1024];

/// Benchmark network of the given width over one input feature.
pub fn network(width: usize) -> Mlp {
    mlp_bce(1, width, 1.0, (0.0, 1.0)).expect("valid architecture")
}

/// Every variable filled with 0.5.
pub fn inputs(mlp: &Mlp) -> HashMap<NodeId, Tensor> {
    mlp.graph
        .variables()
        .map(|v| (v, Tensor::filled(mlp.graph.shape(v).clone(), 0.5)))
        .collect()
}
