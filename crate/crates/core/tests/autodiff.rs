mod common;

use std::collections::HashMap;

use common::{by_name, from_names};
use dpgraph_core::testkit::{finite_difference_jacobian, near_kink, random_graph, sample_point, GenConfig};
use dpgraph_core::{jacobian, Graph, GraphBuilder, NodeId, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn eval_jacobian(graph: &Graph, wrt: &[NodeId], point: &HashMap<NodeId, Tensor>) -> Tensor {
    let jg = jacobian(graph, wrt).unwrap();
    let named = by_name(graph, point);
    jg.graph.evaluate(&from_names(&jg.graph, &named)).unwrap().remove(0)
}

/// Point away from clip boundaries, where central differences straddle a
/// derivative jump.
fn smooth_point(graph: &Graph, rng: &mut impl Rng) -> HashMap<NodeId, Tensor> {
    for _ in 0..50 {
        let p = sample_point(graph, rng);
        if !near_kink(graph, &graph.evaluate_all(&p).unwrap(), 1e-3) {
            return p;
        }
    }
    panic!("no smooth point found");
}

fn fd_error(graph: &Graph, rng: &mut impl Rng) -> f64 {
    let wrt: Vec<NodeId> = graph.variables().collect();
    let p = smooth_point(graph, rng);
    let ad = eval_jacobian(graph, &wrt, &p);
    let fd = finite_difference_jacobian(graph, &wrt, &p, 1e-5);
    assert_eq!(ad.shape(), fd.shape());
    ad.data()
        .iter()
        .zip(fd.data())
        .map(|(a, f)| (a - f).abs() / f.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[test]
fn finite_differences_on_fifty_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..50 {
        let g = random_graph(seed, &GenConfig::default()).graph;
        let err = fd_error(&g, &mut rng);
        assert!(err < 1e-5, "seed {seed}: relative error {err:e}");
    }
}

/// Keeps the first output only.
fn single_output(graph: &Graph) -> (GraphBuilder, NodeId) {
    let mut b = graph.to_builder();
    let o = graph.outputs()[0];
    b.set_outputs(vec![o]).unwrap();
    (b, o)
}

/// A second query over the same variables, with the output shape of `o`.
fn companion(b: &mut GraphBuilder, vars: &[NodeId], o: NodeId) -> NodeId {
    let s = b.sigmoid(o).unwrap();
    let e = b.exp(s).unwrap();
    let c = b.scalar(0.7);
    let mut acc = b.mul(e, c).unwrap();
    for &v in vars {
        let sq = b.mul(v, v).unwrap();
        let t = b.sum(sq, None).unwrap();
        acc = b.add(acc, t).unwrap();
    }
    acc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn finite_differences(seed in any::<u64>()) {
        let g = random_graph(seed, &GenConfig::default()).graph;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let err = fd_error(&g, &mut rng);
        prop_assert!(err < 1e-5, "relative error {:e}", err);
    }

    #[test]
    fn linearity(seed in any::<u64>(), a in -3.0..3.0f64, bcoef in -3.0..3.0f64) {
        let rg = random_graph(seed, &GenConfig::default());
        let (mut b1, o1) = single_output(&rg.graph);
        let q1 = b1.clone().finish();
        let mut b2 = b1.clone();
        let o2 = companion(&mut b2, &rg.variables, o1);
        b2.set_outputs(vec![o2]).unwrap();
        let q2 = b2.finish();
        let o2 = companion(&mut b1, &rg.variables, o1);
        let ca = b1.scalar(a);
        let cb = b1.scalar(bcoef);
        let t1 = b1.mul(o1, ca).unwrap();
        let t2 = b1.mul(o2, cb).unwrap();
        let comb = b1.add(t1, t2).unwrap();
        b1.set_outputs(vec![comb]).unwrap();
        let q = b1.finish();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = sample_point(&q, &mut rng);
        let wrt = &rg.variables;
        let (j, j1, j2) = (eval_jacobian(&q, wrt, &p), eval_jacobian(&q1, wrt, &p), eval_jacobian(&q2, wrt, &p));
        for i in 0..j.numel() {
            let want = a * j1.data()[i] + bcoef * j2.data()[i];
            prop_assert!((j.data()[i] - want).abs() <= 1e-12 * want.abs().max(1.0),
                "entry {}: {} vs {}", i, j.data()[i], want);
        }
    }

    #[test]
    fn chain_rule(seed in any::<u64>()) {
        let rg = random_graph(seed, &GenConfig::default());
        let (mut b, o1) = single_output(&rg.graph);
        let q1 = b.clone().finish();
        let ys = rg.graph.shape(o1).clone();
        let comp_out = outer(&mut b, o1);
        b.set_outputs(comp_out).unwrap();
        let comp = b.finish();

        let mut ob = GraphBuilder::new();
        let y = ob.input("y", ys.clone());
        ob.bound_uniform(y, -1e3, 1e3).unwrap();
        let outs = outer(&mut ob, y);
        ob.set_outputs(outs).unwrap();
        let q2 = ob.finish();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = sample_point(&comp, &mut rng);
        let wrt = &rg.variables;
        let j = eval_jacobian(&comp, wrt, &p);
        let j1 = eval_jacobian(&q1, wrt, &p);
        let yv = q1.evaluate(&p).unwrap().remove(0);
        let j2 = eval_jacobian(&q2, &[y], &HashMap::from([(y, yv)]));

        let (r, m, n) = (j2.shape().dims()[0], j2.shape().dims()[1], j1.shape().dims()[1]);
        prop_assert_eq!(j1.shape().dims()[0], m);
        for i in 0..r {
            for k in 0..n {
                let want: f64 = (0..m).map(|l| j2.data()[i * m + l] * j1.data()[l * n + k]).sum();
                let got = j.data()[i * n + k];
                prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "({}, {}): {} vs {}", i, k, got, want);
            }
        }
    }
}

/// Smooth vector-valued map applied to `y`, with three scalar outputs.
fn outer(b: &mut GraphBuilder, y: NodeId) -> Vec<NodeId> {
    let s = b.sigmoid(y).unwrap();
    let sy = b.mul(s, y).unwrap();
    let a = b.sum(sy, None).unwrap();
    let e = b.exp(s).unwrap();
    let se = b.sum(e, None).unwrap();
    let l = b.log(se).unwrap();
    let sq = b.pow(y, 2.0).unwrap();
    let m = b.mean(sq, None).unwrap();
    vec![a, l, m]
}

#[test]
fn empty_wrt_gives_zero_column() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", Shape::vector(2));
    b.bound_uniform(x, 0.0, 1.0).unwrap();
    let s = b.sum(x, None).unwrap();
    b.output(s).unwrap();
    let g = b.finish();
    let jg = jacobian(&g, &[]).unwrap();
    assert_eq!((jg.rows, jg.cols), (1, 0));
}
