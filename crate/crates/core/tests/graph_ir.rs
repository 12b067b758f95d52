mod common;

use common::{by_name, from_names, max_abs_diff, reference_eval};
use dpgraph_core::graph::ModelFile;
use dpgraph_core::testkit::{random_graph, sample_point, GenConfig};
use dpgraph_core::{optimize, GraphBuilder, NodeKind, Shape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimize_preserves_semantics(seed in any::<u64>()) {
        let rg = random_graph(seed, &GenConfig::default());
        let opt = optimize(&rg.graph);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let p = sample_point(&rg.graph, &mut rng);
            let want = reference_eval(&rg.graph, &p);
            let got = opt.evaluate(&from_names(&opt, &by_name(&rg.graph, &p))).unwrap();
            prop_assert!(max_abs_diff(&want, &got) <= 1e-12, "seed {}", seed);
        }
    }

    #[test]
    fn optimize_is_idempotent(seed in any::<u64>()) {
        let rg = random_graph(seed, &GenConfig::default());
        let once = optimize(&rg.graph);
        let twice = optimize(&once);
        prop_assert_eq!(once.len(), twice.len());
        prop_assert_eq!(once.fingerprint(), twice.fingerprint());
    }

    #[test]
    fn topological_order_is_stable(seed in any::<u64>()) {
        let a = random_graph(seed, &GenConfig::default()).graph;
        let b = random_graph(seed, &GenConfig::default()).graph;
        let order = a.topological_order().unwrap();
        prop_assert_eq!(&order, &b.topological_order().unwrap());
        let mut pos = vec![0; a.len()];
        for (i, id) in order.iter().enumerate() {
            pos[id.0] = i;
        }
        for n in a.nodes() {
            for &i in &n.inputs {
                prop_assert!(pos[i.0] < pos[n.id.0]);
            }
        }
    }

    #[test]
    fn model_file_round_trip(seed in any::<u64>()) {
        let rg = random_graph(seed, &GenConfig::default());
        let text = ModelFile::from_graph(&rg.graph).to_json_pretty();
        let back = ModelFile::load(&text).unwrap();
        prop_assert_eq!(back.fingerprint(), rg.graph.fingerprint());
    }
}

#[test]
fn constants_fold() {
    let mut b = GraphBuilder::new();
    let c1 = b.scalar(2.0);
    let c2 = b.scalar(3.0);
    let s = b.add(c1, c2).unwrap();
    b.output(s).unwrap();
    let opt = optimize(&b.finish());
    assert_eq!(opt.len(), 1);
    assert_eq!(opt.nodes()[0].kind, NodeKind::Constant(Tensor::scalar(5.0)));
}

#[test]
fn identical_subtrees_are_shared() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", Shape::scalar());
    b.bound_uniform(x, 0.0, 1.0).unwrap();
    let s1 = b.sigmoid(x).unwrap();
    let s2 = b.sigmoid(x).unwrap();
    let y = b.mul(s1, s2).unwrap();
    b.output(y).unwrap();
    let opt = optimize(&b.finish());
    let sigmoids = opt.nodes().iter().filter(|n| n.kind == NodeKind::Sigmoid).count();
    assert_eq!(sigmoids, 1);
}

#[test]
fn construction_order_does_not_change_fingerprint() {
    let build = |swap: bool| {
        let mut b = GraphBuilder::new();
        let (x, w) = if swap {
            let w = b.parameter("w", Shape::scalar());
            (b.input("x", Shape::scalar()), w)
        } else {
            let x = b.input("x", Shape::scalar());
            (x, b.parameter("w", Shape::scalar()))
        };
        b.bound_uniform(x, 0.0, 1.0).unwrap();
        b.bound_uniform(w, -1.0, 1.0).unwrap();
        let (e, s) = if swap {
            let s = b.sigmoid(w).unwrap();
            (b.exp(x).unwrap(), s)
        } else {
            let e = b.exp(x).unwrap();
            (e, b.sigmoid(w).unwrap())
        };
        let y = b.mul(e, s).unwrap();
        b.output(y).unwrap();
        b.finish()
    };
    assert_eq!(build(false).fingerprint(), build(true).fingerprint());
}

#[test]
fn model_file_rejects_unknown_keys() {
    let src = r#"{"tensors": [], "ops": [], "outputs": [], "extra": 1}"#;
    assert!(ModelFile::parse(src).is_err());
}

#[test]
fn model_file_diagnostics_carry_lines() {
    let src = r#"{
  "tensors": [
    {"name": "x", "shape": [], "role": "private_input", "bounds": [0, 1]}
  ],
  "ops": [
    {"name": "y", "kind": "Frobnicate", "inputs": ["x"]}
  ],
  "outputs": ["y"]
}"#;
    let err = ModelFile::load(src).unwrap_err().to_string();
    assert!(err.contains("line 6"), "{err}");
}
