mod common;

use common::{by_name, from_names};
use dpgraph_core::testkit::{random_graph, sample_point, GenConfig};
use dpgraph_core::{
    estimate_sensitivity, ibp_sensitivity, jacobian, propagate, Graph, GraphBuilder, Method, SensitivityConfig,
    Shape, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_sound(graph: &Graph, samples: usize, rng: &mut impl Rng) {
    let prop = propagate(graph, graph.bounds()).unwrap();
    for _ in 0..samples {
        let p = sample_point(graph, rng);
        for (i, v) in graph.evaluate_all(&p).unwrap().iter().enumerate() {
            let iv = &prop.intervals()[i];
            assert!(iv.contains(v), "node %{i}: {v:?} outside [{:?}, {:?}]", iv.lo, iv.hi);
        }
    }
}

#[test]
fn monte_carlo_soundness() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..30 {
        let rg = random_graph(seed, &GenConfig::default());
        assert_sound(&rg.graph, 1000, &mut rng);
    }
}

#[test]
fn monte_carlo_soundness_of_jacobians() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for seed in 0..30 {
        let rg = random_graph(seed, &GenConfig::default());
        let j = jacobian(&rg.graph, &rg.variables).unwrap();
        let mut b = j.graph.to_builder();
        for v in j.graph.variables() {
            let src = rg.graph.variable(j.graph.name(v).unwrap()).unwrap();
            b.set_bounds(v, rg.graph.bounds()[&src].clone()).unwrap();
        }
        assert_sound(&b.finish(), 1000, &mut rng);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn soundness(seed in any::<u64>()) {
        let rg = random_graph(seed, &GenConfig::default());
        assert_sound(&rg.graph, 200, &mut ChaCha8Rng::seed_from_u64(seed));
    }

    #[test]
    fn ibp_dominates_global_opt(seed in any::<u64>()) {
        let rg = random_graph(seed, &GenConfig::scalar(3));
        let g = &rg.graph;
        let ibp = ibp_sensitivity(g, &rg.variables, g.bounds()).unwrap();
        let opt = estimate_sensitivity(g, &rg.variables, g.bounds(), Method::GlobalOpt, &SensitivityConfig::default()).unwrap();
        prop_assert!(ibp.bound >= opt.bound, "ibp {} < global {}", ibp.bound, opt.bound);
    }

    #[test]
    fn linear_graphs_are_exact(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_t = |shape: Shape| {
            let data = (0..shape.numel()).map(|_| rng.random_range(-2.0..2.0)).collect();
            Tensor::new(shape, data).unwrap()
        };
        let mut b = GraphBuilder::new();
        let x = b.input("x", Shape::matrix(3, 1));
        b.bound_uniform(x, -1.0, 1.0).unwrap();
        let w1 = b.constant(rand_t(Shape::matrix(4, 3)));
        let b1 = b.constant(rand_t(Shape::matrix(4, 1)));
        let w2 = b.constant(rand_t(Shape::matrix(2, 4)));
        let b2 = b.constant(rand_t(Shape::matrix(2, 1)));
        let h = b.matmul(w1, x).unwrap();
        let h = b.add(h, b1).unwrap();
        let y = b.matmul(w2, h).unwrap();
        let y = b.add(y, b2).unwrap();
        b.output(y).unwrap();
        let g = b.finish();

        let ibp = ibp_sensitivity(&g, &[x], g.bounds()).unwrap();
        let jg = jacobian(&g, &[x]).unwrap();
        let p = sample_point(&g, &mut ChaCha8Rng::seed_from_u64(seed));
        let jv = jg.graph.evaluate(&from_names(&jg.graph, &by_name(&g, &p))).unwrap().remove(0);
        prop_assert_eq!(ibp.bound, jv.l2_norm());
    }
}

#[test]
fn ibp_dominates_on_tensor_graphs() {
    for seed in 0..20 {
        let rg = random_graph(seed, &GenConfig::default());
        let g = &rg.graph;
        let ibp = ibp_sensitivity(g, &rg.variables, g.bounds()).unwrap();
        let opt = estimate_sensitivity(g, &rg.variables, g.bounds(), Method::GlobalOpt, &SensitivityConfig::default()).unwrap();
        assert!(ibp.bound >= opt.bound, "seed {seed}: ibp {} < global {}", ibp.bound, opt.bound);
    }
}

#[test]
fn report_shape() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", Shape::scalar());
    b.bound_uniform(x, 0.0, 1.0).unwrap();
    let y = b.mul(x, x).unwrap();
    b.output(y).unwrap();
    let g = b.finish();
    let r = ibp_sensitivity(&g, &[x], g.bounds()).unwrap();
    assert_eq!(r.method, Method::Ibp);
    assert_eq!(r.interval_low, 0.0);
    assert!(r.argmax.is_none());
    assert_eq!(r.bound, 2.0);
}

