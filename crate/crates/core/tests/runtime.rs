mod common;

use std::collections::HashMap;
use std::time::Instant;

use common::{max_abs_diff, reference_eval};
use dpgraph_core::models::{mlp_bce, mlp_param_count};
use dpgraph_core::runtime::{write_csv, CSV_HEADER};
use dpgraph_core::testkit::{random_graph, sample_point, GenConfig};
use dpgraph_core::{benchmark, Compiler, GraphBuilder, RuntimeError, Shape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matches_reference_interpreter(seed in any::<u64>()) {
        let rg = random_graph(seed, &GenConfig::default());
        let program = Compiler::new().compile_uncached(&rg.graph).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let p = sample_point(&rg.graph, &mut rng);
            let got = program.execute(&p).unwrap();
            prop_assert!(max_abs_diff(&reference_eval(&rg.graph, &p), &got) <= 1e-12);
        }
    }

    #[test]
    fn cached_and_cold_programs_agree(seed in any::<u64>()) {
        let rg = random_graph(seed, &GenConfig::default());
        let compiler = Compiler::new();
        let cold = compiler.compile(&rg.graph).unwrap();
        let cached = compiler.compile(&rg.graph).unwrap();
        let fresh = Compiler::new().compile_uncached(&rg.graph).unwrap();
        prop_assert_eq!(compiler.cached_len(), 1);
        prop_assert_eq!(cold.fingerprint(), fresh.fingerprint());
        let p = sample_point(&rg.graph, &mut ChaCha8Rng::seed_from_u64(seed));
        let a = cached.execute(&p).unwrap();
        prop_assert_eq!(&a, &fresh.execute(&p).unwrap());
        prop_assert_eq!(&a, &cold.execute(&p).unwrap());
    }

    #[test]
    fn execution_is_bit_exact(seed in any::<u64>()) {
        let rg = random_graph(seed, &GenConfig::default());
        let program = Compiler::new().compile(&rg.graph).unwrap();
        let p = sample_point(&rg.graph, &mut ChaCha8Rng::seed_from_u64(seed));
        let bits = |v: Vec<Tensor>| v.into_iter().flat_map(|t| t.into_data()).map(f64::to_bits).collect::<Vec<_>>();
        let first = bits(program.execute(&p).unwrap());
        for _ in 0..5 {
            prop_assert_eq!(&first, &bits(program.execute(&p).unwrap()));
        }
    }
}

#[test]
fn zero_mlp_loss_is_ln2() {
    let mlp = mlp_bce(3, 8, 1.0, (0.0, 1.0)).unwrap();
    let program = Compiler::new().compile(&mlp.graph).unwrap();
    let inputs: HashMap<_, _> = mlp
        .graph
        .variables()
        .map(|v| (v, Tensor::zeros(mlp.graph.shape(v).clone())))
        .collect();
    let out = program.execute(&inputs).unwrap();
    assert!((out[0].item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(mlp.graph.variables().map(|v| mlp.graph.shape(v).numel()).sum::<usize>(), 3 + mlp_param_count(3, 8));
}

#[test]
fn cached_compile_is_faster() {
    let mlp = mlp_bce(1, 256, 1.0, (0.0, 1.0)).unwrap();
    let compiler = Compiler::new();
    let t = Instant::now();
    let cold = compiler.compile(&mlp.graph).unwrap();
    let cold_time = t.elapsed();
    let t = Instant::now();
    let warm = compiler.compile(&mlp.graph).unwrap();
    let warm_time = t.elapsed();
    assert_eq!(cold.fingerprint(), warm.fingerprint());
    assert!(cold_time >= 5 * warm_time, "cold {cold_time:?} cached {warm_time:?}");
}

#[test]
fn execute_errors() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", Shape::vector(2));
    b.bound_uniform(x, -1.0, 1.0).unwrap();
    let y = b.log(x).unwrap();
    b.output(y).unwrap();
    let g = b.finish();
    let program = Compiler::new().compile(&g).unwrap();
    assert!(matches!(program.execute(&HashMap::new()), Err(RuntimeError::MissingInput { .. })));
    let wrong = HashMap::from([(x, Tensor::zeros(Shape::vector(3)))]);
    assert!(matches!(program.execute(&wrong), Err(RuntimeError::ShapeMismatch { .. })));
    let negative = HashMap::from([(x, Tensor::from_vec(vec![0.5, -0.5]))]);
    assert!(matches!(program.execute(&negative), Err(RuntimeError::NumericalError { kind: "Log", .. })));
    let ok = HashMap::from([(x, Tensor::from_vec(vec![1.0, 1.0]))]);
    assert_eq!(program.execute(&ok).unwrap()[0].data(), &[0.0, 0.0]);
}

#[test]
fn concurrent_execution() {
    let rg = random_graph(5, &GenConfig::default());
    let program = Compiler::new().compile(&rg.graph).unwrap();
    let p = sample_point(&rg.graph, &mut ChaCha8Rng::seed_from_u64(5));
    let want = program.execute(&p).unwrap();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..4).map(|_| s.spawn(|| program.execute(&p).unwrap())).collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), want);
        }
    });
}

#[test]
fn benchmark_records() {
    let records = benchmark(&[4, 8, 16], 3).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records.windows(2).all(|w| w[0].param_count < w[1].param_count));
    for r in &records {
        assert_eq!(r.param_count, mlp_param_count(1, r.width));
        assert!(r.compile_s > 0.0 && r.compile_cached_s > 0.0 && r.exec_us > 0.0);
    }
    let mut csv = Vec::new();
    write_csv(&records, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(text.lines().count(), 4);
}
