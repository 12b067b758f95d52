use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dpgraph_bench::{inputs, network, WIDTHS};
use dpgraph_core::models::mlp_param_count;
use dpgraph_core::Compiler;

fn compile_cold(c: &mut Criterion) {
    let mut group = c.benchmark_group("compile_cold");
    for width in WIDTHS {
        let mlp = network(width);
        group.bench_with_input(BenchmarkId::from_parameter(mlp_param_count(1, width)), &mlp, |b, mlp| {
            b.iter(|| Compiler::new().compile(&mlp.graph).unwrap());
        });
    }
    group.finish();
}

fn compile_cached(c: &mut Criterion) {
    let mut group = c.benchmark_group("compile_cached");
    for width in WIDTHS {
        let mlp = network(width);
        let compiler = Compiler::new();
        compiler.compile(&mlp.graph).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(mlp_param_count(1, width)), &mlp, |b, mlp| {
            b.iter(|| compiler.compile(&mlp.graph).unwrap());
        });
    }
    group.finish();
}

fn execute(c: &mut Criterion) {
    let mut group = c.benchmark_group("execute");
    for width in WIDTHS {
        let mlp = network(width);
        let program = Compiler::new().compile(&mlp.graph).unwrap();
        let x = inputs(&mlp);
        group.bench_with_input(BenchmarkId::from_parameter(mlp_param_count(1, width)), &x, |b, x| {
            b.iter(|| program.execute(x).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, compile_cold, compile_cached, execute);
criterion_main!(benches);
