//! Compile and execution timing over MLPs of increasing width.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Compiler, RuntimeError};
use crate::graph::NodeId;
use crate::models::{mlp_bce, mlp_param_count};
use crate::tensor::Tensor;

/// CSV header written by [`write_csv`].
pub const CSV_HEADER: &str = "width,param_count,compile_s,compile_cached_s,exec_us";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub width: usize,
    pub param_count: usize,
    /// Cold compile, seconds.
    pub compile_s: f64,
    /// Compile of the same graph again, served from the cache, seconds.
    pub compile_cached_s: f64,
    /// Median execution time, microseconds.
    pub exec_us: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times the MLP at each width: one cold compile into a fresh cache, one
/// cached recompile, and the median of `repetitions` executions.
pub fn benchmark(widths: &[usize], repetitions: usize) -> Result<Vec<BenchRecord>, RuntimeError> {
    const INPUT_DIM: usize = 1;
    let repetitions = repetitions.max(1);
    // warm code paths and the allocator before the first timed compile
    {
        let warm = mlp_bce(INPUT_DIM, 2, 1.0, (0.0, 1.0)).expect("mlp construction");
        Compiler::new().compile(&warm.graph)?;
    }
    let mut records = Vec::with_capacity(widths.len());
    for &width in widths {
        let mlp = mlp_bce(INPUT_DIM, width, 1.0, (0.0, 1.0)).expect("mlp construction");
        let compiler = Compiler::new();

        let start = Instant::now();
        let program = compiler.compile(&mlp.graph)?;
        let compile_s = start.elapsed().as_secs_f64();

        let start = Instant::now();
        let again = compiler.compile(&mlp.graph)?;
        let compile_cached_s = start.elapsed().as_secs_f64();
        debug_assert!(std::sync::Arc::ptr_eq(&program, &again));

        let inputs: HashMap<NodeId, Tensor> = mlp
            .graph
            .variables()
            .map(|v| (v, Tensor::filled(mlp.graph.shape(v).clone(), 0.5)))
            .collect();
        let mut times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            let out = program.execute(&inputs)?;
            times.push(start.elapsed().as_secs_f64() * 1e6);
            std::hint::black_box(out);
        }
        records.push(BenchRecord {
            width,
            param_count: mlp_param_count(INPUT_DIM, width),
            compile_s,
            compile_cached_s,
            exec_us: median(times),
        });
    }
    Ok(records)
}

pub fn write_csv(records: &[BenchRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{:.9},{:.9},{:.3}",
            r.width, r.param_count, r.compile_s, r.compile_cached_s, r.exec_us
        )?;
    }
    Ok(())
}
