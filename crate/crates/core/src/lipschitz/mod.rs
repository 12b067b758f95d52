//! Sensitivity as the supremum of the Jacobian spectral norm over the
//! bounded domain.

mod optimizer;
mod spectral;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optimizer::{global_maximize, grid_maximize, BoxDomain, Objective, Optimum, OptimizerConfig};
pub use spectral::{spectral_norm, top_singular, Singular, POWER_MAX_ITERS, POWER_TOLERANCE, SVD_LIMIT};

use crate::autodiff::{jacobian, AutodiffError, JacobianGraph};
use crate::graph::{optimize, Bounds, BoundsSpec, Fingerprint, Graph, NodeId};
use crate::interval::{ibp_sensitivity, IntervalError};
use crate::runtime::{self, CompiledProgram, RuntimeError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LipschitzError {
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("grid oracle over {dim} free variables exceeds the cap of {cap}")]
    DimensionTooLarge { dim: usize, cap: usize },
    #[error("optimizer failure: {0}")]
    OptimizerFailure(String),
    #[error("no bounds for variable {0}")]
    MissingBounds(String),
    #[error("frozen value for {name}: {detail}")]
    InvalidFrozen { name: String, detail: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Interval(#[from] IntervalError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ibp,
    GlobalOpt,
    GridOracle,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ibp => "ibp",
            Method::GlobalOpt => "global_opt",
            Method::GridOracle => "grid_oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ibp" => Ok(Method::Ibp),
            "global_opt" => Ok(Method::GlobalOpt),
            "grid_oracle" => Ok(Method::GridOracle),
            other => Err(format!("unknown method {other:?} (expected ibp, global_opt or grid_oracle)")),
        }
    }
}

/// Outcome of one sensitivity analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub method: Method,
    /// Upper end of the reported interval.
    pub bound: f64,
    /// Zero for the interval method; equal to `bound` for point methods.
    pub interval_low: f64,
    pub certified: bool,
    /// Value of every variable at the maximizing point.
    pub argmax: Option<BTreeMap<String, Tensor>>,
    pub wall_time_ms: f64,
    pub warning: Option<String>,
    /// Hex fingerprint of the optimized graph the bound applies to.
    pub fingerprint: String,
}

/// Fingerprint a compiled program of `graph` with `bounds` attached would
/// carry.
pub fn analysis_fingerprint(graph: &Graph, bounds: &BoundsSpec) -> Fingerprint {
    if bounds == graph.bounds() {
        return optimize(graph).fingerprint();
    }
    match graph.with_bounds(bounds.clone()) {
        Ok(g) => optimize(&g).fingerprint(),
        Err(_) => optimize(graph).fingerprint(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub optimizer: OptimizerConfig,
    /// Grid points per axis for the grid oracle.
    pub grid_resolution: usize,
    pub grid_dim_cap: usize,
    /// Variables held at fixed values instead of ranging over their bounds.
    pub frozen: BTreeMap<String, Tensor>,
    /// Use second derivatives for the ascent direction when the Jacobian has
    /// at most this many entries; finite differences otherwise.
    pub hessian_limit: usize,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            grid_resolution: 201,
            grid_dim_cap: 4,
            frozen: BTreeMap::new(),
            hessian_limit: 256,
        }
    }
}

/// Upper bound on the L2 sensitivity of `graph` with respect to `wrt`.
///
/// The supremum ranges jointly over every bounded variable that is not
/// frozen, so parameters with bounds are maximized over as well.
pub fn estimate_sensitivity(
    graph: &Graph,
    wrt: &[NodeId],
    bounds: &BoundsSpec,
    method: Method,
    config: &SensitivityConfig,
) -> Result<SensitivityReport, LipschitzError> {
    let start = Instant::now();
    let fingerprint = analysis_fingerprint(graph, bounds).to_hex();
    check_frozen(graph, &config.frozen)?;
    if method == Method::Ibp {
        let mut ibp_bounds = BoundsSpec::new();
        for v in graph.variables() {
            let name = graph.name(v).unwrap_or_default();
            if let Some(t) = config.frozen.get(name) {
                ibp_bounds.insert(v, Bounds { lo: t.clone(), hi: t.clone() });
            } else if let Some(b) = bounds.get(&v) {
                ibp_bounds.insert(v, b.clone());
            }
        }
        let mut report = ibp_sensitivity(graph, wrt, &ibp_bounds)?;
        report.fingerprint = fingerprint;
        report.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        return Ok(report);
    }

    let objective = JacobianObjective::new(graph, wrt, bounds, config)?;
    let bx = objective.domain();
    let optimum = match method {
        Method::GlobalOpt => global_maximize(&objective, &bx, &config.optimizer),
        Method::GridOracle => {
            if bx.dim() > config.grid_dim_cap {
                return Err(LipschitzError::DimensionTooLarge {
                    dim: bx.dim(),
                    cap: config.grid_dim_cap,
                });
            }
            grid_maximize(&objective, &bx, config.grid_resolution)
        }
        Method::Ibp => unreachable!(),
    }
    .ok_or_else(|| LipschitzError::OptimizerFailure("no feasible point in the domain".into()))?;

    Ok(SensitivityReport {
        method,
        bound: optimum.value,
        interval_low: optimum.value,
        certified: method == Method::GlobalOpt && optimum.certified,
        argmax: Some(objective.assignment(graph, &optimum.argmax)),
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        warning: optimum.warning,
        fingerprint,
    })
}

fn check_frozen(graph: &Graph, frozen: &BTreeMap<String, Tensor>) -> Result<(), LipschitzError> {
    for (name, t) in frozen {
        let bad = |detail: String| LipschitzError::InvalidFrozen {
            name: name.clone(),
            detail,
        };
        let id = graph.variable(name).ok_or_else(|| bad("no such variable".into()))?;
        if t.shape() != graph.shape(id) {
            return Err(bad(format!("shape {} does not match {}", t.shape(), graph.shape(id))));
        }
        if !t.is_finite() {
            return Err(bad("non-finite value".into()));
        }
    }
    Ok(())
}

/// `v -> ||J(v)||_2` over the free coordinates of the compiled Jacobian.
///
/// Free coordinates are the elements of bounded, non-frozen variables that
/// the Jacobian reads and whose interval is not a single point.
pub struct JacobianObjective {
    program: Arc<CompiledProgram>,
    /// Value of each program input with free coordinates at their lower bound.
    template: Vec<Tensor>,
    /// `(program input, element)` for each free coordinate.
    coords: Vec<(usize, usize)>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// Fixed values of variables the Jacobian does not read, for reporting.
    idle: BTreeMap<String, Tensor>,
    hessian: Option<Hessian>,
    cols: usize,
}

struct Hessian {
    program: Arc<CompiledProgram>,
    /// For each Hessian program input, the Jacobian program input it mirrors.
    input_map: Vec<usize>,
    /// Hessian column of each free coordinate.
    columns: Vec<usize>,
}

impl JacobianObjective {
    pub fn new(graph: &Graph, wrt: &[NodeId], bounds: &BoundsSpec, config: &SensitivityConfig) -> Result<Self, LipschitzError> {
        let jac = jacobian(graph, wrt)?;
        // Carry bounds over by name; frozen variables become degenerate boxes.
        let mut jb = BoundsSpec::new();
        for v in jac.graph.variables() {
            let name = jac.graph.name(v).unwrap_or_default();
            let src = graph.variable(name).expect("jacobian keeps variable names");
            if let Some(t) = config.frozen.get(name) {
                jb.insert(v, Bounds { lo: t.clone(), hi: t.clone() });
            } else if let Some(b) = bounds.get(&src) {
                jb.insert(v, b.clone());
            }
        }
        let jgraph = jac.graph.with_bounds(jb).map_err(|e| LipschitzError::Autodiff(e.into()))?;
        let program = runtime::compile(&jgraph)?;

        let mut template = Vec::new();
        let mut coords = Vec::new();
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        let mut free_vars: Vec<(usize, NodeId)> = Vec::new();
        for (k, input) in program.inputs().iter().enumerate() {
            let src = graph.variable(&input.name).expect("program inputs are graph variables");
            if let Some(t) = config.frozen.get(&input.name) {
                template.push(t.clone());
                continue;
            }
            let b = bounds
                .get(&src)
                .ok_or_else(|| LipschitzError::MissingBounds(input.name.clone()))?
                .expand(&input.shape);
            let mut any = false;
            for e in 0..input.shape.numel() {
                let (l, h) = (b.lo.data()[e], b.hi.data()[e]);
                if l < h {
                    coords.push((k, e));
                    lo.push(l);
                    hi.push(h);
                    any = true;
                }
            }
            if any {
                free_vars.push((k, input.source_id));
            }
            template.push(b.lo);
        }

        let mut idle = BTreeMap::new();
        let read: Vec<&str> = program.inputs().iter().map(|p| p.name.as_str()).collect();
        for v in graph.variables() {
            let name = graph.name(v).unwrap_or_default();
            if read.contains(&name) {
                continue;
            }
            let value = match (config.frozen.get(name), bounds.get(&v)) {
                (Some(t), _) => t.clone(),
                (None, Some(b)) => b.midpoint(graph.shape(v)),
                (None, None) => Tensor::zeros(graph.shape(v).clone()),
            };
            idle.insert(name.to_string(), value);
        }

        let hessian = if jac.rows * jac.cols <= config.hessian_limit && !coords.is_empty() {
            Self::hessian(&jac, &jgraph, &program, &free_vars, &coords).ok()
        } else {
            None
        };

        Ok(Self {
            program,
            template,
            coords,
            lo,
            hi,
            idle,
            hessian,
            cols: jac.cols,
        })
    }

    fn hessian(
        jac: &JacobianGraph,
        jgraph: &Graph,
        program: &CompiledProgram,
        free_vars: &[(usize, NodeId)],
        coords: &[(usize, usize)],
    ) -> Result<Hessian, LipschitzError> {
        let wrt: Vec<NodeId> = free_vars
            .iter()
            .map(|&(k, _)| jgraph.variable(&program.inputs()[k].name).expect("variable present"))
            .collect();
        let h = jacobian(jgraph, &wrt)?;
        debug_assert_eq!(h.rows, jac.rows * jac.cols);
        let hprogram = runtime::compile(&h.graph)?;
        let input_map = hprogram
            .inputs()
            .iter()
            .map(|hi| {
                program
                    .inputs()
                    .iter()
                    .position(|pi| pi.name == hi.name)
                    .ok_or_else(|| LipschitzError::OptimizerFailure(format!("second derivative reads {}", hi.name)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut offsets = HashMap::new();
        let mut off = 0;
        for &(k, _) in free_vars {
            offsets.insert(k, off);
            off += program.inputs()[k].shape.numel();
        }
        let columns = coords.iter().map(|&(k, e)| offsets[&k] + e).collect();
        Ok(Hessian {
            program: hprogram,
            input_map,
            columns,
        })
    }

    pub fn domain(&self) -> BoxDomain {
        BoxDomain::new(self.lo.clone(), self.hi.clone())
    }

    fn point(&self, x: &[f64]) -> Vec<Tensor> {
        let mut values = self.template.clone();
        for (&(k, e), &v) in self.coords.iter().zip(x) {
            values[k].data_mut()[e] = v;
        }
        values
    }

    /// Whether [`Objective::gradient`] uses second derivatives.
    pub fn has_hessian(&self) -> bool {
        self.hessian.is_some()
    }

    fn jacobian_at(&self, values: &[Tensor]) -> Option<Tensor> {
        let refs: Vec<&Tensor> = values.iter().collect();
        self.program.execute_positional(&refs).ok().map(|mut o| o.swap_remove(0))
    }

    /// Value of every graph variable at the free-coordinate point `x`.
    pub fn assignment(&self, graph: &Graph, x: &[f64]) -> BTreeMap<String, Tensor> {
        let mut out = self.idle.clone();
        for (input, value) in self.program.inputs().iter().zip(self.point(x)) {
            out.insert(input.name.clone(), value);
        }
        debug_assert!(graph.variables().all(|v| out.contains_key(graph.name(v).unwrap_or_default())));
        out
    }
}

impl Objective for JacobianObjective {
    fn dim(&self) -> usize {
        self.coords.len()
    }

    fn value(&self, x: &[f64]) -> Option<f64> {
        let j = self.jacobian_at(&self.point(x))?;
        spectral_norm(&j).ok()
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let h = self.hessian.as_ref()?;
        let values = self.point(x);
        let j = self.jacobian_at(&values)?;
        let s = top_singular(&j).ok()?;
        if s.sigma == 0.0 {
            return None;
        }
        let hin: Vec<&Tensor> = h.input_map.iter().map(|&k| &values[k]).collect();
        let hm = h.program.execute_positional(&hin).ok()?.swap_remove(0);
        let hcols = hm.shape().dims()[1];
        let hd = hm.data();
        let g = h
            .columns
            .iter()
            .map(|&c| {
                let mut acc = 0.0;
                for (i, ui) in s.u.iter().enumerate() {
                    for (jx, wj) in s.v.iter().enumerate() {
                        acc += ui * wj * hd[(i * self.cols + jx) * hcols + c];
                    }
                }
                acc
            })
            .collect();
        Some(g)
    }
}
