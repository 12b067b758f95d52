//! Compilation of graphs into linear instruction plans, a fingerprint-keyed
//! compile cache, and plan execution.

mod bench;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use thiserror::Error;

pub use bench::{benchmark, write_csv, BenchRecord, CSV_HEADER};

use crate::graph::{optimize, Diagnostic, Fingerprint, Graph, NodeId, NodeKind};
use crate::kernels;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("graph failed validation: {}", join(.0))]
    ValidationFailed(Vec<Diagnostic>),
    #[error("missing value for {name} ({node})")]
    MissingInput { node: NodeId, name: String },
    #[error("{name} expects shape {expected}, got {got}")]
    ShapeMismatch { name: String, expected: Shape, got: Shape },
    #[error("{kind} node {node} produced a non-finite value")]
    NumericalError { node: NodeId, kind: &'static str },
}

fn join(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}

/// Where an instruction reads a value from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    /// Index into [`CompiledProgram::inputs`].
    Input(usize),
    /// Index into the constant pool.
    Const(usize),
    /// Register slot.
    Slot(usize),
}

#[derive(Debug, Clone)]
pub struct Instr {
    /// Node in the optimized graph this instruction computes.
    pub node: NodeId,
    pub kind: NodeKind,
    pub args: Vec<Operand>,
    pub shape: Shape,
    pub dst: usize,
}

/// A variable the plan reads.
#[derive(Debug, Clone)]
pub struct ProgramInput {
    pub name: String,
    pub shape: Shape,
    /// Id in the source graph.
    pub source_id: NodeId,
}

/// Executable form of a graph.
#[derive(Debug)]
pub struct CompiledProgram {
    plan: Vec<Instr>,
    constants: Vec<Tensor>,
    inputs: Vec<ProgramInput>,
    outputs: Vec<Operand>,
    n_slots: usize,
    fingerprint: Fingerprint,
    source_graph: Arc<Graph>,
    graph: Arc<Graph>,
    compile_time: Duration,
}

impl CompiledProgram {
    pub fn plan(&self) -> &[Instr] {
        &self.plan
    }

    pub fn inputs(&self) -> &[ProgramInput] {
        &self.inputs
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    /// Fingerprint of the optimized graph.
    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn source_graph(&self) -> &Arc<Graph> {
        &self.source_graph
    }

    pub fn optimized_graph(&self) -> &Arc<Graph> {
        &self.graph
    }

    pub fn compile_time(&self) -> Duration {
        self.compile_time
    }

    /// Output shapes, in graph output order.
    pub fn output_shapes(&self) -> Vec<Shape> {
        self.graph.outputs().iter().map(|&o| self.graph.shape(o).clone()).collect()
    }

    /// Runs the plan. `inputs` is keyed by source graph ids; only variables
    /// the plan reads are required.
    pub fn execute(&self, inputs: &HashMap<NodeId, Tensor>) -> Result<Vec<Tensor>, RuntimeError> {
        let resolved = self
            .inputs
            .iter()
            .map(|p| {
                inputs.get(&p.source_id).ok_or_else(|| RuntimeError::MissingInput {
                    node: p.source_id,
                    name: p.name.clone(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.run(&resolved)
    }

    /// As [`execute`](Self::execute), with values keyed by variable name.
    pub fn execute_named(&self, inputs: &HashMap<String, Tensor>) -> Result<Vec<Tensor>, RuntimeError> {
        let resolved = self
            .inputs
            .iter()
            .map(|p| {
                inputs.get(&p.name).ok_or_else(|| RuntimeError::MissingInput {
                    node: p.source_id,
                    name: p.name.clone(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.run(&resolved)
    }

    /// Runs the plan with inputs given positionally, matching [`inputs`](Self::inputs).
    pub fn execute_positional(&self, inputs: &[&Tensor]) -> Result<Vec<Tensor>, RuntimeError> {
        assert_eq!(inputs.len(), self.inputs.len(), "one tensor per program input");
        self.run(inputs)
    }

    fn run(&self, inputs: &[&Tensor]) -> Result<Vec<Tensor>, RuntimeError> {
        for (p, t) in self.inputs.iter().zip(inputs) {
            if t.shape() != &p.shape {
                return Err(RuntimeError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.shape.clone(),
                    got: t.shape().clone(),
                });
            }
        }
        let mut slots: Vec<Option<Tensor>> = vec![None; self.n_slots];
        for instr in &self.plan {
            let mut buf = slots[instr.dst].take().map(Tensor::into_data).unwrap_or_default();
            {
                let args: Vec<&Tensor> = instr
                    .args
                    .iter()
                    .map(|op| match *op {
                        Operand::Input(i) => inputs[i],
                        Operand::Const(i) => &self.constants[i],
                        Operand::Slot(s) => slots[s].as_ref().expect("slot written before read"),
                    })
                    .collect();
                kernels::eval_into(&instr.kind, &args, &instr.shape, &mut buf);
            }
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(RuntimeError::NumericalError {
                    node: instr.node,
                    kind: instr.kind.name(),
                });
            }
            slots[instr.dst] = Some(Tensor::from_parts_unchecked(instr.shape.clone(), buf));
        }
        Ok(self
            .outputs
            .iter()
            .map(|op| match *op {
                Operand::Input(i) => inputs[i].clone(),
                Operand::Const(i) => self.constants[i].clone(),
                Operand::Slot(s) => slots[s].clone().expect("output slot written"),
            })
            .collect())
    }
}

fn build_program(source: Arc<Graph>, start: Instant) -> Result<CompiledProgram, RuntimeError> {
    source.validate().map_err(RuntimeError::ValidationFailed)?;
    let graph = Arc::new(optimize(&source));
    let live = graph.live_nodes();
    let nodes = graph.nodes();

    // Last instruction index reading each node; outputs live to the end.
    let mut order = Vec::new();
    let mut index_of = vec![usize::MAX; nodes.len()];
    for node in nodes {
        if live[node.id.0] && !node.kind.is_leaf() {
            index_of[node.id.0] = order.len();
            order.push(node.id);
        }
    }
    let mut last_use = vec![0usize; nodes.len()];
    for (pos, &id) in order.iter().enumerate() {
        for i in &nodes[id.0].inputs {
            last_use[i.0] = last_use[i.0].max(pos);
        }
    }
    for o in graph.outputs() {
        last_use[o.0] = usize::MAX;
    }

    let mut operand: Vec<Option<Operand>> = vec![None; nodes.len()];
    let mut constants = Vec::new();
    let mut inputs = Vec::new();
    for node in nodes {
        if !live[node.id.0] {
            continue;
        }
        match &node.kind {
            NodeKind::Constant(t) => {
                operand[node.id.0] = Some(Operand::Const(constants.len()));
                constants.push(t.clone());
            }
            NodeKind::Input | NodeKind::Parameter => {
                let name = node.name.clone().unwrap_or_default();
                let source_id = source.variable(&name).expect("optimize keeps variable names");
                operand[node.id.0] = Some(Operand::Input(inputs.len()));
                inputs.push(ProgramInput {
                    name,
                    shape: node.shape.clone(),
                    source_id,
                });
            }
            _ => {}
        }
    }

    let mut free: Vec<usize> = Vec::new();
    let mut n_slots = 0;
    let mut plan = Vec::with_capacity(order.len());
    for (pos, &id) in order.iter().enumerate() {
        let node = &nodes[id.0];
        let args: Vec<Operand> = node.inputs.iter().map(|i| operand[i.0].expect("inputs precede users")).collect();
        let dst = free.pop().unwrap_or_else(|| {
            n_slots += 1;
            n_slots - 1
        });
        operand[id.0] = Some(Operand::Slot(dst));
        let mut released: Vec<usize> = Vec::new();
        for (i, arg) in node.inputs.iter().zip(&args) {
            if let Operand::Slot(s) = *arg {
                if last_use[i.0] == pos && !released.contains(&s) {
                    released.push(s);
                }
            }
        }
        // release in reverse so the lowest slot is reused first
        released.sort_unstable_by(|a, b| b.cmp(a));
        free.extend(released);
        plan.push(Instr {
            node: id,
            kind: node.kind.clone(),
            args,
            shape: node.shape.clone(),
            dst,
        });
    }
    let outputs = graph.outputs().iter().map(|o| operand[o.0].expect("outputs are live")).collect();

    Ok(CompiledProgram {
        plan,
        constants,
        inputs,
        outputs,
        n_slots,
        fingerprint: graph.fingerprint(),
        source_graph: source,
        graph,
        compile_time: start.elapsed(),
    })
}

/// Compiler with a cache keyed on the source graph fingerprint.
#[derive(Debug, Default)]
pub struct Compiler {
    cache: Mutex<HashMap<Fingerprint, Arc<CompiledProgram>>>,
}

impl Compiler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Compiles `graph`, returning the cached program when an identical
    /// graph was compiled before.
    pub fn compile(&self, graph: &Graph) -> Result<Arc<CompiledProgram>, RuntimeError> {
        let key = graph.fingerprint();
        if let Some(p) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(p));
        }
        self.compile_uncached(graph).map(|p| {
            let p = Arc::new(p);
            self.cache.lock().expect("cache lock").entry(key).or_insert(p).clone()
        })
    }

    /// Compiles without consulting or filling the cache.
    pub fn compile_uncached(&self, graph: &Graph) -> Result<CompiledProgram, RuntimeError> {
        let start = Instant::now();
        build_program(Arc::new(graph.clone()), start)
    }

    pub fn cached_len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    pub fn clear(&self) {
        self.cache.lock().expect("cache lock").clear();
    }
}

/// Process-wide compiler.
pub fn global_compiler() -> &'static Compiler {
    static GLOBAL: OnceLock<Compiler> = OnceLock::new();
    GLOBAL.get_or_init(Compiler::new)
}

/// Compiles through the process-wide cache.
pub fn compile(graph: &Graph) -> Result<Arc<CompiledProgram>, RuntimeError> {
    global_compiler().compile(graph)
}
