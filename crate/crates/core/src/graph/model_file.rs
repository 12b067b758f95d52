//! JSON model files: `tensors`, `ops` and `outputs`.
//!
//! ```json
//! {
//!   "tensors": [{"name": "x", "shape": [10, 1], "role": "private_input", "bounds": [0, 1]}],
//!   "ops": [{"name": "m", "kind": "Mean", "inputs": ["x"], "attrs": {"axis": null}}],
//!   "outputs": ["m"]
//! }
//! ```
//!
//! `bounds` is `[lo, hi]`, where each side is a number broadcast over the
//! tensor or a nested array of the tensor's shape. Ops may appear in any order;
//! they are sorted by dependency. Unknown keys are rejected.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::{Bounds, Graph, GraphBuilder, NodeId, NodeKind};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    PrivateInput,
    Parameter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<(Value, Value)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpSpec {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub attrs: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub tensors: Vec<TensorSpec>,
    #[serde(default)]
    pub ops: Vec<OpSpec>,
    pub outputs: Vec<String>,
}

/// One located problem in a model file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDiagnostic {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ModelDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{}", join(.0))]
    Invalid(Vec<ModelDiagnostic>),
}

impl ModelError {
    pub fn diagnostics(&self) -> Vec<ModelDiagnostic> {
        match self {
            ModelError::Syntax { line, message, column } => vec![ModelDiagnostic {
                line: Some(*line),
                message: format!("column {column}: {message}"),
            }],
            ModelError::Invalid(d) => d.clone(),
        }
    }
}

fn join(diags: &[ModelDiagnostic]) -> String {
    diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}

/// Converts a number or nested array into a tensor.
pub fn json_to_tensor(value: &Value) -> Result<Tensor, String> {
    fn walk(v: &Value, depth: usize, dims: &mut Vec<usize>, data: &mut Vec<f64>) -> Result<(), String> {
        match v {
            Value::Number(n) => {
                if depth != dims.len() {
                    return Err("ragged nested array".into());
                }
                data.push(n.as_f64().ok_or("number out of range")?);
                Ok(())
            }
            Value::Array(items) => {
                if items.is_empty() {
                    return Err("empty array".into());
                }
                if depth == dims.len() {
                    if !data.is_empty() {
                        return Err("ragged nested array".into());
                    }
                    dims.push(items.len());
                } else if depth > dims.len() || dims[depth] != items.len() {
                    return Err("ragged nested array".into());
                }
                for item in items {
                    walk(item, depth + 1, dims, data)?;
                }
                Ok(())
            }
            other => Err(format!("expected a number or array, found {other}")),
        }
    }
    let mut dims = Vec::new();
    let mut data = Vec::new();
    walk(value, 0, &mut dims, &mut data)?;
    let shape = Shape::new(dims).ok_or("zero extent")?;
    Tensor::new(shape, data).ok_or_else(|| "ragged nested array".into())
}

/// Nested-array form of a tensor; a number for rank 0.
pub fn tensor_to_json(t: &Tensor) -> Value {
    fn build(dims: &[usize], data: &[f64]) -> Value {
        match dims.split_first() {
            None => Value::from(data[0]),
            Some((&n, rest)) => {
                let stride: usize = rest.iter().product();
                Value::Array((0..n).map(|i| build(rest, &data[i * stride..(i + 1) * stride])).collect())
            }
        }
    }
    build(t.shape().dims(), t.data())
}

fn side_to_tensor(v: &Value, shape: &Shape) -> Result<Tensor, String> {
    if let Some(x) = v.as_f64() {
        return Ok(Tensor::filled(shape.clone(), x));
    }
    let t = json_to_tensor(v)?;
    if t.shape() != shape {
        return Err(format!("bounds of shape {} do not match tensor shape {shape}", t.shape()));
    }
    Ok(t)
}

fn side_to_json(t: &Tensor) -> Value {
    let first = t.data()[0];
    if t.is_all(first) {
        Value::from(first)
    } else {
        tensor_to_json(t)
    }
}

struct Attrs<'a> {
    map: &'a Map<String, Value>,
    used: Vec<&'static str>,
}

impl<'a> Attrs<'a> {
    fn f64(&mut self, key: &'static str) -> Result<f64, String> {
        self.used.push(key);
        self.map
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| format!("attribute {key:?} must be a number"))
    }

    fn usize(&mut self, key: &'static str) -> Result<usize, String> {
        self.used.push(key);
        self.map
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| format!("attribute {key:?} must be a non-negative integer"))
    }

    fn opt_usize(&mut self, key: &'static str) -> Result<Option<usize>, String> {
        self.used.push(key);
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v
                .as_u64()
                .map(|v| Some(v as usize))
                .ok_or_else(|| format!("attribute {key:?} must be an integer or null")),
        }
    }

    fn shape(&mut self, key: &'static str) -> Result<Shape, String> {
        self.used.push(key);
        let dims: Vec<usize> = self
            .map
            .get(key)
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| format!("attribute {key:?} must be a list of extents"))?;
        Shape::new(dims).ok_or_else(|| format!("attribute {key:?} has a zero extent"))
    }

    fn finish(self) -> Result<(), String> {
        for key in self.map.keys() {
            if !self.used.contains(&key.as_str()) {
                return Err(format!("unknown attribute {key:?}"));
            }
        }
        Ok(())
    }
}

fn parse_kind(kind: &str, attrs: &Map<String, Value>) -> Result<NodeKind, String> {
    let mut a = Attrs { map: attrs, used: Vec::new() };
    let parsed = match kind {
        "Constant" => {
            a.used.push("value");
            let v = attrs.get("value").ok_or("Constant needs attribute \"value\"")?;
            NodeKind::Constant(json_to_tensor(v)?)
        }
        "Add" => NodeKind::Add,
        "Sub" => NodeKind::Sub,
        "Mul" => NodeKind::Mul,
        "Div" => NodeKind::Div,
        "Neg" => NodeKind::Neg,
        "MatMul" => NodeKind::MatMul,
        "Pow" => NodeKind::Pow { exponent: a.f64("exponent")? },
        "Exp" => NodeKind::Exp,
        "Log" => NodeKind::Log,
        "Sigmoid" => NodeKind::Sigmoid,
        "Sum" => NodeKind::Sum { axis: a.opt_usize("axis")? },
        "Mean" => NodeKind::Mean { axis: a.opt_usize("axis")? },
        "Clip" => NodeKind::Clip { lo: a.f64("lo")?, hi: a.f64("hi")? },
        "BinaryCrossEntropy" => NodeKind::BinaryCrossEntropy,
        "Transpose" => NodeKind::Transpose,
        "Expand" => NodeKind::Expand {
            axis: a.usize("axis")?,
            size: a.usize("size")?,
        },
        "Concat" => NodeKind::Concat { shape: a.shape("shape")? },
        "Slice" => NodeKind::Slice {
            start: a.usize("start")?,
            shape: a.shape("shape")?,
        },
        "ClipMask" => NodeKind::ClipMask { lo: a.f64("lo")?, hi: a.f64("hi")? },
        "Input" | "Parameter" => {
            return Err(format!("{kind} nodes are declared under \"tensors\""));
        }
        other => return Err(format!("unknown op kind {other:?}")),
    };
    a.finish()?;
    Ok(parsed)
}

fn kind_attrs(kind: &NodeKind) -> Map<String, Value> {
    let mut m = Map::new();
    match kind {
        NodeKind::Constant(t) => {
            m.insert("value".into(), tensor_to_json(t));
        }
        NodeKind::Pow { exponent } => {
            m.insert("exponent".into(), Value::from(*exponent));
        }
        NodeKind::Sum { axis } | NodeKind::Mean { axis } => {
            m.insert("axis".into(), axis.map(Value::from).unwrap_or(Value::Null));
        }
        NodeKind::Clip { lo, hi } | NodeKind::ClipMask { lo, hi } => {
            m.insert("lo".into(), Value::from(*lo));
            m.insert("hi".into(), Value::from(*hi));
        }
        NodeKind::Expand { axis, size } => {
            m.insert("axis".into(), Value::from(*axis));
            m.insert("size".into(), Value::from(*size));
        }
        NodeKind::Concat { shape } => {
            m.insert("shape".into(), Value::from(shape.dims().to_vec()));
        }
        NodeKind::Slice { start, shape } => {
            m.insert("start".into(), Value::from(*start));
            m.insert("shape".into(), Value::from(shape.dims().to_vec()));
        }
        _ => {}
    }
    m
}

/// Line (1-based) of the first `"name": "<name>"` entry in `src`.
fn locate(src: Option<&str>, name: &str) -> Option<usize> {
    let src = src?;
    let quoted = format!("\"{name}\"");
    src.lines()
        .position(|l| {
            l.find("\"name\"")
                .is_some_and(|k| l[k + 6..].trim_start().trim_start_matches(':').trim_start().starts_with(&quoted))
        })
        .map(|i| i + 1)
}

impl ModelFile {
    pub fn parse(src: &str) -> Result<ModelFile, ModelError> {
        serde_json::from_str(src).map_err(|e| ModelError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    /// Parses and converts to a graph in one step, with line-anchored errors.
    pub fn load(src: &str) -> Result<Graph, ModelError> {
        Self::parse(src)?.build(Some(src))
    }

    /// Builds the graph. `src`, when given, is used to anchor diagnostics to
    /// lines.
    pub fn build(&self, src: Option<&str>) -> Result<Graph, ModelError> {
        let mut diags = Vec::new();
        let mut diag = |name: Option<&str>, message: String| {
            diags.push(ModelDiagnostic {
                line: name.and_then(|n| locate(src, n)),
                message,
            })
        };

        let mut b = GraphBuilder::new();
        let mut ids: HashMap<&str, NodeId> = HashMap::new();
        for t in &self.tensors {
            if ids.contains_key(t.name.as_str()) {
                diag(Some(&t.name), format!("duplicate name {:?}", t.name));
                continue;
            }
            let Some(shape) = Shape::new(t.shape.clone()) else {
                diag(Some(&t.name), format!("tensor {:?} has a zero extent", t.name));
                continue;
            };
            let id = match t.role {
                TensorRole::PrivateInput => b.input(&t.name, shape.clone()),
                TensorRole::Parameter => b.parameter(&t.name, shape.clone()),
            };
            ids.insert(&t.name, id);
            if let Some((lo, hi)) = &t.bounds {
                let bounds = side_to_tensor(lo, &shape)
                    .and_then(|lo| side_to_tensor(hi, &shape).map(|hi| Bounds { lo, hi }));
                match bounds {
                    Ok(bounds) => {
                        if let Err(e) = b.set_bounds(id, bounds) {
                            diag(Some(&t.name), e.to_string());
                        }
                    }
                    Err(e) => diag(Some(&t.name), format!("tensor {:?}: {e}", t.name)),
                }
            }
        }

        // Dependency order, stable with respect to file order.
        let mut op_index: HashMap<&str, usize> = HashMap::new();
        for (i, op) in self.ops.iter().enumerate() {
            if ids.contains_key(op.name.as_str()) || op_index.insert(&op.name, i).is_some() {
                diag(Some(&op.name), format!("duplicate name {:?}", op.name));
            }
        }
        let mut failed: std::collections::HashSet<&str> = std::collections::HashSet::new();
        let mut pending: Vec<usize> = (0..self.ops.len()).collect();
        loop {
            let before = pending.len();
            let mut still = Vec::new();
            for i in pending {
                let op = &self.ops[i];
                let mut ready = true;
                let mut inputs = Vec::with_capacity(op.inputs.len());
                for name in &op.inputs {
                    match ids.get(name.as_str()) {
                        Some(&id) => inputs.push(id),
                        None => ready = false,
                    }
                }
                if !ready {
                    still.push(i);
                    continue;
                }
                match parse_kind(&op.kind, &op.attrs) {
                    Ok(kind) => match b.build(kind, &inputs) {
                        Ok(id) => {
                            b.nodes[id.0].name = Some(op.name.clone());
                            ids.insert(&op.name, id);
                        }
                        Err(e) => {
                            diag(Some(&op.name), format!("op {:?}: {e}", op.name));
                            failed.insert(op.name.as_str());
                        }
                    },
                    Err(e) => {
                        diag(Some(&op.name), format!("op {:?}: {e}", op.name));
                        failed.insert(op.name.as_str());
                    }
                }
            }
            pending = still;
            if pending.is_empty() || pending.len() == before {
                break;
            }
        }
        for i in pending {
            let op = &self.ops[i];
            let missing: Vec<&str> = op
                .inputs
                .iter()
                .filter(|n| !ids.contains_key(n.as_str()))
                .map(String::as_str)
                .collect();
            let unknown: Vec<&str> = missing
                .iter()
                .copied()
                .filter(|n| !op_index.contains_key(n))
                .collect();
            if !unknown.is_empty() {
                diag(Some(&op.name), format!("op {:?} refers to unknown inputs {unknown:?}", op.name));
            } else if !missing.iter().any(|n| failed.contains(n)) {
                diag(
                    Some(&op.name),
                    format!("op {:?} is part of a dependency cycle", op.name),
                );
            }
        }
        if self.outputs.is_empty() {
            diag(None, "no outputs".into());
        }
        for name in &self.outputs {
            match ids.get(name.as_str()) {
                Some(&id) => b.outputs.push(id),
                // Ops that failed to build were reported above.
                None if op_index.contains_key(name.as_str()) => {}
                None => diag(Some(name), format!("output {name:?} is not defined")),
            }
        }
        if !diags.is_empty() {
            return Err(ModelError::Invalid(diags));
        }
        Ok(b.finish())
    }

    /// Serializes a graph. Unnamed nodes are named `n<id>`.
    pub fn from_graph(graph: &Graph) -> ModelFile {
        let name_of = |id: NodeId| -> String {
            graph
                .node(id)
                .ok()
                .and_then(|n| n.name.clone())
                .unwrap_or_else(|| format!("n{}", id.0))
        };
        let role: BTreeMap<NodeId, TensorRole> = graph
            .private_inputs()
            .iter()
            .map(|&i| (i, TensorRole::PrivateInput))
            .chain(graph.parameters().iter().map(|&i| (i, TensorRole::Parameter)))
            .collect();
        let mut tensors = Vec::new();
        let mut ops = Vec::new();
        for node in graph.nodes() {
            if let Some(&r) = role.get(&node.id) {
                tensors.push(TensorSpec {
                    name: name_of(node.id),
                    shape: node.shape.dims().to_vec(),
                    role: r,
                    bounds: graph
                        .bounds()
                        .get(&node.id)
                        .map(|b| (side_to_json(&b.lo), side_to_json(&b.hi))),
                });
            } else {
                ops.push(OpSpec {
                    name: name_of(node.id),
                    kind: node.kind.name().to_string(),
                    inputs: node.inputs.iter().map(|&i| name_of(i)).collect(),
                    attrs: kind_attrs(&node.kind),
                });
            }
        }
        ModelFile {
            tensors,
            ops,
            outputs: graph.outputs().iter().map(|&o| name_of(o)).collect(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("model files always serialize")
    }
}
