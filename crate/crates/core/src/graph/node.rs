use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::{Shape, Tensor};

/// Lower clamp applied to the prediction inside binary cross-entropy.
pub const BCE_EPSILON: f64 = 1e-7;

/// Handle of a node inside one graph's node table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// Operation computed by a node, with its kind-specific attributes.
///
/// The last five kinds are structural helpers emitted by differentiation
/// (transposes, reshapes, reductions' adjoints, clip masks). They are
/// ordinary nodes: every pass and interpreter handles them.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Input,
    Parameter,
    Constant(Tensor),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    MatMul,
    Pow { exponent: f64 },
    Exp,
    Log,
    Sigmoid,
    /// Sum over one axis, or over all elements when `axis` is `None`.
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Clip { lo: f64, hi: f64 },
    /// Mean of `-[t ln p + (1-t) ln(1-p)]` with `p` clamped to `[κ, 1-κ]`.
    BinaryCrossEntropy,
    Transpose,
    /// Repeat the input `size` times along a new axis at `axis`.
    Expand { axis: usize, size: usize },
    /// Concatenation of the flattened inputs, viewed as `shape`.
    Concat { shape: Shape },
    /// Contiguous flat range `[start, start + numel(shape))` viewed as `shape`.
    Slice { start: usize, shape: Shape },
    /// 1 where `lo <= x <= hi`, else 0.
    ClipMask { lo: f64, hi: f64 },
}

/// Expected number of operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    Exactly(usize),
    AtLeast(usize),
}

impl Arity {
    pub fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Exactly(k) => n == k,
            Arity::AtLeast(k) => n >= k,
        }
    }
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arity::Exactly(k) => write!(f, "exactly {k}"),
            Arity::AtLeast(k) => write!(f, "at least {k}"),
        }
    }
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input => "Input",
            NodeKind::Parameter => "Parameter",
            NodeKind::Constant(_) => "Constant",
            NodeKind::Add => "Add",
            NodeKind::Sub => "Sub",
            NodeKind::Mul => "Mul",
            NodeKind::Div => "Div",
            NodeKind::Neg => "Neg",
            NodeKind::MatMul => "MatMul",
            NodeKind::Pow { .. } => "Pow",
            NodeKind::Exp => "Exp",
            NodeKind::Log => "Log",
            NodeKind::Sigmoid => "Sigmoid",
            NodeKind::Sum { .. } => "Sum",
            NodeKind::Mean { .. } => "Mean",
            NodeKind::Clip { .. } => "Clip",
            NodeKind::BinaryCrossEntropy => "BinaryCrossEntropy",
            NodeKind::Transpose => "Transpose",
            NodeKind::Expand { .. } => "Expand",
            NodeKind::Concat { .. } => "Concat",
            NodeKind::Slice { .. } => "Slice",
            NodeKind::ClipMask { .. } => "ClipMask",
        }
    }

    pub fn arity(&self) -> Arity {
        use NodeKind::*;
        match self {
            Input | Parameter | Constant(_) => Arity::Exactly(0),
            Add | Sub | Mul | Div | MatMul | BinaryCrossEntropy => Arity::Exactly(2),
            Neg | Pow { .. } | Exp | Log | Sigmoid | Sum { .. } | Mean { .. } | Clip { .. }
            | Transpose | Expand { .. } | Slice { .. } | ClipMask { .. } => Arity::Exactly(1),
            Concat { .. } => Arity::AtLeast(1),
        }
    }

    /// Elementwise over operands of equal shape, with unit-tensor broadcast.
    pub fn is_elementwise_binary(&self) -> bool {
        matches!(self, NodeKind::Add | NodeKind::Sub | NodeKind::Mul | NodeKind::Div)
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, NodeKind::Input | NodeKind::Parameter | NodeKind::Constant(_))
    }

    pub fn is_variable(&self) -> bool {
        matches!(self, NodeKind::Input | NodeKind::Parameter)
    }

    pub fn as_constant(&self) -> Option<&Tensor> {
        match self {
            NodeKind::Constant(t) => Some(t),
            _ => None,
        }
    }

    /// Canonical byte encoding of the kind and its attributes. Equal encodings
    /// mean equal operations; used for hash-consing and fingerprints.
    pub(crate) fn write_key(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(self.name().as_bytes());
        out.push(0);
        let mut f = |v: f64| out.extend_from_slice(&canonical_bits(v).to_le_bytes());
        match self {
            NodeKind::Pow { exponent } => f(*exponent),
            NodeKind::Clip { lo, hi } | NodeKind::ClipMask { lo, hi } => {
                f(*lo);
                f(*hi);
            }
            _ => {}
        }
        match self {
            NodeKind::Constant(t) => {
                write_shape(out, t.shape());
                for &v in t.data() {
                    out.extend_from_slice(&canonical_bits(v).to_le_bytes());
                }
            }
            NodeKind::Sum { axis } | NodeKind::Mean { axis } => match axis {
                None => out.push(0xff),
                Some(a) => out.extend_from_slice(&(*a as u64).to_le_bytes()),
            },
            NodeKind::Expand { axis, size } => {
                out.extend_from_slice(&(*axis as u64).to_le_bytes());
                out.extend_from_slice(&(*size as u64).to_le_bytes());
            }
            NodeKind::Concat { shape } => write_shape(out, shape),
            NodeKind::Slice { start, shape } => {
                out.extend_from_slice(&(*start as u64).to_le_bytes());
                write_shape(out, shape);
            }
            _ => {}
        }
    }
}

fn canonical_bits(v: f64) -> u64 {
    // -0.0 and 0.0 are the same operand for every kernel we fold.
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

pub(crate) fn write_shape(out: &mut Vec<u8>, shape: &Shape) {
    out.extend_from_slice(&(shape.rank() as u64).to_le_bytes());
    for &d in shape.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

/// One entry of the node table.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    pub shape: Shape,
    /// Required for `Input` and `Parameter`; optional label otherwise.
    pub name: Option<String>,
}
