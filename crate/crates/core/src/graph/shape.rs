//! Shape rules for every node kind.

use super::node::NodeKind;
use super::GraphError;
use crate::tensor::Shape;

/// Output shape of a unit-broadcasting elementwise binary operation.
pub fn broadcast(a: &Shape, b: &Shape) -> Option<Shape> {
    if a == b || (b.is_unit() && (!a.is_unit() || a.rank() >= b.rank())) {
        Some(a.clone())
    } else if a.is_unit() {
        Some(b.clone())
    } else {
        None
    }
}

/// Infers the output shape of `kind` applied to operands of the given shapes.
/// Arity has already been checked by the caller.
pub fn infer(kind: &NodeKind, inputs: &[&Shape]) -> Result<Shape, GraphError> {
    let mismatch = |detail: String| GraphError::ShapeMismatch {
        kind: kind.name(),
        detail,
    };
    match kind {
        NodeKind::Input | NodeKind::Parameter => {
            unreachable!("variables are created with an explicit shape")
        }
        NodeKind::Constant(t) => Ok(t.shape().clone()),
        NodeKind::Add | NodeKind::Sub | NodeKind::Mul | NodeKind::Div => {
            broadcast(inputs[0], inputs[1])
                .ok_or_else(|| mismatch(format!("{} vs {}", inputs[0], inputs[1])))
        }
        NodeKind::BinaryCrossEntropy => {
            broadcast(inputs[0], inputs[1])
                .map(|_| Shape::scalar())
                .ok_or_else(|| mismatch(format!("{} vs {}", inputs[0], inputs[1])))
        }
        NodeKind::Neg
        | NodeKind::Pow { .. }
        | NodeKind::Exp
        | NodeKind::Log
        | NodeKind::Sigmoid
        | NodeKind::Clip { .. }
        | NodeKind::ClipMask { .. } => {
            if let NodeKind::Clip { lo, hi } | NodeKind::ClipMask { lo, hi } = kind {
                if lo.is_nan() || hi.is_nan() || lo > hi {
                    return Err(GraphError::InvalidAttribute(format!(
                        "clip interval [{lo}, {hi}] is empty"
                    )));
                }
            }
            if let NodeKind::Pow { exponent } = kind {
                if !exponent.is_finite() {
                    return Err(GraphError::InvalidAttribute(format!(
                        "non-finite exponent {exponent}"
                    )));
                }
            }
            Ok(inputs[0].clone())
        }
        NodeKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 {
                return Err(mismatch(format!("matmul needs rank-2 operands, got {a} and {b}")));
            }
            if a.dims()[1] != b.dims()[0] {
                return Err(mismatch(format!(
                    "inner dimensions differ: {a} x {b} ({} != {})",
                    a.dims()[1],
                    b.dims()[0]
                )));
            }
            Ok(Shape::matrix(a.dims()[0], b.dims()[1]))
        }
        NodeKind::Sum { axis } | NodeKind::Mean { axis } => match axis {
            None => Ok(Shape::scalar()),
            Some(ax) if *ax < inputs[0].rank() => Ok(inputs[0].remove_axis(*ax)),
            Some(ax) => Err(GraphError::InvalidAttribute(format!(
                "axis {ax} out of range for shape {}",
                inputs[0]
            ))),
        },
        NodeKind::Transpose => {
            let a = inputs[0];
            if a.rank() != 2 {
                return Err(mismatch(format!("transpose needs a rank-2 operand, got {a}")));
            }
            Ok(Shape::matrix(a.dims()[1], a.dims()[0]))
        }
        NodeKind::Expand { axis, size } => {
            if *axis > inputs[0].rank() || *size == 0 {
                return Err(GraphError::InvalidAttribute(format!(
                    "cannot expand {} at axis {axis} by {size}",
                    inputs[0]
                )));
            }
            Ok(inputs[0].insert_axis(*axis, *size))
        }
        NodeKind::Concat { shape } => {
            let total: usize = inputs.iter().map(|s| s.numel()).sum();
            if total != shape.numel() {
                return Err(mismatch(format!(
                    "{total} concatenated elements cannot form {shape}"
                )));
            }
            Ok(shape.clone())
        }
        NodeKind::Slice { start, shape } => {
            if start + shape.numel() > inputs[0].numel() {
                return Err(mismatch(format!(
                    "slice [{start}, {}) exceeds {} elements",
                    start + shape.numel(),
                    inputs[0].numel()
                )));
            }
            Ok(shape.clone())
        }
    }
}
