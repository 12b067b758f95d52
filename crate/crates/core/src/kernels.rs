//! Forward kernels shared by the graph interpreter, constant folding and the
//! compiled runtime.

use crate::graph::{NodeKind, BCE_EPSILON};
use crate::tensor::{Shape, Tensor};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-element binary cross-entropy with the prediction clamped away from
/// 0 and 1.
pub fn bce_term(p: f64, t: f64) -> f64 {
    let pc = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
}

/// Evaluates a non-variable node kind into a fresh tensor.
pub fn eval(kind: &NodeKind, args: &[&Tensor], out_shape: &Shape) -> Tensor {
    let mut out = Vec::with_capacity(out_shape.numel());
    eval_into(kind, args, out_shape, &mut out);
    Tensor::from_parts_unchecked(out_shape.clone(), out)
}

/// Evaluates into `out`, replacing its contents. Shapes were checked at graph
/// construction time.
pub fn eval_into(kind: &NodeKind, args: &[&Tensor], out_shape: &Shape, out: &mut Vec<f64>) {
    out.clear();
    let n = out_shape.numel();
    match kind {
        NodeKind::Input | NodeKind::Parameter => {
            panic!("variables have no kernel")
        }
        NodeKind::Constant(t) => out.extend_from_slice(t.data()),
        NodeKind::Add => binary(args, n, out, |a, b| a + b),
        NodeKind::Sub => binary(args, n, out, |a, b| a - b),
        NodeKind::Mul => binary(args, n, out, |a, b| a * b),
        NodeKind::Div => binary(args, n, out, |a, b| a / b),
        NodeKind::Neg => unary(args, out, |a| -a),
        NodeKind::Pow { exponent } => {
            let e = *exponent;
            unary(args, out, |a| a.powf(e))
        }
        NodeKind::Exp => unary(args, out, f64::exp),
        NodeKind::Log => unary(args, out, f64::ln),
        NodeKind::Sigmoid => unary(args, out, sigmoid),
        NodeKind::Clip { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            unary(args, out, |a| a.clamp(lo, hi))
        }
        NodeKind::ClipMask { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            unary(args, out, |a| if lo <= a && a <= hi { 1.0 } else { 0.0 })
        }
        NodeKind::MatMul => matmul(args[0], args[1], out),
        NodeKind::Sum { axis } => reduce(args[0], *axis, out),
        NodeKind::Mean { axis } => {
            reduce(args[0], *axis, out);
            let count = (args[0].numel() / n.max(1)) as f64;
            for v in out.iter_mut() {
                *v /= count;
            }
        }
        NodeKind::BinaryCrossEntropy => {
            let (p, t) = (args[0], args[1]);
            let m = p.numel().max(t.numel());
            let mut acc = 0.0;
            for i in 0..m {
                acc += bce_term(at(p, i), at(t, i));
            }
            out.push(acc / m as f64);
        }
        NodeKind::Transpose => {
            let a = args[0];
            let (r, c) = (a.shape().dims()[0], a.shape().dims()[1]);
            let d = a.data();
            out.reserve(n);
            for j in 0..c {
                for i in 0..r {
                    out.push(d[i * c + j]);
                }
            }
        }
        NodeKind::Expand { axis, size } => {
            let a = args[0];
            let dims = a.shape().dims();
            let outer: usize = dims[..*axis].iter().product();
            let inner: usize = dims[*axis..].iter().product();
            let d = a.data();
            out.reserve(n);
            for o in 0..outer {
                let chunk = &d[o * inner..(o + 1) * inner];
                for _ in 0..*size {
                    out.extend_from_slice(chunk);
                }
            }
        }
        NodeKind::Concat { .. } => {
            for a in args {
                out.extend_from_slice(a.data());
            }
        }
        NodeKind::Slice { start, .. } => out.extend_from_slice(&args[0].data()[*start..*start + n]),
    }
}

#[inline]
fn at(t: &Tensor, i: usize) -> f64 {
    let d = t.data();
    if d.len() == 1 {
        d[0]
    } else {
        d[i]
    }
}

fn unary(args: &[&Tensor], out: &mut Vec<f64>, f: impl Fn(f64) -> f64) {
    out.extend(args[0].data().iter().map(|&a| f(a)));
}

fn binary(args: &[&Tensor], n: usize, out: &mut Vec<f64>, f: impl Fn(f64, f64) -> f64) {
    let (a, b) = (args[0].data(), args[1].data());
    if a.len() == n && b.len() == n {
        out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y)));
    } else if a.len() == n {
        let y = b[0];
        out.extend(a.iter().map(|&x| f(x, y)));
    } else {
        let x = a[0];
        out.extend(b.iter().map(|&y| f(x, y)));
    }
}

fn matmul(a: &Tensor, b: &Tensor, out: &mut Vec<f64>) {
    let (m, k) = (a.shape().dims()[0], a.shape().dims()[1]);
    let n = b.shape().dims()[1];
    let (ad, bd) = (a.data(), b.data());
    out.resize(m * n, 0.0);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn reduce(a: &Tensor, axis: Option<usize>, out: &mut Vec<f64>) {
    match axis {
        None => out.push(a.data().iter().fold(0.0, |acc, &v| acc + v)),
        Some(ax) => {
            let dims = a.shape().dims();
            let outer: usize = dims[..ax].iter().product();
            let len = dims[ax];
            let inner: usize = dims[ax + 1..].iter().product();
            let d = a.data();
            out.resize(outer * inner, 0.0);
            for o in 0..outer {
                for s in 0..len {
                    let base = (o * len + s) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += d[base + i];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(Shape::new(shape.to_vec()).unwrap(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 2], &[7., 8., 9., 10., 11., 12.]);
        let c = eval(&NodeKind::MatMul, &[&a, &b], &Shape::matrix(2, 2));
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn axis_reductions() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let s0 = eval(&NodeKind::Sum { axis: Some(0) }, &[&a], &Shape::vector(3));
        assert_eq!(s0.data(), &[5., 7., 9.]);
        let m1 = eval(&NodeKind::Mean { axis: Some(1) }, &[&a], &Shape::vector(2));
        assert_eq!(m1.data(), &[2., 5.]);
        let all = eval(&NodeKind::Sum { axis: None }, &[&a], &Shape::scalar());
        assert_eq!(all.data(), &[21.]);
    }

    #[test]
    fn expand_inverts_axis_sum_layout() {
        let a = t(&[2], &[1., 2.]);
        let e0 = eval(&NodeKind::Expand { axis: 0, size: 3 }, &[&a], &Shape::matrix(3, 2));
        assert_eq!(e0.data(), &[1., 2., 1., 2., 1., 2.]);
        let e1 = eval(&NodeKind::Expand { axis: 1, size: 3 }, &[&a], &Shape::matrix(2, 3));
        assert_eq!(e1.data(), &[1., 1., 1., 2., 2., 2.]);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let p = Tensor::scalar(0.5);
        let one = Tensor::scalar(1.0);
        let l = eval(&NodeKind::BinaryCrossEntropy, &[&p, &one], &Shape::scalar());
        assert!((l.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_clamps_saturated_predictions() {
        assert!(bce_term(0.0, 1.0).is_finite());
        assert!(bce_term(1.0, 0.0).is_finite());
    }
}
