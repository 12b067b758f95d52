//! Interval enclosures of every node value and the interval baseline for
//! sensitivity.
//!
//! The rules are deliberately naive: each occurrence of a variable is treated
//! independently, so `x - x` over `[-1, 1]` encloses `[-2, 2]`.
//!
//! Soundness is with respect to the floating-point kernels. Sums, products and
//! quotients are accumulated in the same order as the kernels, and since
//! round-to-nearest is monotone the endpoint computations bracket every
//! concrete evaluation. Library functions (`exp`, `ln`, `powf`, sigmoid) carry
//! no monotonicity guarantee, so their endpoints are widened outward by a few
//! ulps.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{jacobian, AutodiffError};
use crate::graph::{BoundsSpec, Graph, NodeId, NodeKind, BCE_EPSILON};
use crate::kernels;
use crate::lipschitz::{analysis_fingerprint, Method, SensitivityReport};
use crate::tensor::{Shape, Tensor};

/// Ulps of outward widening applied to library-function endpoints.
const LIBM_ULPS: u32 = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntervalError {
    #[error("{kind} node {node}: {detail}")]
    DomainError {
        node: NodeId,
        kind: &'static str,
        detail: String,
    },
    #[error("no bounds for variable {name} ({node})")]
    MissingBounds { node: NodeId, name: String },
    #[error("bounds for {name} have shape {got}, expected {expected}")]
    BoundsShape { name: String, expected: Shape, got: Shape },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Elementwise closed interval `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalTensor {
    pub lo: Tensor,
    pub hi: Tensor,
}

impl IntervalTensor {
    /// Returns `None` unless shapes agree and `lo <= hi` everywhere.
    pub fn new(lo: Tensor, hi: Tensor) -> Option<Self> {
        let ok = lo.shape() == hi.shape() && lo.data().iter().zip(hi.data()).all(|(l, h)| l <= h);
        ok.then_some(Self { lo, hi })
    }

    pub fn point(value: Tensor) -> Self {
        Self {
            lo: value.clone(),
            hi: value,
        }
    }

    pub fn shape(&self) -> &Shape {
        self.lo.shape()
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        t.shape() == self.shape()
            && t.data()
                .iter()
                .zip(self.lo.data().iter().zip(self.hi.data()))
                .all(|(v, (l, h))| l <= v && v <= h)
    }

    /// Elementwise `max(|lo|, |hi|)`.
    pub fn magnitude(&self) -> Tensor {
        let data = self
            .lo
            .data()
            .iter()
            .zip(self.hi.data())
            .map(|(l, h)| l.abs().max(h.abs()))
            .collect();
        Tensor::from_parts_unchecked(self.shape().clone(), data)
    }

    fn from_vecs(shape: &Shape, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        Self {
            lo: Tensor::from_parts_unchecked(shape.clone(), lo),
            hi: Tensor::from_parts_unchecked(shape.clone(), hi),
        }
    }
}

/// Result of [`propagate`]: one enclosure per node, indexed by node id.
#[derive(Debug, Clone)]
pub struct Propagation {
    intervals: Vec<IntervalTensor>,
    /// Log nodes whose argument interval touches zero and so have an
    /// infinite lower bound.
    pub diverged: Vec<NodeId>,
}

impl Propagation {
    pub fn get(&self, id: NodeId) -> &IntervalTensor {
        &self.intervals[id.0]
    }

    pub fn intervals(&self) -> &[IntervalTensor] {
        &self.intervals
    }
}

/// Propagates `bounds` through every node in `graph`. All variables must be
/// bounded; a frozen variable is a degenerate interval.
pub fn propagate(graph: &Graph, bounds: &BoundsSpec) -> Result<Propagation, IntervalError> {
    let mut out: Vec<IntervalTensor> = Vec::with_capacity(graph.len());
    let mut diverged = Vec::new();
    for node in graph.nodes() {
        let args: Vec<&IntervalTensor> = node.inputs.iter().map(|i| &out[i.0]).collect();
        let domain = |detail: String| IntervalError::DomainError {
            node: node.id,
            kind: node.kind.name(),
            detail,
        };
        let shape = &node.shape;
        let iv = match &node.kind {
            NodeKind::Input | NodeKind::Parameter => {
                let name = node.name.clone().unwrap_or_default();
                let b = bounds.get(&node.id).ok_or_else(|| IntervalError::MissingBounds {
                    node: node.id,
                    name: name.clone(),
                })?;
                let fits = b.lo.shape() == b.hi.shape() && (b.is_broadcast() || b.lo.shape() == shape);
                if !fits {
                    return Err(IntervalError::BoundsShape {
                        name,
                        expected: shape.clone(),
                        got: b.lo.shape().clone(),
                    });
                }
                let full = b.expand(shape);
                IntervalTensor { lo: full.lo, hi: full.hi }
            }
            NodeKind::Constant(t) => IntervalTensor::point(t.clone()),
            NodeKind::Add
            | NodeKind::Sum { .. }
            | NodeKind::Mean { .. }
            | NodeKind::Clip { .. }
            | NodeKind::Transpose
            | NodeKind::Expand { .. }
            | NodeKind::Concat { .. }
            | NodeKind::Slice { .. } => monotone(&node.kind, &args, shape, 0),
            NodeKind::Exp | NodeKind::Sigmoid => monotone(&node.kind, &args, shape, LIBM_ULPS),
            NodeKind::Log => {
                let a = args[0];
                if let Some(l) = a.lo.data().iter().find(|&&l| l < 0.0) {
                    return Err(domain(format!("argument interval reaches {l} < 0")));
                }
                if a.lo.data().contains(&0.0) {
                    diverged.push(node.id);
                }
                monotone(&node.kind, &args, shape, LIBM_ULPS)
            }
            NodeKind::Sub => {
                let lo = kernels::eval(&NodeKind::Sub, &[&args[0].lo, &args[1].hi], shape);
                let hi = kernels::eval(&NodeKind::Sub, &[&args[0].hi, &args[1].lo], shape);
                IntervalTensor { lo, hi }
            }
            NodeKind::Neg => IntervalTensor {
                lo: kernels::eval(&NodeKind::Neg, &[&args[0].hi], shape),
                hi: kernels::eval(&NodeKind::Neg, &[&args[0].lo], shape),
            },
            NodeKind::Mul => elementwise2(args[0], args[1], shape, |a, b| Ok(mul_iv(a, b))).map_err(domain)?,
            NodeKind::Div => elementwise2(args[0], args[1], shape, |a, b| {
                if b.0 <= 0.0 && 0.0 <= b.1 {
                    Err(format!("denominator interval [{}, {}] contains 0", b.0, b.1))
                } else {
                    Ok(div_iv(a, b))
                }
            })
            .map_err(domain)?,
            NodeKind::Pow { exponent } => pow_interval(args[0], *exponent).map_err(domain)?,
            NodeKind::MatMul => matmul_interval(args[0], args[1], shape),
            NodeKind::BinaryCrossEntropy => bce_interval(args[0], args[1]),
            NodeKind::ClipMask { lo, hi } => {
                let a = args[0];
                let (l, h): (Vec<f64>, Vec<f64>) = a
                    .lo
                    .data()
                    .iter()
                    .zip(a.hi.data())
                    .map(|(&al, &ah)| {
                        if *lo <= al && ah <= *hi {
                            (1.0, 1.0)
                        } else if ah < *lo || al > *hi {
                            (0.0, 0.0)
                        } else {
                            (0.0, 1.0)
                        }
                    })
                    .unzip();
                IntervalTensor::from_vecs(shape, l, h)
            }
        };
        out.push(iv);
    }
    Ok(Propagation {
        intervals: out,
        diverged,
    })
}

fn widen(t: &mut Tensor, down: bool, ulps: u32) {
    for v in t.data_mut() {
        if v.is_nan() {
            *v = if down { f64::NEG_INFINITY } else { f64::INFINITY };
            continue;
        }
        for _ in 0..ulps {
            *v = if down { v.next_down() } else { v.next_up() };
        }
    }
}

/// Kinds that are nondecreasing in every argument.
fn monotone(kind: &NodeKind, args: &[&IntervalTensor], shape: &Shape, ulps: u32) -> IntervalTensor {
    let los: Vec<&Tensor> = args.iter().map(|a| &a.lo).collect();
    let his: Vec<&Tensor> = args.iter().map(|a| &a.hi).collect();
    let mut lo = kernels::eval(kind, &los, shape);
    let mut hi = kernels::eval(kind, &his, shape);
    widen(&mut lo, true, ulps);
    widen(&mut hi, false, ulps);
    IntervalTensor { lo, hi }
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

fn elementwise2(
    a: &IntervalTensor,
    b: &IntervalTensor,
    shape: &Shape,
    f: impl Fn((f64, f64), (f64, f64)) -> Result<(f64, f64), String>,
) -> Result<IntervalTensor, String> {
    let n = shape.numel();
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    for i in 0..n {
        let (l, h) = f((at(&a.lo, i), at(&a.hi, i)), (at(&b.lo, i), at(&b.hi, i)))?;
        lo.push(l);
        hi.push(h);
    }
    Ok(IntervalTensor::from_vecs(shape, lo, hi))
}

/// Endpoint product with `0 * inf = 0`.
#[inline]
fn xmul(x: f64, y: f64) -> f64 {
    if x == 0.0 || y == 0.0 {
        0.0
    } else {
        x * y
    }
}

fn hull(candidates: [f64; 4]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in candidates {
        if c.is_nan() {
            return (f64::NEG_INFINITY, f64::INFINITY);
        }
        lo = lo.min(c);
        hi = hi.max(c);
    }
    (lo, hi)
}

fn mul_iv(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    hull([xmul(a.0, b.0), xmul(a.0, b.1), xmul(a.1, b.0), xmul(a.1, b.1)])
}

fn div_iv(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    hull([a.0 / b.0, a.0 / b.1, a.1 / b.0, a.1 / b.1])
}

fn add_iv(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 + b.0, a.1 + b.1)
}

fn pow_interval(a: &IntervalTensor, k: f64) -> Result<IntervalTensor, String> {
    let integer = k.fract() == 0.0;
    let even = integer && (k / 2.0).fract() == 0.0;
    let mut lo = Vec::with_capacity(a.lo.numel());
    let mut hi = Vec::with_capacity(a.lo.numel());
    for (&l, &h) in a.lo.data().iter().zip(a.hi.data()) {
        let (pl, ph) = (l.powf(k), h.powf(k));
        let (rl, rh) = if k == 0.0 {
            (1.0, 1.0)
        } else if !integer && l < 0.0 {
            return Err(format!("non-integer exponent {k} over negative base interval [{l}, {h}]"));
        } else if k < 0.0 && l <= 0.0 && 0.0 <= h {
            return Err(format!("negative exponent {k} over interval [{l}, {h}] containing 0"));
        } else if even && l < 0.0 && 0.0 < h {
            (0.0, pl.max(ph))
        } else {
            // monotone on the interval
            (pl.min(ph), pl.max(ph))
        };
        lo.push(rl);
        hi.push(rh);
    }
    let mut out = IntervalTensor::from_vecs(a.shape(), lo, hi);
    if k != 0.0 {
        widen(&mut out.lo, true, LIBM_ULPS);
        widen(&mut out.hi, false, LIBM_ULPS);
        // an even power is never negative
        if even {
            for v in out.lo.data_mut() {
                *v = v.max(0.0);
            }
        }
    }
    Ok(out)
}

fn matmul_interval(a: &IntervalTensor, b: &IntervalTensor, shape: &Shape) -> IntervalTensor {
    let (m, k) = (a.shape().dims()[0], a.shape().dims()[1]);
    let n = b.shape().dims()[1];
    let (al, ah, bl, bh) = (a.lo.data(), a.hi.data(), b.lo.data(), b.hi.data());
    let mut lo = vec![0.0; m * n];
    let mut hi = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = (0.0, 0.0);
            for p in 0..k {
                let prod = mul_iv((al[i * k + p], ah[i * k + p]), (bl[p * n + j], bh[p * n + j]));
                acc = add_iv(acc, prod);
            }
            lo[i * n + j] = acc.0;
            hi[i * n + j] = acc.1;
        }
    }
    IntervalTensor::from_vecs(shape, lo, hi)
}

fn ln_iv(a: (f64, f64)) -> (f64, f64) {
    let mut l = a.0.ln();
    let mut h = a.1.ln();
    for _ in 0..LIBM_ULPS {
        l = l.next_down();
        h = h.next_up();
    }
    (l, h)
}

/// Mirrors [`kernels::bce_term`] step by step, then the mean.
fn bce_interval(p: &IntervalTensor, t: &IntervalTensor) -> IntervalTensor {
    let m = p.lo.numel().max(t.lo.numel());
    let mut acc = (0.0, 0.0);
    for i in 0..m {
        let pc = (
            at(&p.lo, i).clamp(BCE_EPSILON, 1.0 - BCE_EPSILON),
            at(&p.hi, i).clamp(BCE_EPSILON, 1.0 - BCE_EPSILON),
        );
        let ti = (at(&t.lo, i), at(&t.hi, i));
        let q = (1.0 - pc.1, 1.0 - pc.0);
        let u = (1.0 - ti.1, 1.0 - ti.0);
        let s = add_iv(mul_iv(ti, ln_iv(pc)), mul_iv(u, ln_iv(q)));
        acc = add_iv(acc, (-s.1, -s.0));
    }
    let count = m as f64;
    IntervalTensor::from_vecs(&Shape::scalar(), vec![acc.0 / count], vec![acc.1 / count])
}

/// Frobenius norm of the elementwise magnitude of `j`, an upper bound on the
/// spectral norm of every matrix inside the interval.
pub fn frobenius_bound(j: &IntervalTensor) -> f64 {
    j.magnitude().l2_norm()
}

/// Interval baseline: encloses the Jacobian over `bounds` and reports the
/// Frobenius bound `[0, U]`.
///
/// `bounds` is keyed by ids of `graph` and must cover every variable.
pub fn ibp_sensitivity(graph: &Graph, wrt: &[NodeId], bounds: &BoundsSpec) -> Result<SensitivityReport, IntervalError> {
    let start = Instant::now();
    let j = jacobian(graph, wrt)?;
    let mut jb = BoundsSpec::new();
    for v in j.graph.variables() {
        let name = j.graph.name(v).unwrap_or_default();
        let src = graph.variable(name).expect("jacobian keeps variable names");
        let b = bounds.get(&src).ok_or_else(|| IntervalError::MissingBounds {
            node: src,
            name: name.to_string(),
        })?;
        jb.insert(v, b.clone());
    }
    let prop = propagate(&j.graph, &jb)?;
    let bound = frobenius_bound(prop.get(j.output()));
    let warning = (!prop.diverged.is_empty() || !bound.is_finite())
        .then(|| "interval enclosure diverged; the bound is infinite".to_string());
    Ok(SensitivityReport {
        method: Method::Ibp,
        bound,
        interval_low: 0.0,
        certified: true,
        argmax: None,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        warning,
        fingerprint: analysis_fingerprint(graph, bounds).to_hex(),
    })
}
