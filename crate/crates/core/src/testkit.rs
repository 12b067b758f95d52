//! Random well-conditioned graphs for differential and property testing.
//!
//! Arguments of `Log`, `Pow` and `Div` denominators are squashed into a
//! positive range, so every generated graph evaluates to finite values at
//! every in-bounds point.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, GraphBuilder, NodeId, NodeKind};
use crate::tensor::{Shape, Tensor};

/// Every kind a query may use.
pub const PUBLIC_KINDS: [&str; 17] = [
    "Input",
    "Parameter",
    "Constant",
    "Add",
    "Sub",
    "Mul",
    "Div",
    "Neg",
    "MatMul",
    "Pow",
    "Exp",
    "Log",
    "Sigmoid",
    "Sum",
    "Mean",
    "Clip",
    "BinaryCrossEntropy",
];

#[derive(Debug, Clone)]
pub struct GenConfig {
    /// Nesting depth of generated operations.
    pub max_depth: usize,
    /// Restrict every variable to a single element.
    pub scalar_only: bool,
    pub max_variables: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            max_depth: 6,
            scalar_only: false,
            max_variables: 4,
        }
    }
}

impl GenConfig {
    /// Graphs over at most `n` scalar variables.
    pub fn scalar(n: usize) -> Self {
        Self {
            max_depth: 4,
            scalar_only: true,
            max_variables: n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomGraph {
    pub graph: Graph,
    /// All variables, private inputs first.
    pub variables: Vec<NodeId>,
    pub kinds: BTreeSet<&'static str>,
    pub seed: u64,
}

struct Gen<'a> {
    b: GraphBuilder,
    rng: ChaCha8Rng,
    cfg: &'a GenConfig,
    vars: Vec<(NodeId, Shape)>,
    top: usize,
}

const POW_EXPONENTS: [f64; 5] = [2.0, 3.0, 0.5, -1.0, 1.5];

impl Gen<'_> {
    fn shape_pool(&self) -> Vec<Shape> {
        if self.cfg.scalar_only {
            vec![Shape::scalar(), Shape::matrix(1, 1)]
        } else {
            vec![
                Shape::scalar(),
                Shape::vector(2),
                Shape::vector(3),
                Shape::matrix(2, 2),
                Shape::matrix(2, 3),
            ]
        }
    }

    fn constant(&mut self, shape: &Shape) -> NodeId {
        let data = (0..shape.numel()).map(|_| self.rng.random_range(-1.0..1.0)).collect();
        self.b.constant(Tensor::new(shape.clone(), data).expect("length matches"))
    }

    fn variable(&mut self, shape: &Shape) -> NodeId {
        let existing: Vec<NodeId> = self.vars.iter().filter(|(_, s)| s == shape).map(|(id, _)| *id).collect();
        let can_create = self.vars.len() < self.cfg.max_variables;
        if !existing.is_empty() && (!can_create || self.rng.random_bool(0.6)) {
            return existing[self.rng.random_range(0..existing.len())];
        }
        if !can_create {
            // reuse any variable, reshaped when element counts allow
            let same_size: Vec<NodeId> = self
                .vars
                .iter()
                .filter(|(_, s)| s.numel() == shape.numel())
                .map(|(id, _)| *id)
                .collect();
            if let Some(&v) = same_size.first() {
                return self.b.reshape(v, shape.clone()).expect("same element count");
            }
            return self.constant(shape);
        }
        let k = self.vars.len();
        let id = if k == 0 || self.rng.random_bool(0.5) {
            self.b.input(format!("v{k}"), shape.clone())
        } else {
            self.b.parameter(format!("v{k}"), shape.clone())
        };
        let lo = self.rng.random_range(-1.0..0.5);
        let hi = lo + self.rng.random_range(0.2..1.5);
        self.b.bound_uniform(id, lo, hi).expect("valid bounds");
        self.vars.push((id, shape.clone()));
        id
    }

    fn leaf(&mut self, shape: &Shape) -> NodeId {
        if self.rng.random_bool(0.75) {
            self.variable(shape)
        } else {
            self.constant(shape)
        }
    }

    /// `sigmoid(e) + c`, in `[c, c + 1]` with `c` in `[0.5, 1.5]`.
    fn positive(&mut self, shape: &Shape, depth: usize) -> NodeId {
        let e = self.expr(shape, depth);
        let s = self.b.sigmoid(e).expect("unary");
        let c = self.rng.random_range(0.5..1.5);
        let c = self.b.scalar(c);
        self.b.add(s, c).expect("scalar broadcast")
    }

    fn operand(&mut self, shape: &Shape, depth: usize) -> NodeId {
        if shape.rank() > 0 && self.rng.random_bool(0.25) {
            self.expr(&Shape::scalar(), depth)
        } else {
            self.expr(shape, depth)
        }
    }

    fn expr(&mut self, shape: &Shape, depth: usize) -> NodeId {
        if depth == 0 || (depth + 1 < self.top && self.rng.random_bool(0.1)) {
            return self.leaf(shape);
        }
        let d = depth - 1;
        let choice = self.rng.random_range(0..14);
        match choice {
            0 => {
                let (x, y) = (self.expr(shape, d), self.operand(shape, d));
                if self.rng.random_bool(0.5) {
                    self.b.add(x, y).unwrap()
                } else {
                    self.b.add(y, x).unwrap()
                }
            }
            1 => {
                let (x, y) = (self.expr(shape, d), self.operand(shape, d));
                self.b.sub(x, y).unwrap()
            }
            2 => {
                let (x, y) = (self.expr(shape, d), self.operand(shape, d));
                self.b.mul(x, y).unwrap()
            }
            3 => {
                let x = self.expr(shape, d);
                let den_shape = if shape.rank() > 0 && self.rng.random_bool(0.3) {
                    Shape::scalar()
                } else {
                    shape.clone()
                };
                let y = self.positive(&den_shape, d);
                self.b.div(x, y).unwrap()
            }
            4 => {
                let x = self.expr(shape, d);
                self.b.neg(x).unwrap()
            }
            5 if shape.rank() == 2 => {
                let (r, c) = (shape.dims()[0], shape.dims()[1]);
                let k = if self.cfg.scalar_only { 1 } else { self.rng.random_range(1..=3) };
                let x = self.expr(&Shape::matrix(r, k), d);
                let y = self.expr(&Shape::matrix(k, c), d);
                self.b.matmul(x, y).unwrap()
            }
            6 => {
                let k = POW_EXPONENTS[self.rng.random_range(0..POW_EXPONENTS.len())];
                let x = if k.fract() == 0.0 && k > 0.0 && self.rng.random_bool(0.5) {
                    self.expr(shape, d)
                } else {
                    self.positive(shape, d)
                };
                self.b.pow(x, k).unwrap()
            }
            7 => {
                let x = self.expr(shape, d);
                let s = self.b.sigmoid(x).unwrap();
                self.b.exp(s).unwrap()
            }
            8 => {
                let x = self.positive(shape, d);
                self.b.log(x).unwrap()
            }
            9 => {
                let x = self.expr(shape, d);
                self.b.sigmoid(x).unwrap()
            }
            10 | 11 => self.reduction(shape, d, choice == 11),
            12 => {
                let x = self.expr(shape, d);
                let lo = self.rng.random_range(-1.0..0.5);
                let hi = lo + self.rng.random_range(0.1..1.5);
                self.b.clip(x, lo, hi).unwrap()
            }
            13 if shape.rank() == 0 => {
                let pool = self.shape_pool();
                let s = pool[self.rng.random_range(0..pool.len())].clone();
                let logits = self.expr(&s, d);
                let p = self.b.sigmoid(logits).unwrap();
                let t = if self.rng.random_bool(0.5) {
                    let e = self.expr(&s, d);
                    self.b.sigmoid(e).unwrap()
                } else {
                    let data = (0..s.numel()).map(|_| self.rng.random_range(0.0..1.0)).collect();
                    self.b.constant(Tensor::new(s, data).unwrap())
                };
                self.b.bce(p, t).unwrap()
            }
            _ => {
                let x = self.expr(shape, d);
                self.b.sigmoid(x).unwrap()
            }
        }
    }

    /// Sum or mean producing `shape`: over everything for scalars, along a
    /// new axis otherwise.
    fn reduction(&mut self, shape: &Shape, depth: usize, mean: bool) -> NodeId {
        let (source, axis) = if shape.rank() == 0 {
            let pool = self.shape_pool();
            (pool[self.rng.random_range(0..pool.len())].clone(), None)
        } else if shape.rank() == 1 && !self.cfg.scalar_only {
            let axis = self.rng.random_range(0..2);
            let extra = self.rng.random_range(2..=3);
            (shape.insert_axis(axis, extra), Some(axis))
        } else {
            // keep the shape: reduce an axis of extent one
            (shape.insert_axis(0, 1), Some(0))
        };
        let x = self.expr(&source, depth);
        if mean {
            self.b.mean(x, axis).unwrap()
        } else {
            self.b.sum(x, axis).unwrap()
        }
    }
}

/// Builds a random graph from `seed`. Every variable is bounded.
pub fn random_graph(seed: u64, cfg: &GenConfig) -> RandomGraph {
    let mut g = Gen {
        b: GraphBuilder::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        cfg,
        vars: Vec::new(),
        top: 0,
    };
    let pool = g.shape_pool();
    let out_shape = pool[g.rng.random_range(0..pool.len())].clone();
    let depth = g.rng.random_range(3..=cfg.max_depth.max(3));
    g.top = depth;
    let mut out = g.expr(&out_shape, depth);
    if g.vars.is_empty() {
        let v = g.variable(&out_shape);
        out = g.b.add(out, v).unwrap();
    }
    g.b.output(out).unwrap();
    if g.rng.random_bool(0.2) {
        // a second output sharing the graph
        let s = g.b.sum(out, None).unwrap();
        let e = g.b.sigmoid(s).unwrap();
        g.b.output(e).unwrap();
    }
    let graph = g.b.finish();
    let kinds = graph.nodes().iter().map(|n| n.kind.name()).collect();
    let variables = graph.variables().collect();
    RandomGraph {
        graph,
        variables,
        kinds,
        seed,
    }
}

/// Uniform point inside the bounds of every variable.
pub fn sample_point(graph: &Graph, rng: &mut impl Rng) -> HashMap<NodeId, Tensor> {
    graph
        .variables()
        .map(|v| {
            let b = &graph.bounds()[&v];
            let shape = graph.shape(v);
            let data = (0..shape.numel())
                .map(|i| {
                    let (lo, hi) = (b.lo_at(i), b.hi_at(i));
                    lo + rng.random::<f64>() * (hi - lo)
                })
                .collect();
            (v, Tensor::new(shape.clone(), data).unwrap())
        })
        .collect()
}

/// True when some `Clip` argument lies within `margin` of a clip boundary at
/// the evaluated point, where the derivative jumps.
pub fn near_kink(graph: &Graph, values: &[Tensor], margin: f64) -> bool {
    graph.nodes().iter().any(|n| match n.kind {
        NodeKind::Clip { lo, hi } | NodeKind::ClipMask { lo, hi } => values[n.inputs[0].0]
            .data()
            .iter()
            .any(|&v| (v - lo).abs() < margin || (v - hi).abs() < margin),
        _ => false,
    })
}

/// Central-difference Jacobian of all outputs with respect to `wrt`, in the
/// same layout as [`crate::autodiff::jacobian`].
pub fn finite_difference_jacobian(graph: &Graph, wrt: &[NodeId], point: &HashMap<NodeId, Tensor>, step: f64) -> Tensor {
    let flat = |p: &HashMap<NodeId, Tensor>| -> Vec<f64> {
        graph
            .evaluate(p)
            .expect("graph evaluates")
            .into_iter()
            .flat_map(Tensor::into_data)
            .collect()
    };
    let rows = graph.output_size();
    let cols: usize = wrt.iter().map(|&w| graph.shape(w).numel()).sum();
    let mut jac = vec![0.0; rows * cols];
    let mut col = 0;
    for &w in wrt {
        for e in 0..graph.shape(w).numel() {
            let mut plus = point.clone();
            plus.get_mut(&w).unwrap().data_mut()[e] += step;
            let mut minus = point.clone();
            minus.get_mut(&w).unwrap().data_mut()[e] -= step;
            let (fp, fm) = (flat(&plus), flat(&minus));
            for r in 0..rows {
                jac[r * cols + col] = (fp[r] - fm[r]) / (2.0 * step);
            }
            col += 1;
        }
    }
    Tensor::new(Shape::matrix(rows, cols.max(1)), if cols == 0 { vec![0.0; rows] } else { jac }).unwrap()
}
