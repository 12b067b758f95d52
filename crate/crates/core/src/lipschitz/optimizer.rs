//! Box-constrained global maximizer in the style of simplicial homology
//! global optimization, simplified.
//!
//! Each round draws a scrambled Sobol sample of the box (plus every corner in
//! low dimension), links each sample to its nearest neighbours, and takes the
//! samples that dominate their neighbourhood as starting points for projected
//! quasi-Newton ascent. The round is repeated with twice the samples; the result
//! is certified when the best value survives the doubling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Function to maximize. Must be pure: equal points give equal values.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    /// `None` marks an infeasible point (for example a non-finite value).
    fn value(&self, x: &[f64]) -> Option<f64>;

    /// Exact gradient, when available. `None` falls back to finite
    /// differences.
    fn gradient(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Objective for (usize, F) {
    fn dim(&self) -> usize {
        self.0
    }

    fn value(&self, x: &[f64]) -> Option<f64> {
        let v = (self.1)(x);
        v.is_finite().then_some(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len(), "box sides differ in dimension");
        assert!(lo.iter().zip(&hi).all(|(l, h)| l <= h), "box has lo > hi");
        Self { lo, hi }
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| l <= v && v <= h)
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }

    fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Low-discrepancy samples in the first round; the second round uses twice
    /// as many.
    pub samples: usize,
    /// Refinement starts per round.
    pub max_starts: usize,
    /// Neighbours per sample in the complex; 0 picks `max(2 * dim, 4)`.
    pub neighbours: usize,
    /// Box corners are added to the sample when `dim` is at most this.
    pub corner_dim_limit: usize,
    pub max_iters: usize,
    /// Relative improvement below which ascent stops.
    pub tolerance: f64,
    /// Finite-difference step as a fraction of each box width.
    pub fd_step: f64,
    /// Relative agreement of the best value across the doubling.
    pub certificate_tolerance: f64,
    pub seed: u32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            samples: 128,
            max_starts: 16,
            neighbours: 0,
            corner_dim_limit: 8,
            max_iters: 200,
            tolerance: 1e-12,
            fd_step: 1e-6,
            certificate_tolerance: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub argmax: Vec<f64>,
    pub value: f64,
    pub certified: bool,
    pub warning: Option<String>,
    pub evaluations: usize,
}

/// Best point seen by a computation, with an evaluation count.
#[derive(Debug, Clone)]
struct Best {
    x: Vec<f64>,
    value: f64,
    evals: usize,
}

impl Best {
    fn empty() -> Self {
        Self {
            x: Vec::new(),
            value: f64::NEG_INFINITY,
            evals: 0,
        }
    }

    fn offer(&mut self, x: &[f64], v: Option<f64>) {
        self.evals += 1;
        if let Some(v) = v {
            if v > self.value {
                self.value = v;
                self.x = x.to_vec();
            }
        }
    }

    /// Deterministic merge: the earlier argument wins ties.
    fn merge(mut self, other: Best) -> Best {
        self.evals += other.evals;
        if other.value > self.value {
            self.value = other.value;
            self.x = other.x;
        }
        self
    }
}

fn sobol_points(bx: &BoxDomain, n: usize, seed: u32) -> Vec<Vec<f64>> {
    let dim = bx.dim();
    let widths = bx.widths();
    (0..n)
        .map(|i| {
            (0..dim)
                .map(|d| {
                    let u = sobol_burley::sample(
                        i as u32,
                        (d % sobol_burley::NUM_DIMENSIONS as usize) as u32,
                        seed.wrapping_add((d / sobol_burley::NUM_DIMENSIONS as usize) as u32),
                    ) as f64;
                    bx.lo[d] + u * widths[d]
                })
                .collect()
        })
        .collect()
}

fn corners(bx: &BoxDomain) -> Vec<Vec<f64>> {
    let dim = bx.dim();
    (0..1usize << dim)
        .map(|mask| (0..dim).map(|d| if mask >> d & 1 == 1 { bx.hi[d] } else { bx.lo[d] }).collect())
        .collect()
}

fn sample_set(bx: &BoxDomain, n: usize, config: &OptimizerConfig) -> Vec<Vec<f64>> {
    let mut pts = Vec::with_capacity(n + 1);
    if bx.dim() <= config.corner_dim_limit {
        pts.extend(corners(bx));
    }
    pts.push(bx.lo.iter().zip(&bx.hi).map(|(l, h)| 0.5 * (l + h)).collect());
    pts.extend(sobol_points(bx, n, config.seed));
    pts
}

/// Indices of samples whose value is at least that of each of their `k`
/// nearest neighbours (box-normalized distance). Ties go to the lower index.
fn local_maxima(points: &[Vec<f64>], values: &[Option<f64>], bx: &BoxDomain, k: usize) -> Vec<usize> {
    let scale: Vec<f64> = bx.widths().iter().map(|w| if *w > 0.0 { 1.0 / w } else { 0.0 }).collect();
    let n = points.len();
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).zip(&scale).map(|((x, y), s)| ((x - y) * s).powi(2)).sum()
    };
    let key = |i: usize| values[i].unwrap_or(f64::NEG_INFINITY);
    (0..n)
        .into_par_iter()
        .filter(|&i| {
            if values[i].is_none() {
                return false;
            }
            let mut near: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist(&points[i], &points[j]), j)).collect();
            let k = k.min(near.len());
            if k == 0 {
                return true;
            }
            near.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near[..k].iter().all(|&(_, j)| key(i) > key(j) || (key(i) == key(j) && i < j))
        })
        .collect()
}

fn gradient_at<O: Objective + ?Sized>(
    f: &O,
    bx: &BoxDomain,
    x: &[f64],
    fx: f64,
    config: &OptimizerConfig,
    best: &mut Best,
) -> Vec<f64> {
    if let Some(g) = f.gradient(x) {
        if g.len() == x.len() && g.iter().all(|v| v.is_finite()) {
            return g;
        }
    }
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for d in 0..x.len() {
        let h = config.fd_step * (bx.hi[d] - bx.lo[d]);
        if h == 0.0 {
            continue;
        }
        let (a, b) = ((x[d] - h).max(bx.lo[d]), (x[d] + h).min(bx.hi[d]));
        let eval = |p: &mut Vec<f64>, at: f64, best: &mut Best| {
            p[d] = at;
            let v = f.value(p);
            best.offer(p, v);
            v
        };
        let fa = if a == x[d] { Some(fx) } else { eval(&mut probe, a, best) };
        let fb = if b == x[d] { Some(fx) } else { eval(&mut probe, b, best) };
        probe[d] = x[d];
        if let (Some(fa), Some(fb)) = (fa, fb) {
            if b > a {
                g[d] = (fb - fa) / (b - a);
            }
        }
    }
    g
}

/// Above this dimension the ascent keeps an identity metric instead of a
/// dense quasi-Newton matrix.
const BFGS_DIM_LIMIT: usize = 400;

/// Coordinates pinned at a bound with the gradient pointing outward.
fn pinned(bx: &BoxDomain, x: &[f64], g: &[f64]) -> Vec<bool> {
    (0..x.len())
        .map(|i| bx.hi[i] == bx.lo[i] || (x[i] <= bx.lo[i] && g[i] <= 0.0) || (x[i] >= bx.hi[i] && g[i] >= 0.0))
        .collect()
}

/// Projected quasi-Newton ascent with backtracking from `x0`.
///
/// The inverse curvature estimate is a BFGS update of `-f`, restricted to
/// coordinates not pinned at the box. Stops when the projected gradient
/// vanishes or no step improves the value.
fn ascend<O: Objective + ?Sized>(f: &O, bx: &BoxDomain, x0: &[f64], f0: f64, config: &OptimizerConfig) -> Best {
    let n = x0.len();
    let mut best = Best::empty();
    best.x = x0.to_vec();
    best.value = f0;
    let mut x = x0.to_vec();
    let mut fx = f0;
    let diameter = bx.widths().iter().map(|w| w * w).sum::<f64>().sqrt();
    let dense = n <= BFGS_DIM_LIMIT;
    let identity = |n: usize| {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
        h
    };
    let mut hinv = if dense { identity(n) } else { Vec::new() };
    let mut fresh = true;
    let mut g = gradient_at(f, bx, &x, fx, config, &mut best);
    for _ in 0..config.max_iters {
        let pin = pinned(bx, &x, &g);
        let pg: f64 = g.iter().zip(&pin).filter(|(_, p)| !**p).map(|(v, _)| v * v).sum::<f64>().sqrt();
        if pg == 0.0 || !pg.is_finite() {
            break;
        }
        let mut d: Vec<f64> = if dense {
            (0..n)
                .map(|i| {
                    if pin[i] {
                        return 0.0;
                    }
                    (0..n).filter(|&k| !pin[k]).map(|k| hinv[i * n + k] * g[k]).sum()
                })
                .collect()
        } else {
            g.iter().zip(&pin).map(|(v, p)| if *p { 0.0 } else { *v }).collect()
        };
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope.is_nan() || slope <= 0.0 {
            hinv = if dense { identity(n) } else { Vec::new() };
            fresh = true;
            d = g.iter().zip(&pin).map(|(v, p)| if *p { 0.0 } else { *v }).collect();
        }
        let dnorm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut t = if fresh { (0.1 * diameter / dnorm).min(1.0 / pg.max(f64::MIN_POSITIVE)) } else { 1.0 };
        if !t.is_finite() || t <= 0.0 {
            t = 0.1 * diameter / dnorm;
        }
        let mut accepted = None;
        for _ in 0..60 {
            let mut y: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            bx.project(&mut y);
            if y == x {
                break;
            }
            let fy = f.value(&y);
            best.offer(&y, fy);
            if let Some(fy) = fy {
                let predicted: f64 = y.iter().zip(&x).zip(&g).map(|((a, b), gi)| (a - b) * gi).sum();
                if fy > fx && fy >= fx + 1e-4 * predicted {
                    accepted = Some((y, fy));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((y, fy)) = accepted else {
            if fresh {
                break;
            }
            hinv = if dense { identity(n) } else { Vec::new() };
            fresh = true;
            continue;
        };
        let gy = gradient_at(f, bx, &y, fy, config, &mut best);
        let gain = fy - fx;
        if dense {
            // BFGS on -f: s = y - x, q = g(x) - g(y)
            let s_: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
            let q: Vec<f64> = g.iter().zip(&gy).map(|(a, b)| a - b).collect();
            let sq: f64 = s_.iter().zip(&q).map(|(a, b)| a * b).sum();
            let (sn, qn) = (
                s_.iter().map(|v| v * v).sum::<f64>().sqrt(),
                q.iter().map(|v| v * v).sum::<f64>().sqrt(),
            );
            if sq > 1e-12 * sn * qn {
                if fresh {
                    // scale the initial matrix to the observed curvature
                    let scale = sq / (qn * qn);
                    hinv = identity(n).into_iter().map(|v| v * scale).collect();
                }
                let rho = 1.0 / sq;
                let hq: Vec<f64> = (0..n).map(|i| (0..n).map(|k| hinv[i * n + k] * q[k]).sum()).collect();
                let qhq: f64 = q.iter().zip(&hq).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    for k in 0..n {
                        hinv[i * n + k] += -rho * (hq[i] * s_[k] + s_[i] * hq[k]) + (rho * rho * qhq + rho) * s_[i] * s_[k];
                    }
                }
                fresh = false;
            }
        }
        x = y;
        fx = fy;
        g = gy;
        if gain <= config.tolerance * fx.abs() {
            break;
        }
    }
    best
}

fn round<O: Objective + ?Sized>(f: &O, bx: &BoxDomain, n: usize, config: &OptimizerConfig) -> Best {
    let points = sample_set(bx, n, config);
    let values: Vec<Option<f64>> = points.par_iter().map(|p| f.value(p)).collect();
    let mut best = Best::empty();
    for (p, v) in points.iter().zip(&values) {
        best.offer(p, *v);
    }
    let k = if config.neighbours == 0 {
        (2 * bx.dim()).max(4)
    } else {
        config.neighbours
    };
    let mut starts = local_maxima(&points, &values, bx, k);
    starts.sort_by(|&a, &b| values[b].unwrap().total_cmp(&values[a].unwrap()).then(a.cmp(&b)));
    starts.truncate(config.max_starts.max(1));
    let refined: Vec<Best> = starts
        .par_iter()
        .map(|&i| ascend(f, bx, &points[i], values[i].unwrap(), config))
        .collect();
    refined.into_iter().fold(best, Best::merge)
}

/// Maximizes `f` over `bx`. Returns `None` when no sampled point is feasible.
pub fn global_maximize<O: Objective + ?Sized>(f: &O, bx: &BoxDomain, config: &OptimizerConfig) -> Option<Optimum> {
    assert_eq!(f.dim(), bx.dim(), "objective and box dimensions differ");
    if bx.dim() == 0 {
        let v = f.value(&[])?;
        return Some(Optimum {
            argmax: Vec::new(),
            value: v,
            certified: true,
            warning: None,
            evaluations: 1,
        });
    }
    let first = round(f, bx, config.samples.max(1), config);
    let second = round(f, bx, 2 * config.samples.max(1), config);
    let (v1, v2) = (first.value, second.value);
    let best = second.merge(first);
    if !best.value.is_finite() {
        return None;
    }
    let agree = (v2 - v1).abs() <= config.certificate_tolerance * v1.abs().max(v2.abs()).max(f64::MIN_POSITIVE);
    let certified = v1.is_finite() && v2.is_finite() && agree;
    let warning = (!certified).then(|| {
        format!(
            "maximizer did not stabilize under sample doubling (best {v1:.9e} then {v2:.9e}); the bound is approximate"
        )
    });
    Some(Optimum {
        argmax: best.x,
        value: best.value,
        certified,
        warning,
        evaluations: best.evals,
    })
}

/// Maximum of `f` over a uniform grid with `resolution` points per axis.
/// Returns the best point, its value and the number of evaluations.
pub fn grid_maximize<O: Objective + ?Sized>(f: &O, bx: &BoxDomain, resolution: usize) -> Option<Optimum> {
    let dim = bx.dim();
    let res = resolution.max(1);
    let total = res.checked_pow(dim as u32).expect("grid size overflows usize");
    let coord = |d: usize, i: usize| {
        if res == 1 {
            0.5 * (bx.lo[d] + bx.hi[d])
        } else {
            let t = i as f64 / (res - 1) as f64;
            if i == res - 1 {
                bx.hi[d]
            } else {
                bx.lo[d] + t * (bx.hi[d] - bx.lo[d])
            }
        }
    };
    let best = (0..total)
        .into_par_iter()
        .fold(Best::empty, |mut best, mut idx| {
            let x: Vec<f64> = (0..dim)
                .map(|d| {
                    let i = idx % res;
                    idx /= res;
                    coord(d, i)
                })
                .collect();
            let v = f.value(&x);
            best.offer(&x, v);
            best
        })
        .reduce(Best::empty, |a, b| {
            // keep the lexicographically smaller point on ties
            if b.value > a.value || (b.value == a.value && b.x < a.x && !b.x.is_empty()) {
                Best { evals: a.evals + b.evals, ..b }
            } else {
                Best { evals: a.evals + b.evals, ..a }
            }
        });
    best.value.is_finite().then_some(Optimum {
        argmax: best.x,
        value: best.value,
        certified: false,
        warning: None,
        evaluations: best.evals,
    })
}
