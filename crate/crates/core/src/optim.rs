//! First-order warm-up (Adam) and quasi-Newton refinement (L-BFGS) for
//! smooth objectives that return their value and gradient together.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// A differentiable objective. `grad` has the length of `x` and is
/// overwritten.
pub trait Objective {
    fn value_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Objective for F {
    fn value_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self(x, grad)
    }
}

/// Outcome of an optimizer run. `x` is the best iterate seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Objective value after each iteration.
    pub history: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Never reports convergence; it is a warm-up.
pub fn adam<O: Objective + ?Sized>(f: &mut O, x0: &[f64], opts: &AdamOptions) -> OptimReport {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut best = (f64::INFINITY, x.clone(), 0.0);
    let mut history = Vec::with_capacity(opts.steps);
    for step in 1..=opts.steps {
        let value = f.value_grad(&x, &mut g);
        if value.is_finite() && value < best.0 {
            best = (value, x.clone(), norm(&g));
        }
        history.push(value);
        if !value.is_finite() {
            break;
        }
        let c1 = 1.0 - opts.beta1.powi(step as i32);
        let c2 = 1.0 - opts.beta2.powi(step as i32);
        for i in 0..n {
            m[i] = opts.beta1 * m[i] + (1.0 - opts.beta1) * g[i];
            v[i] = opts.beta2 * v[i] + (1.0 - opts.beta2) * g[i] * g[i];
            x[i] -= opts.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + opts.eps);
        }
    }
    let value = f.value_grad(&x, &mut g);
    if value.is_finite() && value < best.0 {
        best = (value, x, norm(&g));
    }
    OptimReport {
        x: best.1,
        value: best.0,
        grad_norm: best.2,
        iterations: opts.steps,
        evaluations: opts.steps + 1,
        converged: false,
        history,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    /// Stop when the gradient 2-norm falls to this.
    pub grad_tol: f64,
    /// Stop when the relative decrease over one iteration falls to this.
    pub rel_tol: f64,
    pub memory: usize,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            grad_tol: 1e-7,
            rel_tol: 1e-15,
            memory: 10,
            max_line_search: 25,
        }
    }
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

struct Probe {
    alpha: f64,
    value: f64,
    slope: f64,
    grad: Vec<f64>,
}

fn probe<O: Objective + ?Sized>(f: &mut O, x: &[f64], d: &[f64], alpha: f64, evals: &mut usize) -> Probe {
    let xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
    let mut grad = vec![0.0; x.len()];
    let value = f.value_grad(&xt, &mut grad);
    *evals += 1;
    let slope = dot(&grad, d);
    Probe { alpha, value, slope, grad }
}

/// Minimizer of the cubic through two probes, safeguarded into the bracket.
fn interpolate(lo: &Probe, hi: &Probe) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let d1 = lo.slope + hi.slope - 3.0 * (lo.value - hi.value) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    let mid = 0.5 * (a + b);
    if !(disc >= 0.0) {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    let (l, u) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (u - l);
    if t.is_finite() {
        t.clamp(l + margin, u - margin)
    } else {
        mid
    }
}

/// Strong-Wolfe line search by bracketing and zooming. Returns `None` when no
/// acceptable step is found within the budget.
fn line_search<O: Objective + ?Sized>(
    f: &mut O,
    x: &[f64],
    d: &[f64],
    f0: f64,
    slope0: f64,
    alpha0: f64,
    budget: usize,
    evals: &mut usize,
) -> Option<Probe> {
    let zero = Probe { alpha: 0.0, value: f0, slope: slope0, grad: Vec::new() };
    let mut prev = zero;
    let mut alpha = alpha0;
    let mut used = 0;
    let (mut lo, mut hi) = loop {
        if used >= budget {
            return None;
        }
        used += 1;
        let cur = probe(f, x, d, alpha, evals);
        if !cur.value.is_finite() {
            // Shrink toward the last finite point.
            alpha = 0.5 * (prev.alpha + alpha);
            continue;
        }
        if cur.value > f0 + C1 * alpha * slope0 || (prev.alpha > 0.0 && cur.value >= prev.value) {
            break (prev, cur);
        }
        if cur.slope.abs() <= -C2 * slope0 {
            return Some(cur);
        }
        if cur.slope >= 0.0 {
            break (cur, prev);
        }
        prev = cur;
        alpha *= 2.0;
    };
    while used < budget {
        used += 1;
        let a = interpolate(&lo, &hi);
        let cur = probe(f, x, d, a, evals);
        if !cur.value.is_finite() || cur.value > f0 + C1 * a * slope0 || cur.value >= lo.value {
            hi = cur;
        } else {
            if cur.slope.abs() <= -C2 * slope0 {
                return Some(cur);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
            break;
        }
    }
    // Sufficient decrease without curvature is still progress.
    (lo.alpha > 0.0 && lo.value < f0).then_some(lo)
}

/// Limited-memory BFGS with a strong-Wolfe line search.
pub fn lbfgs<O: Objective + ?Sized>(f: &mut O, x0: &[f64], opts: &LbfgsOptions) -> OptimReport {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut value = f.value_grad(&x, &mut g);
    let mut evaluations = 1;
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut history = Vec::new();
    let mut converged = norm(&g) <= opts.grad_tol;
    let mut iterations = 0;
    while !converged && iterations < opts.max_iter && value.is_finite() {
        iterations += 1;
        // Two-loop recursion for d = −H·g.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = pairs.back().map_or(1.0 / norm(&g).max(1e-300), |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        // A restart takes a short gradient step whose decrease says nothing
        // about stationarity.
        let restarted = pairs.is_empty();
        let alpha0 = if restarted { 1.0 / norm(&g).max(1e-300) } else { 1.0 };
        let step = line_search(f, &x, &d, value, slope, alpha0, opts.max_line_search, &mut evaluations);
        let Some(step) = step else {
            if pairs.is_empty() {
                break;
            }
            pairs.clear();
            continue;
        };
        let s: Vec<f64> = d.iter().map(|v| step.alpha * v).collect();
        let y: Vec<f64> = step.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += si);
        let decrease = value - step.value;
        value = step.value;
        g = step.grad;
        history.push(value);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if pairs.len() == opts.memory.max(1) {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        converged =
            norm(&g) <= opts.grad_tol || (!restarted && decrease <= opts.rel_tol * value.abs().max(1e-300));
    }
    OptimReport {
        grad_norm: norm(&g),
        x,
        value,
        iterations,
        evaluations,
        converged,
        history,
    }
}
