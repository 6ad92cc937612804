//! Smooth option-price surface `u(t, x)` fitted to one observed trajectory,
//! regularized by a sparse physics residual `u_t − Ψζ` on collocation points.
//!
//! Training minimizes `α·L_d + γ·L_p + δ·‖ζ‖₁` jointly in the network weights
//! and the auxiliary coefficients ζ: an Adam warm-up, then L-BFGS in outer
//! rounds, each opening with an exact ζ update for the current surface. Both
//! losses are measured in units of the output scale so the weights are
//! dimensionless. ζ is returned in the fit report and is not part of the
//! model.

mod mlp;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

pub use mlp::{Channels, Mlp, Outputs, Tape};

use crate::error::{invalid, Result};
use crate::market::{Greeks, PathPair};
use crate::optim::{adam, lbfgs, AdamOptions, LbfgsOptions};
use crate::sparse::{LibrarySpec, Term};

const CHECKPOINT_VERSION: u32 = 1;

/// Features a physics term may use.
pub const PHYSICS_FEATURES: [&str; 5] = ["t", "x", "u", "u_x", "u_xx"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { hidden: vec![64; 4], activation: Activation::Tanh }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub n_collocation: usize,
    pub alpha: f64,
    pub gamma: f64,
    /// Weight of the increment term `Σ(Δu − ΔY)² / ΣΔY²` over consecutive
    /// observations; zero leaves the loss on values alone.
    pub increment_weight: f64,
    pub delta: f64,
    pub physics_library: LibrarySpec,
    pub architecture: Architecture,
    pub adam: AdamOptions,
    pub lbfgs: LbfgsOptions,
    /// L-BFGS budget is split over this many rounds, each preceded by an
    /// exact ζ update.
    pub outer_rounds: usize,
    /// Data points beyond this are thinned by a uniform stride.
    pub max_data_points: usize,
    pub min_window: usize,
    /// Starting ζ; zeros when absent.
    pub zeta_init: Option<Vec<f64>>,
    /// Holds ζ at its starting value when false.
    pub train_zeta: bool,
    /// ε of the smoothed absolute value `√(ζ² + ε²)`.
    pub l1_smoothing: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_collocation: 2048,
            alpha: 1.0,
            gamma: 0.1,
            increment_weight: 0.0,
            delta: 1e-4,
            physics_library: default_physics_library(),
            architecture: Architecture::default(),
            adam: AdamOptions { steps: 500, learning_rate: 1e-3, ..Default::default() },
            lbfgs: LbfgsOptions { max_iter: 2000, grad_tol: 1e-7, ..Default::default() },
            outer_rounds: 4,
            max_data_points: 4096,
            min_window: 64,
            zeta_init: None,
            train_zeta: true,
            l1_smoothing: 1e-8,
            seed: 0,
        }
    }
}

pub fn default_physics_library() -> LibrarySpec {
    LibrarySpec::parse(&["1", "u", "u_x", "u_xx", "x·u_x", "x²·u_xx"]).expect("static library")
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.gamma >= 0.0 && self.delta >= 0.0 && self.increment_weight >= 0.0) {
            return invalid("loss weights must be non-negative");
        }
        if self.n_collocation == 0 {
            return invalid("n_collocation must be at least 1");
        }
        if self.architecture.hidden.is_empty() || self.architecture.hidden.contains(&0) {
            return invalid("architecture needs at least one nonempty hidden layer");
        }
        if self.min_window < 2 || self.max_data_points < 2 {
            return invalid("min_window and max_data_points must be at least 2");
        }
        for term in self.physics_library.terms() {
            if let Some(f) = term.factors().iter().find(|f| !PHYSICS_FEATURES.contains(&f.feature.as_str())) {
                return invalid(format!("physics term `{term}` uses unknown feature `{}`", f.feature));
            }
        }
        if let Some(z) = &self.zeta_init {
            if z.len() != self.physics_library.len() {
                return invalid("zeta_init length differs from the physics library");
            }
        }
        Ok(())
    }
}

/// Affine maps between raw and network units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub t_center: f64,
    pub t_scale: f64,
    pub x_center: f64,
    pub x_scale: f64,
    pub y_center: f64,
    pub y_scale: f64,
}

fn unit_map(lo: f64, hi: f64) -> (f64, f64) {
    let half = 0.5 * (hi - lo);
    (0.5 * (lo + hi), if half > 0.0 { 1.0 / half } else { 1.0 })
}

impl Normalization {
    /// Maps the data rectangle onto [−1, 1]² and the values to zero mean and
    /// unit spread.
    pub fn from_data(data: &PathPair) -> Self {
        let b = Bounds::of(data);
        let (t_center, t_scale) = unit_map(b.t.0, b.t.1);
        let (x_center, x_scale) = unit_map(b.x.0, b.x.1);
        let y = data.option();
        let y_center = crate::stats::mean(y);
        let spread = crate::stats::std_dev(y);
        let y_scale = if spread > 0.0 { spread } else { y_center.abs().max(1.0) };
        Self { t_center, t_scale, x_center, x_scale, y_center, y_scale }
    }

    pub fn input(&self, t: f64, x: f64) -> (f64, f64) {
        ((t - self.t_center) * self.t_scale, (x - self.x_center) * self.x_scale)
    }
}

/// Observed (t, x) rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub t: (f64, f64),
    pub x: (f64, f64),
}

impl Bounds {
    pub fn of(data: &PathPair) -> Self {
        let times = data.grid().times();
        let (lo, hi) = data
            .stock()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        Self { t: (times[0], times[times.len() - 1]), x: (lo, hi) }
    }
}

/// Uniform points over the rectangle, deterministic per seed.
pub fn sample_collocation(bounds: &Bounds, n_c: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n_c)
        .map(|_| {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            (bounds.t.0 + u * (bounds.t.1 - bounds.t.0), bounds.x.0 + v * (bounds.x.1 - bounds.x.0))
        })
        .collect()
}

/// A trained surface: architecture, normalization and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceModel {
    pub architecture: Architecture,
    pub normalization: Normalization,
    pub params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: u32,
    architecture: Architecture,
    normalization: Normalization,
    params: Vec<f64>,
}

const EVAL_CHUNK: usize = 4096;

impl SurfaceModel {
    fn mlp(&self) -> Mlp {
        Mlp::new(&self.architecture.hidden)
    }

    /// A model whose output is the constant `c`.
    pub fn constant(architecture: Architecture, c: f64) -> Self {
        let mlp = Mlp::new(&architecture.hidden);
        let params = vec![0.0; mlp.n_params()];
        let normalization = Normalization {
            t_center: 0.0,
            t_scale: 1.0,
            x_center: 0.0,
            x_scale: 1.0,
            y_center: c,
            y_scale: 1.0,
        };
        Self { architecture, normalization, params }
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        self.values(&[(t, x)])[0]
    }

    pub fn values(&self, points: &[(f64, f64)]) -> Vec<f64> {
        let mlp = self.mlp();
        let nm = &self.normalization;
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(EVAL_CHUNK) {
            let pts: Vec<_> = chunk.iter().map(|&(t, x)| nm.input(t, x)).collect();
            let o = mlp.forward(&self.params, &pts, Channels::Value).out;
            out.extend(o.value.iter().map(|v| nm.y_center + nm.y_scale * v));
        }
        out
    }

    pub fn derivatives(&self, t: f64, x: f64) -> Greeks {
        self.eval_derivatives(&[(t, x)])[0]
    }

    /// Value and derivatives in raw (t, x) units.
    pub fn eval_derivatives(&self, points: &[(f64, f64)]) -> Vec<Greeks> {
        let mlp = self.mlp();
        let nm = &self.normalization;
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(EVAL_CHUNK) {
            let pts: Vec<_> = chunk.iter().map(|&(t, x)| nm.input(t, x)).collect();
            let o = mlp.forward(&self.params, &pts, Channels::Jet).out;
            for j in 0..pts.len() {
                out.push(Greeks {
                    u: nm.y_center + nm.y_scale * o.value[j],
                    u_t: nm.y_scale * nm.t_scale * o.d_t[j],
                    u_x: nm.y_scale * nm.x_scale * o.d_x[j],
                    u_xx: nm.y_scale * nm.x_scale * nm.x_scale * o.d_xx[j],
                });
            }
        }
        out
    }

    /// Same function under a different normalization.
    pub fn renormalized(&self, target: Normalization) -> Self {
        let (a, b) = (&self.normalization, &target);
        let mut params = self.params.clone();
        // old t̃ = (t − a.c)·a.s with t = new t̃ / b.s + b.c.
        let input = [
            (a.t_scale / b.t_scale, (b.t_center - a.t_center) * a.t_scale),
            (a.x_scale / b.x_scale, (b.x_center - a.x_center) * a.x_scale),
        ];
        let output = (a.y_scale / b.y_scale, (a.y_center - b.y_center) / b.y_scale);
        self.mlp().reparametrize(&mut params, input, output);
        Self { architecture: self.architecture.clone(), normalization: target, params }
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            architecture: self.architecture.clone(),
            normalization: self.normalization,
            params: self.params.clone(),
        };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.version != CHECKPOINT_VERSION {
            return invalid(format!("unsupported checkpoint version {}", ck.version));
        }
        let m = SurfaceModel { architecture: ck.architecture, normalization: ck.normalization, params: ck.params };
        if m.params.len() != Mlp::new(&m.architecture.hidden).n_params() {
            return invalid("checkpoint weights do not match its architecture");
        }
        Ok(m)
    }
}

/// The auxiliary physics coefficients found during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsAux {
    pub terms: Vec<String>,
    pub zeta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub data_loss: f64,
    pub increment_loss: f64,
    pub physics_loss: f64,
    pub total_loss: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    /// Physics loss at the end of the warm-up and of each L-BFGS round.
    pub physics_history: Vec<f64>,
    /// Total loss at the same points.
    pub total_history: Vec<f64>,
    pub n_data: usize,
    pub n_collocation: usize,
    pub aux: PhysicsAux,
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub model: SurfaceModel,
    pub report: FitReport,
}

/// Physics library compiled to feature indices for per-point evaluation.
struct Physics {
    /// Per term, `(feature index into PHYSICS_FEATURES, power)` factors.
    terms: Vec<Vec<(usize, f64)>>,
}

const F_U: usize = 2;
const F_UX: usize = 3;
const F_UXX: usize = 4;

impl Physics {
    fn new(spec: &LibrarySpec) -> Self {
        let terms = spec
            .terms()
            .iter()
            .map(|t: &Term| {
                t.factors()
                    .iter()
                    .map(|f| {
                        let k = PHYSICS_FEATURES.iter().position(|n| *n == f.feature).expect("validated");
                        (k, f.power)
                    })
                    .collect()
            })
            .collect();
        Self { terms }
    }

    fn len(&self) -> usize {
        self.terms.len()
    }

    fn eval(&self, k: usize, v: &[f64; 5]) -> f64 {
        self.terms[k].iter().fold(1.0, |acc, &(i, p)| acc * powf(v[i], p))
    }

    /// ∂ψ_k/∂v[feature].
    fn partial(&self, k: usize, feature: usize, v: &[f64; 5]) -> f64 {
        let factors = &self.terms[k];
        let mut total = 0.0;
        for (a, &(i, p)) in factors.iter().enumerate() {
            if i != feature {
                continue;
            }
            let mut d = p * powf(v[i], p - 1.0);
            for (b, &(j, q)) in factors.iter().enumerate() {
                if b != a {
                    d *= powf(v[j], q);
                }
            }
            total += d;
        }
        total
    }
}

fn powf(v: f64, p: f64) -> f64 {
    if p == 1.0 {
        v
    } else if p == 0.0 {
        1.0
    } else if p == 2.0 {
        v * v
    } else if p.fract() == 0.0 {
        v.powi(p as i32)
    } else {
        v.powf(p)
    }
}

struct Loss<'a> {
    mlp: Mlp,
    nm: Normalization,
    data: Vec<(f64, f64)>,
    target: Vec<f64>,
    /// Successor points of `data[..next.len()]` and the observed increments.
    next: Vec<(f64, f64)>,
    increments: Vec<f64>,
    /// `ΣΔY²` in network units.
    increment_norm: f64,
    colloc: Vec<(f64, f64)>,
    colloc_x: Vec<f64>,
    colloc_t: Vec<f64>,
    physics: &'a Physics,
    cfg: &'a FitConfig,
    n_beta: usize,
    tapes: std::cell::RefCell<(Tape, Tape, Tape)>,
}

struct Parts {
    data: f64,
    increment: f64,
    physics: f64,
    total: f64,
}

impl Loss<'_> {
    fn evaluate(&self, theta: &[f64], grad: Option<&mut [f64]>) -> Parts {
        let (beta, zeta) = theta.split_at(self.n_beta);
        let cfg = self.cfg;
        let nm = &self.nm;
        let mut grad = grad;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let need_grad = grad.is_some();

        let mut tapes = self.tapes.borrow_mut();
        let (dtape, ctape, ntape) = &mut *tapes;
        self.mlp.forward_into(beta, &self.data, Channels::Value, dtape);
        let nd = self.data.len() as f64;
        let res: Vec<f64> = dtape.out.value.iter().zip(&self.target).map(|(a, b)| a - b).collect();
        let data_loss = res.iter().map(|r| r * r).sum::<f64>() / nd;
        let use_inc = cfg.increment_weight > 0.0 && !self.next.is_empty();
        let mut inc_res = Vec::new();
        let mut increment_loss = 0.0;
        if use_inc {
            self.mlp.forward_into(beta, &self.next, Channels::Value, ntape);
            inc_res = (0..self.next.len())
                .map(|k| ntape.out.value[k] - dtape.out.value[k] - self.increments[k])
                .collect();
            increment_loss = inc_res.iter().map(|r| r * r).sum::<f64>() / self.increment_norm;
        }

        // With γ = 0 the physics term only matters for reporting.
        let use_physics = cfg.gamma > 0.0 || !need_grad;
        let colloc: &[(f64, f64)] = if use_physics { &self.colloc } else { &[] };
        self.mlp.forward_into(beta, colloc, Channels::Jet, ctape);
        let o = &ctape.out;
        let nc = self.colloc.len() as f64;
        let ys = nm.y_scale;
        let (st, sx) = (nm.t_scale, nm.x_scale);
        let mut physics_loss = 0.0;
        let n_terms = self.physics.len();
        let mut zbar = vec![0.0; n_terms];
        let mut adj = Outputs {
            value: vec![0.0; colloc.len()],
            d_t: vec![0.0; colloc.len()],
            d_x: vec![0.0; colloc.len()],
            d_xx: vec![0.0; colloc.len()],
        };
        let mut psi = vec![0.0; n_terms];
        for j in 0..colloc.len() {
            let v = [
                self.colloc_t[j],
                self.colloc_x[j],
                nm.y_center + ys * o.value[j],
                ys * sx * o.d_x[j],
                ys * sx * sx * o.d_xx[j],
            ];
            let u_t = ys * st * o.d_t[j];
            for (k, p) in psi.iter_mut().enumerate() {
                *p = self.physics.eval(k, &v);
            }
            let r = (u_t - psi.iter().zip(zeta).map(|(p, z)| p * z).sum::<f64>()) / ys;
            physics_loss += r * r;
            if need_grad {
                // ∂(γ·mean r²)/∂(raw quantity), then chain to network channels.
                let w = cfg.gamma * 2.0 * r / (nc * ys);
                let (mut du, mut dux, mut duxx) = (0.0, 0.0, 0.0);
                for k in 0..n_terms {
                    zbar[k] -= w * psi[k];
                    if zeta[k] == 0.0 {
                        continue;
                    }
                    du -= zeta[k] * self.physics.partial(k, F_U, &v);
                    dux -= zeta[k] * self.physics.partial(k, F_UX, &v);
                    duxx -= zeta[k] * self.physics.partial(k, F_UXX, &v);
                }
                adj.value[j] = w * du * ys;
                adj.d_t[j] = w * ys * st;
                adj.d_x[j] = w * dux * ys * sx;
                adj.d_xx[j] = w * duxx * ys * sx * sx;
            }
        }
        physics_loss /= nc;
        let eps = cfg.l1_smoothing;
        let l1: f64 = zeta.iter().map(|z| (z * z + eps * eps).sqrt()).sum();
        let total =
            cfg.alpha * data_loss + cfg.increment_weight * increment_loss + cfg.gamma * physics_loss + cfg.delta * l1;

        if let Some(g) = grad {
            let (gb, gz) = g.split_at_mut(self.n_beta);
            let mut dadj = Outputs {
                value: res.iter().map(|r| cfg.alpha * 2.0 * r / nd).collect(),
                ..Default::default()
            };
            if use_inc {
                let w = cfg.increment_weight * 2.0 / self.increment_norm;
                for (k, e) in inc_res.iter().enumerate() {
                    dadj.value[k] -= w * e;
                }
                let nadj = Outputs { value: inc_res.iter().map(|e| w * e).collect(), ..Default::default() };
                self.mlp.backward(beta, ntape, &nadj, gb);
            }
            self.mlp.backward(beta, dtape, &dadj, gb);
            if use_physics {
                self.mlp.backward(beta, ctape, &adj, gb);
            }
            if cfg.train_zeta {
                for k in 0..n_terms {
                    gz[k] = zbar[k] + cfg.delta * zeta[k] / (zeta[k] * zeta[k] + eps * eps).sqrt();
                }
            }
        }
        Parts { data: data_loss, increment: increment_loss, physics: physics_loss, total }
    }

    /// Minimizes the ζ-dependent part of the loss for fixed weights by
    /// majorize-minimize on the smoothed absolute value; never increases it.
    fn update_zeta(&self, theta: &mut [f64]) {
        let (beta, zeta) = theta.split_at_mut(self.n_beta);
        let nm = &self.nm;
        let o = self.mlp.forward(beta, &self.colloc, Channels::Jet).out;
        let p = self.physics.len();
        let nc = self.colloc.len() as f64;
        let mut gram = nalgebra::DMatrix::<f64>::zeros(p, p);
        let mut rhs = nalgebra::DVector::<f64>::zeros(p);
        let w = self.cfg.gamma / (nc * nm.y_scale * nm.y_scale);
        let mut psi = vec![0.0; p];
        for j in 0..self.colloc.len() {
            let v = [
                self.colloc_t[j],
                self.colloc_x[j],
                nm.y_center + nm.y_scale * o.value[j],
                nm.y_scale * nm.x_scale * o.d_x[j],
                nm.y_scale * nm.x_scale * nm.x_scale * o.d_xx[j],
            ];
            let u_t = nm.y_scale * nm.t_scale * o.d_t[j];
            for (k, q) in psi.iter_mut().enumerate() {
                *q = self.physics.eval(k, &v);
            }
            for a in 0..p {
                rhs[a] += w * psi[a] * u_t;
                for b in 0..p {
                    gram[(a, b)] += w * psi[a] * psi[b];
                }
            }
        }
        let eps = self.cfg.l1_smoothing;
        for _ in 0..50 {
            let mut h = gram.clone();
            for k in 0..p {
                h[(k, k)] += 0.5 * self.cfg.delta / (zeta[k] * zeta[k] + eps * eps).sqrt();
            }
            let Some(ch) = h.cholesky() else { return };
            let next = ch.solve(&rhs);
            let step: f64 = next.iter().zip(zeta.iter()).map(|(a, b)| (a - b).abs()).sum();
            zeta.iter_mut().zip(next.iter()).for_each(|(z, n)| *z = *n);
            if step < 1e-14 {
                break;
            }
        }
    }
}

impl<'a> Loss<'a> {
    fn new(data: &PathPair, cfg: &'a FitConfig, physics: &'a Physics, mlp: Mlp, nm: Normalization, colloc_seed: u64) -> Self {
        let keep = thin(data.len(), cfg.max_data_points);
        let times = data.grid().times();
        let (x, y) = (data.stock(), data.option());
        let pts: Vec<(f64, f64)> = keep.iter().map(|&i| nm.input(times[i], x[i])).collect();
        let target: Vec<f64> = keep.iter().map(|&i| (y[i] - nm.y_center) / nm.y_scale).collect();
        // `keep` is increasing, so the points with a successor form a prefix.
        let with_next: Vec<usize> = keep.iter().copied().take_while(|&i| i + 1 < data.len()).collect();
        let next: Vec<(f64, f64)> = with_next.iter().map(|&i| nm.input(times[i + 1], x[i + 1])).collect();
        let increments: Vec<f64> = with_next.iter().map(|&i| (y[i + 1] - y[i]) / nm.y_scale).collect();
        let increment_norm = increments.iter().map(|d| d * d).sum::<f64>().max(f64::MIN_POSITIVE);
        let raw_colloc = sample_collocation(&Bounds::of(data), cfg.n_collocation, colloc_seed);
        let n_beta = mlp.n_params();
        Loss {
            mlp,
            nm,
            data: pts,
            target,
            next,
            increments,
            increment_norm,
            colloc: raw_colloc.iter().map(|&(t, x)| nm.input(t, x)).collect(),
            colloc_t: raw_colloc.iter().map(|p| p.0).collect(),
            colloc_x: raw_colloc.iter().map(|p| p.1).collect(),
            physics,
            cfg,
            n_beta,
            tapes: Default::default(),
        }
    }
}

fn thin(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    // Uniform stride over [0, n − 1], keeping both ends.
    (0..cap).map(|k| ((k as f64) * (n - 1) as f64 / (cap - 1) as f64).round() as usize).collect()
}

/// Fits a surface from a fresh initialization.
pub fn train_surface(data: &PathPair, cfg: &FitConfig) -> Result<Fit> {
    fit_from(data, cfg, None)
}

/// Fits a surface starting from a previous fit, keeping its function and ζ
/// and re-deriving the normalization from the new data.
pub fn train_surface_warm(data: &PathPair, cfg: &FitConfig, previous: &Fit) -> Result<Fit> {
    fit_from(data, cfg, Some(previous))
}

fn fit_from(data: &PathPair, cfg: &FitConfig, previous: Option<&Fit>) -> Result<Fit> {
    cfg.validate()?;
    if data.len() < cfg.min_window {
        return invalid(format!("window has {} points, need at least {}", data.len(), cfg.min_window));
    }
    let nm = Normalization::from_data(data);
    let mlp = Mlp::new(&cfg.architecture.hidden);
    let n_beta = mlp.n_params();
    let p = cfg.physics_library.len();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = match previous {
        Some(prev) if prev.model.architecture == cfg.architecture && prev.report.aux.zeta.len() == p => {
            let mut th = prev.model.renormalized(nm).params;
            th.extend_from_slice(&prev.report.aux.zeta);
            th
        }
        _ => {
            let mut th = mlp.init(&mut rng);
            th.extend(cfg.zeta_init.clone().unwrap_or_else(|| vec![0.0; p]));
            th
        }
    };
    let physics = Physics::new(&cfg.physics_library);
    let loss = Loss::new(data, cfg, &physics, mlp, nm, rng.random());
    let n_data = loss.data.len();
    let mut objective = |x: &[f64], g: &mut [f64]| loss.evaluate(x, Some(g)).total;

    let mut iterations = 0;
    let mut evaluations = 0;
    let mut physics_history = Vec::new();
    let mut total_history = Vec::new();
    if cfg.adam.steps > 0 {
        let r = adam(&mut objective, &theta, &cfg.adam);
        theta = r.x;
        evaluations += r.evaluations;
    }
    let record = |theta: &[f64], ph: &mut Vec<f64>, th: &mut Vec<f64>| {
        let parts = loss.evaluate(theta, None);
        ph.push(parts.physics);
        th.push(parts.total);
        parts
    };
    record(&theta, &mut physics_history, &mut total_history);
    let rounds = cfg.outer_rounds.max(1);
    let per_round = cfg.lbfgs.max_iter.div_ceil(rounds);
    let mut converged = false;
    for _ in 0..rounds {
        if cfg.train_zeta && cfg.gamma > 0.0 {
            loss.update_zeta(&mut theta);
        }
        let opts = LbfgsOptions { max_iter: per_round, ..cfg.lbfgs };
        let r = lbfgs(&mut objective, &theta, &opts);
        theta = r.x;
        iterations += r.iterations;
        evaluations += r.evaluations;
        record(&theta, &mut physics_history, &mut total_history);
        converged = r.converged;
        if converged {
            break;
        }
    }
    let parts = loss.evaluate(&theta, None);
    let zeta = theta.split_off(n_beta);
    let model = SurfaceModel { architecture: cfg.architecture.clone(), normalization: nm, params: theta };
    let report = FitReport {
        data_loss: parts.data,
        increment_loss: parts.increment,
        physics_loss: parts.physics,
        total_loss: parts.total,
        converged,
        iterations,
        evaluations,
        physics_history,
        total_history,
        n_data,
        n_collocation: cfg.n_collocation,
        aux: PhysicsAux { terms: cfg.physics_library.names(), zeta },
    };
    Ok(Fit { model, report })
}
