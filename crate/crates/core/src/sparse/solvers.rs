//! Sparsity-promoting least squares: sequentially thresholded least squares
//! (STLSQ), sparse relaxed regularized regression (SR3), a λ scan scored by a
//! BIC-style criterion and exhaustive best-subset selection for small libraries.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::library::LibraryMatrix;
use crate::error::{invalid, Error, Result};

/// Fit diagnostics attached to every [`SparseModel`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub rank_deficient: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relaxed: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_columns: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective: Vec<f64>,
}

/// Sparse coefficients aligned with named library terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseModel {
    pub terms: Vec<String>,
    pub coefficients: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl SparseModel {
    pub fn new(terms: Vec<String>, coefficients: Vec<f64>) -> Result<Self> {
        if terms.len() != coefficients.len() {
            return invalid("terms and coefficients differ in length");
        }
        Ok(Self {
            terms,
            coefficients,
            diagnostics: Diagnostics::default(),
        })
    }

    /// Indices of the nonzero coefficients.
    pub fn active_set(&self) -> Vec<usize> {
        self.coefficients
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn active_terms(&self) -> Vec<&str> {
        self.active_set().into_iter().map(|i| self.terms[i].as_str()).collect()
    }

    pub fn coefficient(&self, term: &str) -> Option<f64> {
        self.terms.iter().position(|t| t == term).map(|i| self.coefficients[i])
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.iter().all(|c| *c == 0.0)
    }

    /// Inner product with one row of library values.
    pub fn evaluate(&self, row: &[f64]) -> f64 {
        self.coefficients.iter().zip(row).map(|(c, v)| c * v).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.terms.len() != m.coefficients.len() {
            return invalid("terms and coefficients differ in length");
        }
        Ok(m)
    }
}

/// Column-normalized copy of a library matrix.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub matrix: DMatrix<f64>,
    /// 2-norms of the kept columns.
    pub norms: Vec<f64>,
    /// Indices (into the original matrix) of the kept columns.
    pub kept: Vec<usize>,
}

/// Scales each column to unit 2-norm. All-zero columns are dropped and
/// reported by their absence from `kept`.
pub fn normalize_columns(a: &DMatrix<f64>) -> Result<Normalized> {
    let mut kept = Vec::new();
    let mut norms = Vec::new();
    for j in 0..a.ncols() {
        let n = a.column(j).norm();
        if n > 0.0 {
            kept.push(j);
            norms.push(n);
        }
    }
    if kept.is_empty() {
        return invalid("cannot normalize an all-zero matrix");
    }
    let mut matrix = a.select_columns(&kept);
    for (mut col, n) in matrix.column_iter_mut().zip(&norms) {
        col /= *n;
    }
    Ok(Normalized { matrix, norms, kept })
}

/// Maps coefficients fitted on normalized columns back to raw units.
pub fn denormalize_coefficients(xi: &[f64], norms: &[f64]) -> Vec<f64> {
    xi.iter().zip(norms).map(|(c, n)| c / n).collect()
}

/// Minimum-norm least squares through the SVD. The flag is set when the
/// matrix is numerically rank deficient.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    if a.ncols() == 0 {
        return (DVector::zeros(0), false);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * f64::EPSILON * a.nrows().max(a.ncols()) as f64;
    let rank = svd.rank(eps);
    let x = svd.solve(b, eps).expect("u and v were computed");
    (x, rank < a.ncols())
}

fn residual_norm(a: &DMatrix<f64>, x: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a * x - b).norm()
}

/// Options for [`stlsq`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StlsqOptions {
    /// Coefficients with |ξ| strictly below this are zeroed.
    pub threshold: f64,
    pub max_iter: usize,
    /// Threshold applies to coefficients of unit-norm columns.
    pub normalize: bool,
}

impl Default for StlsqOptions {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            max_iter: 20,
            normalize: true,
        }
    }
}

/// Sequentially thresholded least squares.
pub fn stlsq(a: &LibraryMatrix, b: &[f64], opts: &StlsqOptions) -> Result<SparseModel> {
    check_system(a, b)?;
    if !(opts.threshold >= 0.0) {
        return invalid("threshold must be non-negative");
    }
    let bv = DVector::from_column_slice(b);
    let (work, norms, kept) = prepared(a, opts.normalize)?;
    let p = work.ncols();
    let mut active: Vec<usize> = (0..p).collect();
    let mut xi = vec![0.0; p];
    let mut rank_deficient = false;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter.max(1) {
        iterations += 1;
        let sub = work.select_columns(&active);
        let (sol, rd) = lstsq(&sub, &bv);
        rank_deficient |= rd;
        xi.iter_mut().for_each(|v| *v = 0.0);
        for (k, &j) in active.iter().enumerate() {
            xi[j] = sol[k];
        }
        let next: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&j| xi[j].abs() >= opts.threshold)
            .collect();
        if next.len() == active.len() {
            converged = true;
            break;
        }
        for &j in &active {
            if xi[j].abs() < opts.threshold {
                xi[j] = 0.0;
            }
        }
        active = next;
        if active.is_empty() {
            converged = true;
            break;
        }
    }
    let raw = expand(&denormalize_coefficients(&xi, &norms), &kept, a.n_cols());
    let res = residual_norm(&a.data, &DVector::from_column_slice(&raw), &bv);
    Ok(SparseModel {
        terms: a.names.clone(),
        coefficients: raw,
        diagnostics: Diagnostics {
            residual_norm: res,
            iterations,
            converged,
            rank_deficient,
            dropped_columns: dropped(a, &kept),
            ..Default::default()
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    L0,
    L1,
}

/// Options for [`sr3`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sr3Options {
    pub lambda: f64,
    /// Relaxation parameter κ of the coupling term (1/2κ)‖ξ − w‖².
    pub kappa: f64,
    pub regularizer: Regularizer,
    pub max_iter: usize,
    pub tol: f64,
    pub normalize: bool,
    /// Refit ordinary least squares on the final support.
    pub unbias: bool,
}

impl Default for Sr3Options {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            kappa: 1.0,
            regularizer: Regularizer::L0,
            max_iter: 10_000,
            tol: 1e-12,
            normalize: true,
            unbias: true,
        }
    }
}

/// Gram-form view of a least-squares problem, so SR3 iterations cost
/// O(p²) regardless of the number of rows.
struct Gram {
    g: DMatrix<f64>,
    c: DVector<f64>,
    bb: f64,
    /// Expansion point x₀ for residuals, with c − G·x₀ and ‖Ax₀ − b‖².
    anchor: Option<(DVector<f64>, DVector<f64>, f64)>,
}

impl Gram {
    fn new(a: &DMatrix<f64>, b: &DVector<f64>) -> Self {
        Self {
            g: a.tr_mul(a),
            c: a.tr_mul(b),
            bb: b.dot(b),
            anchor: None,
        }
    }

    /// Expands residuals around `x0`, which should be near the least-squares
    /// solution so that no large terms cancel.
    fn anchored(mut self, a: &DMatrix<f64>, b: &DVector<f64>, x0: &DVector<f64>) -> Self {
        let rss0 = (a * x0 - b).norm_squared();
        let slope = &self.c - &self.g * x0;
        self.anchor = Some((x0.clone(), slope, rss0));
        self
    }

    fn half_rss(&self, x: &DVector<f64>) -> f64 {
        match &self.anchor {
            // ‖A(x₀ + d) − b‖² = ‖Ax₀ − b‖² − 2dᵀ(c − Gx₀) + dᵀGd
            Some((x0, slope, rss0)) => {
                let d = x - x0;
                0.5 * (rss0 - 2.0 * slope.dot(&d) + (d.transpose() * &self.g * &d)[(0, 0)])
            }
            None => 0.5 * ((x.transpose() * &self.g * x)[(0, 0)] - 2.0 * self.c.dot(x) + self.bb),
        }
    }
}

struct Sr3Run {
    w: DVector<f64>,
    xi: DVector<f64>,
    iterations: usize,
    converged: bool,
    objective: Vec<f64>,
}

fn penalty(w: &DVector<f64>, reg: Regularizer) -> f64 {
    match reg {
        Regularizer::L0 => w.iter().filter(|v| **v != 0.0).count() as f64,
        Regularizer::L1 => w.iter().map(|v| v.abs()).sum(),
    }
}

fn prox(v: f64, lambda: f64, kappa: f64, reg: Regularizer) -> f64 {
    match reg {
        Regularizer::L0 => {
            // argmin_w λ·1[w≠0] + (1/2κ)(w − v)²; ties keep the coefficient.
            if v * v < 2.0 * lambda * kappa {
                0.0
            } else {
                v
            }
        }
        Regularizer::L1 => {
            let t = lambda * kappa;
            v.signum() * (v.abs() - t).max(0.0)
        }
    }
}

fn sr3_core(
    gram: &Gram,
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    init: DVector<f64>,
    lambda: f64,
    kappa: f64,
    reg: Regularizer,
    max_iter: usize,
    tol: f64,
) -> Sr3Run {
    let objective_of = |xi: &DVector<f64>, w: &DVector<f64>| {
        gram.half_rss(xi) + lambda * penalty(w, reg) + (xi - w).norm_squared() / (2.0 * kappa)
    };
    let mut w = init;
    let mut xi = w.clone();
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        xi = chol.solve(&(&gram.c + &w / kappa));
        let w_new = xi.map(|v| prox(v, lambda, kappa, reg));
        let step = (&w_new - &w).norm();
        w = w_new;
        objective.push(objective_of(&xi, &w));
        if step <= tol {
            converged = true;
            break;
        }
    }
    Sr3Run { w, xi, iterations, converged, objective }
}

/// Sparse relaxed regularized regression,
/// `min ½‖Aξ − b‖² + λR(w) + (1/2κ)‖ξ − w‖²`, by alternating an exact solve
/// for ξ with the proximal map of R for w. Starts from the least-squares
/// solution.
pub fn sr3(a: &LibraryMatrix, b: &[f64], opts: &Sr3Options) -> Result<SparseModel> {
    check_system(a, b)?;
    if !(opts.lambda >= 0.0) || !(opts.kappa > 0.0) {
        return invalid("sr3 needs lambda >= 0 and kappa > 0");
    }
    let bv = DVector::from_column_slice(b);
    let (work, norms, kept) = prepared(a, opts.normalize)?;
    let (ols, rank_deficient) = lstsq(&work, &bv);
    let gram = Gram::new(&work, &bv).anchored(&work, &bv, &ols);
    let chol = relaxed_cholesky(&gram, opts.kappa)?;
    let run = sr3_core(
        &gram,
        &chol,
        ols,
        opts.lambda,
        opts.kappa,
        opts.regularizer,
        opts.max_iter,
        opts.tol,
    );
    finish_sr3(a, &bv, &work, &norms, &kept, run, opts.unbias, rank_deficient, opts.lambda)
}

fn relaxed_cholesky(gram: &Gram, kappa: f64) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let p = gram.g.nrows();
    let h = &gram.g + DMatrix::identity(p, p) / kappa;
    h.cholesky()
        .ok_or_else(|| Error::InvalidParameter("relaxed normal matrix not positive definite".into()))
}

#[allow(clippy::too_many_arguments)]
fn finish_sr3(
    a: &LibraryMatrix,
    bv: &DVector<f64>,
    work: &DMatrix<f64>,
    norms: &[f64],
    kept: &[usize],
    run: Sr3Run,
    unbias: bool,
    mut rank_deficient: bool,
    lambda: f64,
) -> Result<SparseModel> {
    let mut w: Vec<f64> = run.w.iter().copied().collect();
    if unbias {
        let support: Vec<usize> = (0..w.len()).filter(|&j| w[j] != 0.0).collect();
        if !support.is_empty() {
            let (sol, rd) = lstsq(&work.select_columns(&support), bv);
            rank_deficient |= rd;
            for (k, &j) in support.iter().enumerate() {
                w[j] = sol[k];
            }
        }
    }
    let raw = expand(&denormalize_coefficients(&w, norms), kept, a.n_cols());
    let relaxed = expand(
        &denormalize_coefficients(run.xi.as_slice(), norms),
        kept,
        a.n_cols(),
    );
    let res = residual_norm(&a.data, &DVector::from_column_slice(&raw), bv);
    Ok(SparseModel {
        terms: a.names.clone(),
        coefficients: raw,
        diagnostics: Diagnostics {
            residual_norm: res,
            iterations: run.iterations,
            converged: run.converged,
            rank_deficient,
            relaxed: Some(relaxed),
            lambda: Some(lambda),
            dropped_columns: dropped(a, kept),
            objective: run.objective,
            ..Default::default()
        },
    })
}

/// Options for [`sr3_scan`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanOptions {
    pub kappa: f64,
    pub regularizer: Regularizer,
    /// Number of λ values on the geometric grid.
    pub n_lambda: usize,
    /// Smallest λ as a fraction of the largest.
    pub lambda_min_ratio: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub normalize: bool,
    pub unbias: bool,
    #[serde(default)]
    pub criterion: Criterion,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            regularizer: Regularizer::L0,
            n_lambda: 200,
            lambda_min_ratio: 1e-12,
            max_iter: 5_000,
            tol: 1e-12,
            normalize: true,
            unbias: true,
            criterion: Criterion::Bic,
        }
    }
}

/// Rule that picks one support among the candidates of a scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum Criterion {
    /// Lowest [`bic_score`].
    #[default]
    Bic,
    /// Fewest terms whose RSS is at most `1 + rss_tolerance` times the
    /// smallest candidate RSS; ties go to the lower RSS.
    Parsimony { rss_tolerance: f64 },
}

impl Criterion {
    pub fn validate(&self) -> Result<()> {
        match self {
            Criterion::Bic => Ok(()),
            Criterion::Parsimony { rss_tolerance } if *rss_tolerance >= 0.0 => Ok(()),
            Criterion::Parsimony { .. } => invalid("rss_tolerance must be non-negative"),
        }
    }

    /// Index into `candidates`, given as `(support size, rss, score)`.
    fn choose(&self, candidates: &[(usize, f64, f64)]) -> Option<usize> {
        let indexed = candidates.iter().enumerate();
        match *self {
            Criterion::Bic => indexed.min_by(|x, y| x.1 .2.total_cmp(&y.1 .2)).map(|(i, _)| i),
            Criterion::Parsimony { rss_tolerance } => {
                let floor = candidates.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
                let cap = floor * (1.0 + rss_tolerance);
                indexed
                    .filter(|(_, c)| c.1 <= cap)
                    .min_by(|x, y| x.1 .0.cmp(&y.1 .0).then(x.1 .1.total_cmp(&y.1 .1)))
                    .map(|(i, _)| i)
            }
        }
    }
}

/// One support visited by the λ scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub lambda: f64,
    pub support: Vec<String>,
    pub rss: f64,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct ScanResult {
    pub best: SparseModel,
    pub path: Vec<ScanPoint>,
}

/// BIC-style score `n·ln(RSS/n) + ln(n)·k`.
pub fn bic_score(rss: f64, n: usize, k: usize) -> f64 {
    let nf = n as f64;
    nf * (rss.max(f64::MIN_POSITIVE) / nf).ln() + nf.ln() * k as f64
}

/// Runs SR3 along a geometric λ grid from large to small, warm starting
/// each fit from the previous one. Every distinct support is refit by least
/// squares and the [`Criterion`] picks one. `path` lists the distinct
/// supports in visiting order.
pub fn sr3_scan(a: &LibraryMatrix, b: &[f64], opts: &ScanOptions) -> Result<ScanResult> {
    check_system(a, b)?;
    opts.criterion.validate()?;
    let bv = DVector::from_column_slice(b);
    let (work, norms, kept) = prepared(a, opts.normalize)?;
    let (ols, rank_deficient) = lstsq(&work, &bv);
    let gram = Gram::new(&work, &bv).anchored(&work, &bv, &ols);
    let chol = relaxed_cholesky(&gram, opts.kappa)?;
    let n = a.n_rows();
    let p = work.ncols();

    // λ above which the ridge-like first ξ update is zeroed entirely.
    let first = chol.solve(&gram.c);
    let vmax = first.amax().max(ols.amax());
    let lambda_max = match opts.regularizer {
        Regularizer::L0 => vmax * vmax / (2.0 * opts.kappa) * 4.0,
        Regularizer::L1 => vmax / opts.kappa * 2.0,
    };
    let n_lambda = opts.n_lambda.max(2);
    let ratio = opts.lambda_min_ratio.clamp(1e-300, 1.0);

    let mut seen: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut candidates: Vec<(usize, f64, f64)> = Vec::new();
    let mut runs: Vec<(f64, Sr3Run)> = Vec::new();
    let mut path = Vec::new();
    let mut w = DVector::zeros(p);
    for k in 0..n_lambda {
        let lambda = lambda_max * ratio.powf(k as f64 / (n_lambda - 1) as f64);
        let run = sr3_core(
            &gram,
            &chol,
            w.clone(),
            lambda,
            opts.kappa,
            opts.regularizer,
            opts.max_iter,
            opts.tol,
        );
        w = run.w.clone();
        let support: Vec<usize> = (0..p).filter(|&j| run.w[j] != 0.0).collect();
        if support.is_empty() || seen.contains_key(&support) {
            continue;
        }
        let sub = work.select_columns(&support);
        let (sol, _) = lstsq(&sub, &bv);
        let rss = (&sub * &sol - &bv).norm_squared();
        let score = bic_score(rss, n, support.len());
        seen.insert(support.clone(), candidates.len());
        candidates.push((support.len(), rss, score));
        runs.push((lambda, run));
        path.push(ScanPoint {
            lambda,
            support: support.iter().map(|&j| a.names[kept[j]].clone()).collect(),
            rss,
            score,
        });
    }
    let pick = opts.criterion.choose(&candidates).ok_or_else(|| {
        Error::DegenerateDiscovery("every λ on the scan produced an empty support".into())
    })?;
    let score = candidates[pick].2;
    let (lambda, run) = runs.swap_remove(pick);
    let mut model = finish_sr3(a, &bv, &work, &norms, &kept, run, opts.unbias, rank_deficient, lambda)?;
    model.diagnostics.score = Some(score);
    Ok(ScanResult { best: model, path })
}

/// Largest library for which [`best_subset`] enumerates every support.
pub const MAX_EXHAUSTIVE_TERMS: usize = 16;

/// Fits every nonempty support of the library, keeps the lowest-RSS support
/// of each size and lets the [`Criterion`] pick among those. Each support
/// costs one small Cholesky solve on the Gram matrix, so the row count only
/// enters once. `path` holds the best support of each size.
pub fn best_subset(
    a: &LibraryMatrix,
    b: &[f64],
    normalize: bool,
    criterion: Criterion,
) -> Result<ScanResult> {
    check_system(a, b)?;
    criterion.validate()?;
    let bv = DVector::from_column_slice(b);
    let (work, norms, kept) = prepared(a, normalize)?;
    let p = work.ncols();
    if p > MAX_EXHAUSTIVE_TERMS {
        return invalid(format!(
            "best-subset search supports at most {MAX_EXHAUSTIVE_TERMS} terms, got {p}"
        ));
    }
    let gram = Gram::new(&work, &bv);
    let n = a.n_rows();
    // Gram-form RSS loses about eps·‖b‖² to cancellation; exact fits tie here.
    let floor = gram.bb * f64::EPSILON * (p as f64 + 1.0);
    let mut by_size: Vec<Option<(f64, usize)>> = vec![None; p + 1];
    let mut skipped = false;
    for mask in 1usize..(1 << p) {
        let idx: Vec<usize> = (0..p).filter(|j| mask >> j & 1 == 1).collect();
        let k = idx.len();
        let g = DMatrix::from_fn(k, k, |i, j| gram.g[(idx[i], idx[j])]);
        let c = DVector::from_fn(k, |i, _| gram.c[idx[i]]);
        let Some(chol) = g.cholesky() else {
            skipped = true;
            continue;
        };
        let w = chol.solve(&c);
        let rss = (gram.bb - w.dot(&c)).max(floor);
        if by_size[k].map_or(true, |(r, _)| rss < r) {
            by_size[k] = Some((rss, mask));
        }
    }
    let path: Vec<ScanPoint> = by_size
        .iter()
        .flatten()
        .map(|&(rss, mask)| {
            let support: Vec<String> = (0..p)
                .filter(|j| mask >> j & 1 == 1)
                .map(|j| a.names[kept[j]].clone())
                .collect();
            let score = bic_score(rss, n, support.len());
            ScanPoint { lambda: 0.0, support, rss, score }
        })
        .collect();
    let candidates: Vec<(usize, f64, f64)> =
        path.iter().map(|pt| (pt.support.len(), pt.rss, pt.score)).collect();
    let pick = criterion
        .choose(&candidates)
        .ok_or_else(|| Error::DegenerateDiscovery("no support has a solvable Gram block".into()))?;
    let score = path[pick].score;
    let mask = by_size.iter().flatten().nth(pick).map(|&(_, m)| m).unwrap_or(0);
    let support: Vec<usize> = (0..p).filter(|j| mask >> j & 1 == 1).collect();
    let (sol, rank_deficient) = lstsq(&work.select_columns(&support), &bv);
    let mut w = vec![0.0; p];
    for (k, &j) in support.iter().enumerate() {
        w[j] = sol[k];
    }
    let raw = expand(&denormalize_coefficients(&w, &norms), &kept, a.n_cols());
    let res = residual_norm(&a.data, &DVector::from_column_slice(&raw), &bv);
    let best = SparseModel {
        terms: a.names.clone(),
        coefficients: raw,
        diagnostics: Diagnostics {
            residual_norm: res,
            iterations: (1 << p) - 1,
            converged: true,
            rank_deficient: rank_deficient || skipped,
            score: Some(score),
            dropped_columns: dropped(a, &kept),
            ..Default::default()
        },
    };
    Ok(ScanResult { best, path })
}

/// How a sparse support is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum Selection {
    Stlsq(StlsqOptions),
    Sr3(Sr3Options),
    Sr3Scan(ScanOptions),
    BestSubset {
        normalize: bool,
        #[serde(default)]
        criterion: Criterion,
    },
}

impl Selection {
    pub fn fit(&self, a: &LibraryMatrix, b: &[f64]) -> Result<SparseModel> {
        match self {
            Selection::Stlsq(o) => stlsq(a, b, o),
            Selection::Sr3(o) => sr3(a, b, o),
            Selection::Sr3Scan(o) => sr3_scan(a, b, o).map(|r| r.best),
            Selection::BestSubset { normalize, criterion } => {
                best_subset(a, b, *normalize, *criterion).map(|r| r.best)
            }
        }
    }
}

fn check_system(a: &LibraryMatrix, b: &[f64]) -> Result<()> {
    if a.n_rows() == 0 {
        return invalid("regression needs at least one row");
    }
    if a.n_rows() != b.len() {
        return invalid(format!("{} rows but {} targets", a.n_rows(), b.len()));
    }
    if let Some(i) = b.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { term: "target".into(), row: i });
    }
    Ok(())
}

fn prepared(a: &LibraryMatrix, normalize: bool) -> Result<(DMatrix<f64>, Vec<f64>, Vec<usize>)> {
    if normalize {
        let nz = normalize_columns(&a.data)?;
        Ok((nz.matrix, nz.norms, nz.kept))
    } else {
        Ok((a.data.clone(), vec![1.0; a.n_cols()], (0..a.n_cols()).collect()))
    }
}

fn expand(values: &[f64], kept: &[usize], p: usize) -> Vec<f64> {
    let mut out = vec![0.0; p];
    for (v, &j) in values.iter().zip(kept) {
        out[j] = *v;
    }
    out
}

fn dropped(a: &LibraryMatrix, kept: &[usize]) -> Vec<String> {
    (0..a.n_cols())
        .filter(|j| !kept.contains(j))
        .map(|j| a.names[j].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lib(a: DMatrix<f64>) -> LibraryMatrix {
        let names = (0..a.ncols()).map(|j| format!("c{j}")).collect();
        LibraryMatrix::new(a, names).unwrap()
    }

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, _| crate::rng::normal(rng))
    }

    fn condition(a: &DMatrix<f64>) -> f64 {
        let s = a.clone().singular_values();
        s.max() / s.min()
    }

    fn planted(seed: u64) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 4 + (seed % 5) as usize;
        let n = 10 * p;
        let a = loop {
            let a = gaussian(&mut rng, n, p);
            if condition(&a) < 100.0 {
                break a;
            }
        };
        let k = 1 + rng.random_range(0..p - 1);
        let mut xi = vec![0.0; p];
        let mut order: Vec<usize> = (0..p).collect();
        for i in 0..k {
            let j = rng.random_range(i..p);
            order.swap(i, j);
            let mag = rng.random_range(1.0..5.0);
            xi[order[i]] = if rng.random::<bool>() { mag } else { -mag };
        }
        let b = (&a * DVector::from_column_slice(&xi)).iter().copied().collect();
        (a, xi, b)
    }

    fn support(xi: &[f64]) -> Vec<usize> {
        (0..xi.len()).filter(|&j| xi[j] != 0.0).collect()
    }

    fn ols(a: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
        lstsq(a, &DVector::from_column_slice(b)).0.iter().copied().collect()
    }

    fn stlsq_example() -> (LibraryMatrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = gaussian(&mut rng, 60, 4);
        let b = (&a * DVector::from_column_slice(&[0.0, 2.0, 0.0, -1.0])).iter().copied().collect();
        (lib(a), b)
    }

    #[test]
    fn stlsq_recovers_planted_example() {
        let (a, b) = stlsq_example();
        let opts = StlsqOptions { threshold: 0.5, normalize: false, ..Default::default() };
        let m = stlsq(&a, &b, &opts).unwrap();
        assert_eq!(m.active_set(), vec![1, 3]);
        assert!((m.coefficients[1] - 2.0).abs() < 1e-8);
        assert!((m.coefficients[3] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn stlsq_zero_threshold_is_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian(&mut rng, 30, 5);
        let b: Vec<f64> = (0..30).map(|_| crate::rng::normal(&mut rng)).collect();
        let m = stlsq(&lib(a.clone()), &b, &StlsqOptions { threshold: 0.0, ..Default::default() }).unwrap();
        for (x, y) in m.coefficients.iter().zip(ols(&a, &b)) {
            assert_relative_eq!(*x, y, max_relative = 1e-10);
        }
    }

    #[test]
    fn zero_target_gives_zero_model() {
        let (a, _) = stlsq_example();
        let b = vec![0.0; a.n_rows()];
        assert!(stlsq(&a, &b, &StlsqOptions::default()).unwrap().is_empty());
        assert!(sr3(&a, &b, &Sr3Options::default()).unwrap().is_empty());
    }

    #[test]
    fn stlsq_rank_deficient_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = gaussian(&mut rng, 20, 3);
        let c0 = a.column(0).clone_owned();
        a.set_column(2, &c0);
        let b: Vec<f64> = a.column(0).iter().copied().collect();
        let m = stlsq(&lib(a), &b, &StlsqOptions { threshold: 0.0, ..Default::default() }).unwrap();
        assert!(m.diagnostics.rank_deficient);
    }

    #[test]
    fn sr3_lambda_zero_is_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = gaussian(&mut rng, 40, 4);
        let b: Vec<f64> = (0..40).map(|_| crate::rng::normal(&mut rng)).collect();
        let opts = Sr3Options { lambda: 0.0, unbias: false, normalize: false, ..Default::default() };
        let m = sr3(&lib(a.clone()), &b, &opts).unwrap();
        let relaxed = m.diagnostics.relaxed.clone().unwrap();
        for ((w, x), y) in m.coefficients.iter().zip(&relaxed).zip(ols(&a, &b)) {
            assert_relative_eq!(*w, y, max_relative = 1e-10);
            assert_relative_eq!(*x, y, max_relative = 1e-10);
        }
    }

    #[test]
    fn sr3_recovers_planted_example() {
        let (a, b) = stlsq_example();
        let opts = Sr3Options { lambda: 0.125, normalize: false, ..Default::default() };
        let m = sr3(&a, &b, &opts).unwrap();
        assert_eq!(m.active_set(), vec![1, 3]);
        assert!((m.coefficients[1] - 2.0).abs() < 1e-8);
        assert!(m.diagnostics.converged);
    }

    #[test]
    fn normalize_identity_is_unchanged() {
        let a = DMatrix::<f64>::identity(4, 4);
        let nz = normalize_columns(&a).unwrap();
        assert_eq!(nz.matrix, a);
        assert_eq!(nz.norms, vec![1.0; 4]);
    }

    #[test]
    fn normalize_drops_zero_columns_and_rejects_all_zero() {
        let mut a = DMatrix::<f64>::identity(3, 3);
        a[(1, 1)] = 0.0;
        let nz = normalize_columns(&a).unwrap();
        assert_eq!(nz.kept, vec![0, 2]);
        assert!(normalize_columns(&DMatrix::zeros(3, 2)).is_err());
        let m = stlsq(&lib(a), &[1.0, 0.0, 1.0], &StlsqOptions::default()).unwrap();
        assert_eq!(m.diagnostics.dropped_columns, vec!["c1".to_string()]);
    }

    #[test]
    fn normalized_solve_round_trips_and_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = gaussian(&mut rng, 30, 3);
        let b: Vec<f64> = (0..30).map(|_| crate::rng::normal(&mut rng)).collect();
        let nz = normalize_columns(&a).unwrap();
        let back = denormalize_coefficients(&ols(&nz.matrix, &b), &nz.norms);
        let direct = ols(&a, &b);
        for (x, y) in back.iter().zip(&direct) {
            assert!((x - y).abs() < 1e-10);
        }
        let mut scaled = a.clone();
        scaled.column_mut(1).scale_mut(10.0);
        let s = ols(&scaled, &b);
        assert_relative_eq!(s[1], direct[1] / 10.0, max_relative = 1e-10);
    }

    #[test]
    fn planted_support_recovery_rate() {
        let (mut st_ok, mut sr_ok) = (0, 0);
        for seed in 0..100 {
            let (a, xi, b) = planted(seed);
            let a = lib(a);
            let st = stlsq(&a, &b, &StlsqOptions { threshold: 0.1, normalize: false, ..Default::default() }).unwrap();
            let sr = sr3(&a, &b, &Sr3Options { lambda: 0.005, normalize: false, ..Default::default() }).unwrap();
            st_ok += (support(&st.coefficients) == support(&xi)) as usize;
            sr_ok += (support(&sr.coefficients) == support(&xi)) as usize;
        }
        assert!(st_ok >= 99, "stlsq {st_ok}/100");
        assert!(sr_ok >= 99, "sr3 {sr_ok}/100");
    }

    #[test]
    fn noise_robustness_at_40db() {
        let mut ok = 0;
        for seed in 0..100 {
            let (a, xi, mut b) = planted(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let power = b.iter().map(|v| v * v).sum::<f64>() / b.len() as f64;
            let sd = (power / 1e4).sqrt();
            b.iter_mut().for_each(|v| *v += sd * crate::rng::normal(&mut rng));
            let m = stlsq(&lib(a), &b, &StlsqOptions { threshold: 0.1, normalize: false, ..Default::default() }).unwrap();
            let good = support(&m.coefficients) == support(&xi)
                && support(&xi).iter().all(|&j| ((m.coefficients[j] - xi[j]) / xi[j]).abs() < 0.05);
            ok += good as usize;
        }
        assert!(ok >= 95, "{ok}/100");
    }

    #[test]
    fn best_subset_recovers_planted_with_noise() {
        let mut ok = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let a = gaussian(&mut rng, 2000, 6);
            let xi = [0.0, 1.5, 0.0, 0.0, -0.7, 0.0];
            let mut b: Vec<f64> = (&a * DVector::from_column_slice(&xi)).iter().copied().collect();
            b.iter_mut().for_each(|v| *v += 0.1 * crate::rng::normal(&mut rng));
            let r = best_subset(&lib(a), &b, true, Criterion::Bic).unwrap();
            ok += (support(&r.best.coefficients) == support(&xi)) as usize;
            assert!(r.path.windows(2).all(|w| w[0].support.len() < w[1].support.len()));
        }
        assert!(ok >= 19, "{ok}/20");
    }

    #[test]
    fn scan_and_selection_agree_on_clean_problem() {
        let (a, b) = stlsq_example();
        let scan = sr3_scan(&a, &b, &ScanOptions::default()).unwrap();
        assert_eq!(scan.best.active_set(), vec![1, 3]);
        let sel: Selection = serde_json::from_str(r#"{"method":"best_subset","normalize":true}"#).unwrap();
        assert_eq!(sel.fit(&a, &b).unwrap().active_set(), vec![1, 3]);
        assert!(serde_json::from_str::<Selection>(r#"{"method":"best_subset","normalise":true}"#).is_err());
    }

    #[test]
    fn parsimony_drops_terms_below_the_residual_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a = gaussian(&mut rng, 2000, 6);
        let xi = [0.02, 1.5, 0.0, 0.0, -0.7, 0.0];
        let mut b: Vec<f64> = (&a * DVector::from_column_slice(&xi)).iter().copied().collect();
        b.iter_mut().for_each(|v| *v += 0.1 * crate::rng::normal(&mut rng));
        let bic = best_subset(&lib(a.clone()), &b, true, Criterion::Bic).unwrap();
        assert_eq!(bic.best.active_set(), vec![0, 1, 4]);
        let lean = Criterion::Parsimony { rss_tolerance: 0.15 };
        let r = best_subset(&lib(a.clone()), &b, true, lean).unwrap();
        assert_eq!(r.best.active_set(), vec![1, 4]);
        let scan = sr3_scan(&lib(a), &b, &ScanOptions { criterion: lean, ..Default::default() }).unwrap();
        assert_eq!(scan.best.active_set(), vec![1, 4]);
    }

    #[test]
    fn parsimony_with_zero_tolerance_keeps_the_lowest_rss() {
        let c = [(1, 4.0, 0.0), (2, 2.0, -1.0), (3, 2.0, 5.0)];
        assert_eq!(Criterion::Parsimony { rss_tolerance: 0.0 }.choose(&c), Some(1));
        assert_eq!(Criterion::Parsimony { rss_tolerance: 1.0 }.choose(&c), Some(0));
        assert_eq!(Criterion::Bic.choose(&c), Some(1));
        assert_eq!(Criterion::Bic.choose(&[]), None);
        assert!(Criterion::Parsimony { rss_tolerance: -0.1 }.validate().is_err());
        let json = r#"{"method":"best_subset","normalize":true,"criterion":{"rule":"parsimony","rss_tolerance":0.15}}"#;
        let sel: Selection = serde_json::from_str(json).unwrap();
        assert_eq!(serde_json::to_string(&sel).unwrap(), json);
    }

    #[test]
    fn best_subset_rejects_large_libraries() {
        let a = DMatrix::<f64>::identity(20, MAX_EXHAUSTIVE_TERMS + 1);
        assert!(best_subset(&lib(a), &[1.0; 20], false, Criterion::Bic).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let (a, b) = stlsq_example();
        let m = sr3(&a, &b, &Sr3Options::default()).unwrap();
        assert_eq!(SparseModel::from_json(&m.to_json()).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sr3_objective_never_increases(seed in 0u64..10_000, lam in 1e-4f64..1.0, kappa in 0.01f64..10.0, l1 in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian(&mut rng, 30, 6);
            let b: Vec<f64> = (0..30).map(|_| crate::rng::normal(&mut rng)).collect();
            let opts = Sr3Options {
                lambda: lam,
                kappa,
                regularizer: if l1 { Regularizer::L1 } else { Regularizer::L0 },
                max_iter: 500,
                ..Default::default()
            };
            let m = sr3(&lib(a), &b, &opts).unwrap();
            for w in m.diagnostics.objective.windows(2) {
                prop_assert!(w[1] <= w[0] + 8.0 * f64::EPSILON * w[0].abs(), "{} -> {}", w[0], w[1]);
            }
        }

        #[test]
        fn normalization_preserves_argmin(seed in 0u64..10_000, scales in proptest::collection::vec(0.01f64..100.0, 5)) {
            let (a, _, b) = planted(seed);
            let p = a.ncols();
            let mut raw = a.clone();
            for j in 0..p {
                raw.column_mut(j).scale_mut(scales[j % scales.len()]);
            }
            let nz = normalize_columns(&raw).unwrap();
            let with = stlsq(&lib(raw), &b, &StlsqOptions { threshold: 0.3, normalize: true, ..Default::default() }).unwrap();
            let pre = stlsq(&lib(nz.matrix.clone()), &b, &StlsqOptions { threshold: 0.3, normalize: false, ..Default::default() }).unwrap();
            prop_assert_eq!(with.active_set(), pre.active_set());
            for j in with.active_set() {
                prop_assert!((with.coefficients[j] * nz.norms[j] - pre.coefficients[j]).abs() <= 1e-9 * pre.coefficients[j].abs().max(1.0));
            }
        }
    }
}
