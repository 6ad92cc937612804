//! Diffusion estimation from realized quadratic variation and inversion of
//! the forward dynamics into Brownian increments.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bsde::render;
use crate::error::{invalid, Error, Result};
use crate::market::PathPair;
use crate::sparse::{build_library, Criterion, Factor, Features, LibrarySpec, Selection, SparseModel, Term};
use crate::stats;

/// Default divisor guard for σ̂ in the inversion.
pub const EPS_DIV: f64 = 1e-8;

/// Per-increment noisy volatility `|X_{i+1} − X_i| / √Δt_i`.
pub fn estimate_sigma_noisy(path: &PathPair) -> Result<Vec<f64>> {
    if path.len() < 3 {
        return invalid("sigma estimation needs at least two increments");
    }
    let x = path.stock();
    Ok(path
        .grid()
        .increments()
        .iter()
        .enumerate()
        .map(|(i, dt)| (x[i + 1] - x[i]).abs() / dt.sqrt())
        .collect())
}

/// What the σ regression fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaTarget {
    /// Squared increments over Δt against squared library terms; unbiased
    /// for the quadratic variation rate. σ̂(x) = √(Σ_j ν_j|ν_j|·φ_j(x)²).
    Variance,
    /// `|ΔX|/√Δt` against the library directly; biased low by √(2/π) for
    /// Gaussian increments. σ̂(x) = Σ_j ν_j·φ_j(x).
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SigmaFitConfig {
    pub library: LibrarySpec,
    pub target: SigmaTarget,
    pub selection: Selection,
    /// Centered moving average of the squared increments over this many
    /// increments; 1 uses each increment alone.
    pub qv_window: usize,
    /// Drift rate d removed from increments first, `ΔX − d·X·Δt`.
    pub drift: f64,
    /// Variance-rate coefficients below this are treated as zero.
    pub min_variance_rate: f64,
    /// Number of evenly spaced points on [min X, max X] where positivity is
    /// checked, besides the observed values.
    pub positivity_grid: usize,
}

impl Default for SigmaFitConfig {
    fn default() -> Self {
        Self {
            library: LibrarySpec::parse(&["1", "x", "x²", "√x"]).expect("static library"),
            target: SigmaTarget::Variance,
            selection: Selection::BestSubset { normalize: true, criterion: Criterion::Bic },
            qv_window: 1,
            drift: 0.0,
            min_variance_rate: 1e-12,
            positivity_grid: 1001,
        }
    }
}

/// σ̂(x) as a sparse combination ν over the library Φ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaModel {
    pub library: LibrarySpec,
    pub target: SigmaTarget,
    /// ν over the names of Φ, in units of σ.
    pub nu: SparseModel,
    /// Observed stock range the model was validated on.
    pub range: (f64, f64),
}

impl SigmaModel {
    /// A single-term model `σ̂(x) = coefficient·term(x)`.
    pub fn single(term: &str, coefficient: f64, range: (f64, f64)) -> Result<Self> {
        let library = LibrarySpec::parse(&[term])?;
        let nu = SparseModel::new(library.names(), vec![coefficient])?;
        Ok(Self { library, target: SigmaTarget::Variance, nu, range })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let phi = self
            .library
            .eval_point(|f| (f == "x").then_some(x))
            .expect("sigma library uses only x");
        let nu = &self.nu.coefficients;
        match self.target {
            SigmaTarget::Variance => {
                let v: f64 = nu.iter().zip(&phi).map(|(c, p)| c * c.abs() * p * p).sum();
                v.max(0.0).sqrt()
            }
            SigmaTarget::Literal => nu.iter().zip(&phi).map(|(c, p)| c * p).sum(),
        }
    }

    /// Variance rate σ̂(x)², signed so a negative rate is visible.
    fn variance_rate(&self, x: f64) -> f64 {
        match self.target {
            SigmaTarget::Variance => {
                let phi = self.library.eval_point(|f| (f == "x").then_some(x)).expect("x only");
                self.nu.coefficients.iter().zip(&phi).map(|(c, p)| c * c.abs() * p * p).sum()
            }
            SigmaTarget::Literal => {
                let s = self.eval(x);
                s * s.abs()
            }
        }
    }

    pub fn coefficient(&self, term: &str) -> Option<f64> {
        self.nu.coefficient(term)
    }

    /// `σ̂(x) = …`, or `σ̂(x)² = …` when the variance fit needs more than one
    /// term.
    pub fn equation(&self) -> String {
        let active = self.nu.active_set();
        let names = &self.nu.terms;
        let nu = &self.nu.coefficients;
        if self.target == SigmaTarget::Literal || (active.len() == 1 && nu[active[0]] > 0.0) {
            return format!("σ̂(x) = {}", render(names, nu));
        }
        let sq: Vec<String> = self.library.terms().iter().map(|t| squared(t).to_string()).collect();
        let rates: Vec<f64> = nu.iter().map(|c| c * c.abs()).collect();
        format!("σ̂(x)² = {}", render(&sq, &rates))
    }
}

fn squared(term: &Term) -> Term {
    Term::new(
        term.factors()
            .iter()
            .map(|f| Factor { feature: f.feature.clone(), power: 2.0 * f.power })
            .collect(),
    )
}

fn moving_average(v: &[f64], width: usize) -> Vec<f64> {
    if width <= 1 {
        return v.to_vec();
    }
    let half = width / 2;
    let mut prefix = vec![0.0; v.len() + 1];
    for (i, x) in v.iter().enumerate() {
        prefix[i + 1] = prefix[i] + x;
    }
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + width - half).min(v.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Sparse fit of σ̂(x), validated positive on the observed stock range.
pub fn fit_sigma(path: &PathPair, cfg: &SigmaFitConfig) -> Result<SigmaModel> {
    if cfg.library.is_empty() {
        return invalid("sigma library is empty");
    }
    if let Some(t) = cfg.library.terms().iter().find(|t| t.factors().iter().any(|f| f.feature != "x")) {
        return invalid(format!("sigma term `{t}` must depend on x only"));
    }
    let noisy = estimate_sigma_noisy(path)?;
    let x = path.stock();
    let dts = path.grid().increments();
    let n = dts.len();
    let xs = x[..n].to_vec();
    let features = Features::new().with("x", xs)?;
    let (library, target) = match cfg.target {
        SigmaTarget::Variance => {
            let sq = LibrarySpec::new(cfg.library.terms().iter().map(squared).collect())
                .map_err(|_| Error::InvalidParameter("sigma library terms collide when squared".into()))?;
            let lib = build_library(&sq, &features)?;
            let resid: Vec<f64> = (0..n)
                .map(|i| {
                    let d = x[i + 1] - x[i] - cfg.drift * x[i] * dts[i];
                    d * d / dts[i]
                })
                .collect();
            (lib, moving_average(&resid, cfg.qv_window))
        }
        SigmaTarget::Literal => (build_library(&cfg.library, &features)?, moving_average(&noisy, cfg.qv_window)),
    };
    let mut fit = cfg.selection.fit(&library, &target)?;
    let coefficients: Vec<f64> = match cfg.target {
        SigmaTarget::Variance => fit
            .coefficients
            .iter()
            .map(|&c| if c.abs() < cfg.min_variance_rate { 0.0 } else { c.signum() * c.abs().sqrt() })
            .collect(),
        SigmaTarget::Literal => fit
            .coefficients
            .iter()
            .map(|&c| if c.abs() * c.abs() < cfg.min_variance_rate { 0.0 } else { c })
            .collect(),
    };
    fit.terms = cfg.library.names();
    fit.coefficients = coefficients;
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let model = SigmaModel { library: cfg.library.clone(), target: cfg.target, nu: fit, range: (lo, hi) };
    if model.nu.is_empty() {
        return Err(Error::SigmaRejected("every coefficient is zero, so σ̂ ≡ 0".into()));
    }
    let m = cfg.positivity_grid.max(2);
    let grid = (0..m).map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64);
    for xv in grid.chain(x.iter().copied()) {
        let v = model.variance_rate(xv);
        if !(v > 0.0) {
            return Err(Error::SigmaRejected(format!("σ̂² = {v:e} at x = {xv}")));
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrownianDiagnostics {
    pub mean: f64,
    /// Sample variance of ΔB over the mean Δt.
    pub variance_ratio: f64,
    /// Kolmogorov–Smirnov distance of ΔB/√Δt from the standard normal.
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    pub n: usize,
}

/// Increments ΔB_i on [t_i, t_{i+1}].
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianIncrements {
    pub t: Vec<f64>,
    pub db: Vec<f64>,
    pub dt: Vec<f64>,
    pub diagnostics: BrownianDiagnostics,
}

impl BrownianIncrements {
    /// Builds increments and their diagnostics from raw series.
    pub fn new(t: Vec<f64>, db: Vec<f64>, dt: Vec<f64>) -> Result<Self> {
        if db.len() != dt.len() || t.len() != db.len() || db.is_empty() {
            return invalid("increment series must be nonempty and equally long");
        }
        if let Some(i) = db.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { term: "ΔB".into(), row: i });
        }
        let diagnostics = diagnose(&db, &dt);
        Ok(Self { t, db, dt, diagnostics })
    }

    pub fn len(&self) -> usize {
        self.db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.db.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,db,dt")?;
        for i in 0..self.len() {
            writeln!(w, "{:.16e},{:.16e},{:.16e}", self.t[i], self.db[i], self.dt[i])?;
        }
        Ok(())
    }

    pub fn diagnostics_json(&self) -> String {
        serde_json::to_string_pretty(&self.diagnostics).expect("diagnostics serialize")
    }
}

fn diagnose(db: &[f64], dt: &[f64]) -> BrownianDiagnostics {
    let n = db.len();
    let mean = stats::mean(db);
    let variance_ratio = if n > 1 { stats::variance(db) / stats::mean(dt) } else { f64::NAN };
    let z: Vec<f64> = db.iter().zip(dt).map(|(b, d)| b / d.sqrt()).collect();
    let ks = stats::ks_statistic(&z, stats::norm_cdf);
    BrownianDiagnostics { mean, variance_ratio, ks_statistic: ks, ks_p_value: stats::ks_p_value(ks, n), n }
}

/// Inverts `ΔX = r·X·Δt + σ̂(X)·ΔB` for ΔB with the divisor guard `eps_div`.
pub fn extract_brownian(path: &PathPair, r: f64, sigma: &SigmaModel, eps_div: f64) -> Result<BrownianIncrements> {
    extract_with(path, r, |x| sigma.eval(x), eps_div)
}

/// As [`extract_brownian`] with an arbitrary diffusion function.
pub fn extract_with(path: &PathPair, r: f64, sigma: impl Fn(f64) -> f64, eps_div: f64) -> Result<BrownianIncrements> {
    let x = path.stock();
    let dts = path.grid().increments();
    let mut db = Vec::with_capacity(dts.len());
    for (i, &dt) in dts.iter().enumerate() {
        let s = sigma(x[i]);
        if !(s >= eps_div) {
            return Err(Error::DivisorGuard { index: i, value: s });
        }
        db.push((x[i + 1] - x[i] - r * x[i] * dt) / s);
    }
    let t = path.times()[..dts.len()].to_vec();
    BrownianIncrements::new(t, db, dts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{make_dataset_with_increments, simulate_gbm, ModelParams, Measure, TimeGrid};

    fn gbm_path(n: usize, horizon: f64, seed: u64) -> PathPair {
        let p = ModelParams::default();
        let grid = TimeGrid::uniform(0.0, horizon, n).unwrap();
        let x = simulate_gbm(&p, &grid, Measure::Q, seed).unwrap();
        let y = vec![0.0; x.len()];
        PathPair::new(grid, x, y).unwrap()
    }

    #[test]
    fn constant_path_has_zero_noisy_sigma() {
        let grid = TimeGrid::uniform(0.0, 1.0, 10).unwrap();
        let p = PathPair::new(grid, vec![2.0; 11], vec![0.0; 11]).unwrap();
        assert!(estimate_sigma_noisy(&p).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn noisy_sigma_has_folded_normal_mean() {
        let p = gbm_path(100_000, 1.0, 11);
        let s = estimate_sigma_noisy(&p).unwrap();
        let ratio: Vec<f64> = s.iter().zip(p.stock()).map(|(a, x)| a / x).collect();
        let expected = 0.2 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((stats::mean(&ratio) / expected - 1.0).abs() < 0.01);
    }

    #[test]
    fn noisy_sigma_of_exponential_path_is_drift_bounded() {
        let r: f64 = 0.1;
        let grid = TimeGrid::uniform(0.0, 1.0, 10_000).unwrap();
        let x: Vec<f64> = grid.times().iter().map(|t| (r * t).exp()).collect();
        let dt = grid.dt(0);
        let p = PathPair::new(grid, x.clone(), vec![0.0; x.len()]).unwrap();
        for (s, xi) in estimate_sigma_noisy(&p).unwrap().iter().zip(&x) {
            assert!(*s <= r * xi * dt.sqrt() * (1.0 + 1e-3));
        }
    }

    #[test]
    fn recovers_gbm_diffusion() {
        let p = gbm_path(100_000, 0.8, 3);
        let m = fit_sigma(&p, &SigmaFitConfig::default()).unwrap();
        assert_eq!(m.nu.active_terms(), vec!["x"]);
        assert!((m.coefficient("x").unwrap() / 0.2 - 1.0).abs() < 0.02);
        assert!((m.eval(1.3) - 0.26).abs() < 0.26 * 0.02);
    }

    #[test]
    fn recovers_additive_noise() {
        let grid = TimeGrid::uniform(0.0, 1.0, 100_000).unwrap();
        let mut rng = crate::rng::seeded(5);
        let dt = grid.dt(0);
        let mut x = vec![2.0];
        for _ in 0..grid.n_steps() {
            let last = *x.last().unwrap();
            x.push(last + 0.2 * dt.sqrt() * crate::rng::normal(&mut rng));
        }
        let p = PathPair::new(grid, x.clone(), vec![0.0; x.len()]).unwrap();
        let m = fit_sigma(&p, &SigmaFitConfig::default()).unwrap();
        assert_eq!(m.nu.active_terms(), vec!["1"]);
        assert!((m.coefficient("1").unwrap() / 0.2 - 1.0).abs() < 0.02);
    }

    #[test]
    fn deterministic_path_is_rejected() {
        let r: f64 = 0.1;
        let grid = TimeGrid::uniform(0.0, 1.0, 1000).unwrap();
        let x: Vec<f64> = grid.times().iter().map(|t| (r * t).exp()).collect();
        let p = PathPair::new(grid, x.clone(), vec![0.0; x.len()]).unwrap();
        let cfg = SigmaFitConfig { drift: r, ..Default::default() };
        assert!(matches!(fit_sigma(&p, &cfg), Err(Error::SigmaRejected(_))));
    }

    #[test]
    fn literal_target_is_biased_by_folded_normal_mean() {
        let p = gbm_path(100_000, 0.8, 8);
        let cfg = SigmaFitConfig { target: SigmaTarget::Literal, ..Default::default() };
        let m = fit_sigma(&p, &cfg).unwrap();
        let at_one = m.eval(1.0);
        let expected = 0.2 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((at_one / expected - 1.0).abs() < 0.03, "{at_one}");
    }

    #[test]
    fn round_trip_with_true_sigma_recovers_increments() {
        let params = ModelParams::default();
        let (p, inc) = make_dataset_with_increments(&params, 10_000, 4).unwrap();
        let b = extract_with(&p, params.r, |x| params.sigma * x, EPS_DIV).unwrap();
        let rmse = stats::rmse(&b.db, &inc);
        // The exact scheme leaves ½σ(ΔB² − Δt), whose rms is σΔt/√2.
        let expected = params.sigma * p.grid().dt(0) / 2f64.sqrt();
        assert!((rmse / expected - 1.0).abs() < 0.1, "{rmse} vs {expected}");
    }

    #[test]
    fn unit_sigma_zero_rate_is_exact_inversion() {
        let grid = TimeGrid::uniform(0.0, 1.0, 5).unwrap();
        let inc = [0.1, -0.2, 0.05, 0.3, -0.1];
        let mut x = vec![1.0];
        for d in inc {
            x.push(x.last().unwrap() + d);
        }
        let p = PathPair::new(grid, x.clone(), vec![0.0; 6]).unwrap();
        let b = extract_with(&p, 0.0, |_| 1.0, EPS_DIV).unwrap();
        for (a, e) in b.db.iter().zip(inc) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn divisor_guard_names_index() {
        let grid = TimeGrid::uniform(0.0, 1.0, 3).unwrap();
        let p = PathPair::new(grid, vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4]).unwrap();
        let err = extract_with(&p, 0.0, |x| if x > 2.5 { 0.0 } else { 1.0 }, EPS_DIV).unwrap_err();
        assert!(matches!(err, Error::DivisorGuard { index: 2, .. }));
    }

    #[test]
    fn extraction_diagnostics_on_example_one() {
        let params = ModelParams::default();
        let (p, _) = make_dataset_with_increments(&params, 100_000, 9).unwrap();
        let m = fit_sigma(&p, &SigmaFitConfig { drift: params.r, ..Default::default() }).unwrap();
        let b = extract_brownian(&p, params.r, &m, EPS_DIV).unwrap();
        let d = &b.diagnostics;
        let dt = p.grid().dt(0);
        assert!(d.mean.abs() <= 3.0 * (dt / d.n as f64).sqrt());
        assert!((0.95..=1.05).contains(&d.variance_ratio));
        let mut csv = Vec::new();
        b.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("t,db,dt\n"));
    }

    #[test]
    fn sigma_model_json_round_trip() {
        let m = SigmaModel::single("x", 0.2, (0.5, 1.5)).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<SigmaModel>(&s).unwrap(), m);
        assert!((m.eval(2.0) - 0.4).abs() < 1e-15);
    }
}
