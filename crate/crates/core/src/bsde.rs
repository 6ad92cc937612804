//! Identification of the discrete BSDE `ΔY = Θ^f ξ^f·Δt + Θ^Z ξ^Z·ΔB` by one
//! stacked sparse regression over a driver and a diffusion library.
//!
//! Driver coefficients are stored with the sign they carry in ΔY, so the
//! Black–Scholes law reads `dY = [u_t + r·x·u_x + ½σ²·x²·u_xx]dt + σ·x·u_x dB`.
//!
//! Under [`DriverClock::QuadraticVariation`] the driver terms that contain
//! `u_xx` are multiplied by the realized `ΔB²` instead of `Δt`. Both have the
//! same conditional mean, but the realized clock absorbs the second-order Itô
//! fluctuation `½σ²x²u_xx(ΔB² − Δt)`, which on a single path is as large as
//! the whole drift.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::{BrownianIncrements, SigmaModel};
use crate::error::{invalid, Error, Result};
use crate::market::{bs_greeks, Greeks, ModelParams, PathPair};
use crate::sparse::{build_library, lstsq, Criterion, Features, LibraryMatrix, LibrarySpec, Selection, SparseModel};
use crate::surface::SurfaceModel;

pub const SCHEMA_VERSION: u32 = 1;

/// Features available to driver terms.
pub const DRIVER_FEATURES: [&str; 8] = ["t", "x", "y", "u", "u_t", "u_x", "u_xx", "1"];

/// Anything that answers derivative queries at (t, x).
pub trait GreekSource {
    fn greeks(&self, points: &[(f64, f64)]) -> Result<Vec<Greeks>>;
}

impl GreekSource for SurfaceModel {
    fn greeks(&self, points: &[(f64, f64)]) -> Result<Vec<Greeks>> {
        Ok(self.eval_derivatives(points))
    }
}

/// Closed-form Black–Scholes derivatives.
#[derive(Debug, Clone, Copy)]
pub struct AnalyticGreeks(pub ModelParams);

impl GreekSource for AnalyticGreeks {
    fn greeks(&self, points: &[(f64, f64)]) -> Result<Vec<Greeks>> {
        points.iter().map(|&(t, x)| bs_greeks(t, x, &self.0)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverClock {
    /// Every driver column is scaled by Δt.
    Time,
    /// Columns whose term contains `u_xx` are scaled by ΔB².
    QuadraticVariation,
}

/// Which of the two on-path value columns the driver library may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueColumns {
    Both,
    /// Drop terms using `u`.
    ObservedOnly,
    /// Drop terms using `y`.
    SurfaceOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BsdeLibraryConfig {
    pub driver: LibrarySpec,
    pub diffusion: LibrarySpec,
    pub selection: Selection,
    pub clock: DriverClock,
    pub value_columns: ValueColumns,
    /// Rows beyond this are thinned by a uniform stride.
    pub max_rows: usize,
    /// After selection, a term whose contribution `|ξ_j|·‖θ_j‖` is below this
    /// fraction of the largest one in its block is dropped and the rest refit.
    pub min_share: f64,
}

impl Default for BsdeLibraryConfig {
    fn default() -> Self {
        Self {
            driver: LibrarySpec::parse(&["1", "x", "y", "u", "u_t", "u_x", "u_xx", "x·u_x", "x²·u_xx"])
                .expect("static library"),
            diffusion: LibrarySpec::parse(&["1", "x", "u_x", "x·u_x"]).expect("static library"),
            selection: Selection::BestSubset {
                normalize: true,
                criterion: Criterion::Parsimony { rss_tolerance: 0.15 },
            },
            clock: DriverClock::QuadraticVariation,
            value_columns: ValueColumns::Both,
            max_rows: 100_000,
            min_share: 0.05,
        }
    }
}

impl BsdeLibraryConfig {
    pub fn with_selection(mut self, selection: Selection) -> Self {
        self.selection = selection;
        self
    }

    fn effective_driver(&self) -> Result<LibrarySpec> {
        let drop = match self.value_columns {
            ValueColumns::Both => None,
            ValueColumns::ObservedOnly => Some("u"),
            ValueColumns::SurfaceOnly => Some("y"),
        };
        let terms = self
            .driver
            .terms()
            .iter()
            .filter(|t| drop.is_none_or(|d| !t.uses(d)))
            .cloned()
            .collect();
        LibrarySpec::new(terms)
    }

    pub fn validate(&self) -> Result<()> {
        if self.driver.is_empty() || self.diffusion.is_empty() {
            return invalid("driver and diffusion libraries must be nonempty");
        }
        for t in self.driver.terms().iter().chain(self.diffusion.terms()) {
            if let Some(f) = t.factors().iter().find(|f| !DRIVER_FEATURES.contains(&f.feature.as_str())) {
                return invalid(format!("term `{t}` uses unknown feature `{}`", f.feature));
            }
        }
        if self.max_rows < 2 {
            return invalid("max_rows must be at least 2");
        }
        if !(0.0..1.0).contains(&self.min_share) {
            return invalid("min_share must lie in [0, 1)");
        }
        Ok(())
    }

    fn on_qv_clock(&self, term_uses_uxx: bool) -> bool {
        self.clock == DriverClock::QuadraticVariation && term_uses_uxx
    }
}

/// Regression target and stacked design `[Θ^f·clock | Θ^Z·ΔB]`.
#[derive(Debug, Clone)]
pub struct Regressors {
    pub target: Vec<f64>,
    pub design: LibraryMatrix,
    pub n_driver: usize,
    /// Increment indices used as rows.
    pub rows: Vec<usize>,
    /// Largest absolute entry of each design column.
    pub column_scales: Vec<f64>,
}

fn thin(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|k| ((k as f64) * (n - 1) as f64 / (cap - 1) as f64).round() as usize).collect()
}

fn features_at(path: &PathPair, rows: &[usize], g: &[Greeks]) -> Result<Features> {
    let t = path.times();
    let x = path.stock();
    let y = path.option();
    let col = |f: &dyn Fn(usize, &Greeks) -> f64| rows.iter().zip(g).map(|(&i, gi)| f(i, gi)).collect::<Vec<_>>();
    Features::new()
        .with("t", col(&|i, _| t[i]))?
        .with("x", col(&|i, _| x[i]))?
        .with("y", col(&|i, _| y[i]))?
        .with("u", col(&|_, g| g.u))?
        .with("u_t", col(&|_, g| g.u_t))?
        .with("u_x", col(&|_, g| g.u_x))?
        .with("u_xx", col(&|_, g| g.u_xx))
}

/// Assembles the stacked regression on the increments of `path`.
pub fn build_bsde_regressors(
    path: &PathPair,
    greeks: &dyn GreekSource,
    db: &BrownianIncrements,
    cfg: &BsdeLibraryConfig,
) -> Result<Regressors> {
    cfg.validate()?;
    let n = path.len() - 1;
    if db.len() != n {
        return invalid(format!("{} Brownian increments for {} path increments", db.len(), n));
    }
    let rows = thin(n, cfg.max_rows);
    let t = path.times();
    let x = path.stock();
    let pts: Vec<(f64, f64)> = rows.iter().map(|&i| (t[i], x[i])).collect();
    let g = greeks.greeks(&pts)?;
    for (k, gi) in g.iter().enumerate() {
        for (name, v) in [("u", gi.u), ("u_t", gi.u_t), ("u_x", gi.u_x), ("u_xx", gi.u_xx)] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: format!("{name} at (t = {}, x = {})", pts[k].0, pts[k].1),
                    row: rows[k],
                });
            }
        }
    }
    let features = features_at(path, &rows, &g)?;
    let driver = cfg.effective_driver()?;
    let mut theta_f = build_library(&driver, &features)?;
    for (j, term) in driver.terms().iter().enumerate() {
        let qv = cfg.on_qv_clock(term.uses("u_xx"));
        for (k, &i) in rows.iter().enumerate() {
            theta_f.data[(k, j)] *= if qv { db.db[i] * db.db[i] } else { db.dt[i] };
        }
    }
    let dbs: Vec<f64> = rows.iter().map(|&i| db.db[i]).collect();
    let theta_z = build_library(&cfg.diffusion, &features)?.scale_rows(&dbs)?;
    theta_f.names = driver.names().iter().map(|s| format!("f:{s}")).collect();
    let mut theta_z = theta_z;
    theta_z.names = cfg.diffusion.names().iter().map(|s| format!("Z:{s}")).collect();
    let design = theta_f.hstack(&theta_z)?;
    let y = path.option();
    let target = rows.iter().map(|&i| y[i + 1] - y[i]).collect();
    let column_scales = design.data.column_iter().map(|c| c.amax()).collect();
    Ok(Regressors { target, design, n_driver: driver.len(), rows, column_scales })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub t_start: f64,
    pub t_end: f64,
    pub n_rows: usize,
    pub residual_rms: f64,
    pub mean_abs_residual: f64,
    pub selection: Selection,
    /// Terms removed by the share floor after selection.
    #[serde(default)]
    pub pruned: Vec<String>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub column_scales: BTreeMap<String, f64>,
}

/// The identified discrete law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveredBSDE {
    pub schema_version: u32,
    /// ξ^f over the driver library.
    pub driver: SparseModel,
    /// ξ^Z over the diffusion library.
    pub diffusion: SparseModel,
    pub sigma: SigmaModel,
    pub r: f64,
    pub clock: DriverClock,
    pub equation: String,
    pub provenance: Provenance,
}

/// Driver and diffusion values at one state. The one-step law is
/// `ΔY = (drift_time + drift_qv)·Δt + drift_qv·(ΔB² − Δt) + z·ΔB`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTerms {
    pub drift_time: f64,
    pub drift_qv: f64,
    pub z: f64,
}

impl StepTerms {
    pub fn drift(&self) -> f64 {
        self.drift_time + self.drift_qv
    }

    pub fn mean_increment(&self, dt: f64) -> f64 {
        self.drift() * dt
    }

    pub fn increment(&self, dt: f64, db: f64) -> f64 {
        self.drift() * dt + self.drift_qv * (db * db - dt) + self.z * db
    }
}

impl DiscoveredBSDE {
    /// Evaluates the driver and diffusion at `(t, x, y)` with derivatives `g`.
    pub fn step_terms(&self, t: f64, x: f64, y: f64, g: &Greeks) -> Result<StepTerms> {
        let look = |f: &str| match f {
            "t" => Some(t),
            "x" => Some(x),
            "y" => Some(y),
            "u" => Some(g.u),
            "u_t" => Some(g.u_t),
            "u_x" => Some(g.u_x),
            "u_xx" => Some(g.u_xx),
            _ => None,
        };
        let mut st = StepTerms { drift_time: 0.0, drift_qv: 0.0, z: 0.0 };
        for (name, c) in self.driver.terms.iter().zip(&self.driver.coefficients) {
            if *c == 0.0 {
                continue;
            }
            let term = crate::sparse::Term::parse(name)?;
            let v = c * term.eval(look).ok_or_else(|| Error::InvalidParameter(format!("cannot evaluate `{name}`")))?;
            if self.clock == DriverClock::QuadraticVariation && term.uses("u_xx") {
                st.drift_qv += v;
            } else {
                st.drift_time += v;
            }
        }
        for (name, c) in self.diffusion.terms.iter().zip(&self.diffusion.coefficients) {
            if *c == 0.0 {
                continue;
            }
            let term = crate::sparse::Term::parse(name)?;
            st.z += c * term.eval(look).ok_or_else(|| Error::InvalidParameter(format!("cannot evaluate `{name}`")))?;
        }
        Ok(st)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.schema_version != SCHEMA_VERSION {
            return invalid(format!("unsupported schema version {}", m.schema_version));
        }
        Ok(m)
    }
}

/// Solves the stacked regression and packages the identified law.
pub fn discover(
    path: &PathPair,
    greeks: &dyn GreekSource,
    db: &BrownianIncrements,
    sigma: &SigmaModel,
    r: f64,
    cfg: &BsdeLibraryConfig,
) -> Result<DiscoveredBSDE> {
    let reg = build_bsde_regressors(path, greeks, db, cfg)?;
    let selected = cfg.selection.fit(&reg.design, &reg.target)?;
    let nf = reg.n_driver;
    let (fit, pruned) = prune_by_share(&reg, selected, cfg.min_share);
    let strip = |s: &String| s[2..].to_string();
    let mut driver = SparseModel::new(
        reg.design.names[..nf].iter().map(strip).collect(),
        fit.coefficients[..nf].to_vec(),
    )?;
    let mut diffusion = SparseModel::new(
        reg.design.names[nf..].iter().map(strip).collect(),
        fit.coefficients[nf..].to_vec(),
    )?;
    driver.diagnostics = fit.diagnostics.clone();
    diffusion.diagnostics = fit.diagnostics.clone();
    if driver.is_empty() || diffusion.is_empty() {
        let which = if driver.is_empty() { "driver" } else { "diffusion" };
        return Err(Error::DegenerateDiscovery(format!("empty {which} support")));
    }
    let resid: Vec<f64> = (0..reg.target.len())
        .map(|k| {
            let row: Vec<f64> = reg.design.data.row(k).iter().copied().collect();
            reg.target[k] - fit.evaluate(&row)
        })
        .collect();
    let n = resid.len() as f64;
    let residual_rms = (resid.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
    let mean_abs_residual = resid.iter().map(|r| r.abs()).sum::<f64>() / n;
    let t = path.times();
    let provenance = Provenance {
        t_start: t[0],
        t_end: t[t.len() - 1],
        n_rows: reg.rows.len(),
        residual_rms,
        mean_abs_residual,
        selection: cfg.selection.clone(),
        pruned,
        seeds: BTreeMap::new(),
        column_scales: reg.design.names.iter().cloned().zip(reg.column_scales.iter().copied()).collect(),
    };
    let mut model = DiscoveredBSDE {
        schema_version: SCHEMA_VERSION,
        driver,
        diffusion,
        sigma: sigma.clone(),
        r,
        clock: cfg.clock,
        equation: String::new(),
        provenance,
    };
    model.equation = format_bsde(&model);
    Ok(model)
}

/// Drops terms below `min_share` of their block's largest contribution and
/// refits the survivors jointly by least squares, until nothing changes.
fn prune_by_share(reg: &Regressors, mut fit: SparseModel, min_share: f64) -> (SparseModel, Vec<String>) {
    let mut pruned = Vec::new();
    if min_share <= 0.0 {
        return (fit, pruned);
    }
    let norms: Vec<f64> = reg.design.data.column_iter().map(|c| c.norm()).collect();
    let blocks = [(0, reg.n_driver), (reg.n_driver, norms.len())];
    loop {
        let mut drop = Vec::new();
        for &(lo, hi) in &blocks {
            let share = |j: usize| fit.coefficients[j].abs() * norms[j];
            let largest = (lo..hi).map(share).fold(0.0, f64::max);
            drop.extend((lo..hi).filter(|&j| fit.coefficients[j] != 0.0 && share(j) < min_share * largest));
        }
        if drop.is_empty() {
            return (fit, pruned);
        }
        for &j in &drop {
            fit.coefficients[j] = 0.0;
            pruned.push(reg.design.names[j].clone());
        }
        let active = fit.active_set();
        let sub = reg.design.data.select_columns(&active);
        let (xi, rank_deficient) = lstsq(&sub, &nalgebra::DVector::from_column_slice(&reg.target));
        for (k, &j) in active.iter().enumerate() {
            fit.coefficients[j] = xi[k];
        }
        let resid = &nalgebra::DVector::from_column_slice(&reg.target) - &sub * &xi;
        fit.diagnostics.residual_norm = resid.norm();
        fit.diagnostics.rank_deficient |= rank_deficient;
    }
}

/// Four significant digits in positional notation when that stays short.
fn sig4(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let d = v.abs().log10().floor() as i32;
    if (-5..5).contains(&d) {
        let decimals = (3 - d).max(0) as usize;
        let s = format!("{:.*}", decimals, v.abs());
        // Rounding may carry into a new leading digit, e.g. 9.9996 → 10.000.
        let digits = s.chars().filter(|c| c.is_ascii_digit()).collect::<String>();
        let significant = digits.trim_start_matches('0').len();
        if significant > 4 && decimals > 0 {
            return format!("{:.*}", decimals - 1, v.abs());
        }
        s
    } else {
        format!("{:.3e}", v.abs())
    }
}

pub(crate) fn render(terms: &[String], coefs: &[f64]) -> String {
    let mut out = String::new();
    for (name, &c) in terms.iter().zip(coefs) {
        if c == 0.0 {
            continue;
        }
        let body = if name == "1" { sig4(c) } else { format!("{}·{}", sig4(c), name) };
        if out.is_empty() {
            if c < 0.0 {
                out.push('−');
            }
        } else {
            out.push_str(if c < 0.0 { " − " } else { " + " });
        }
        out.push_str(&body);
    }
    out
}

/// Renders `dY = [c₁·term₁ + …]dt + [d₁·term₁ + …]dB^Q`, omitting zero terms.
pub fn format_bsde(model: &DiscoveredBSDE) -> String {
    format!(
        "dY = [{}]dt + [{}]dB^Q",
        render(&model.driver.terms, &model.driver.coefficients),
        render(&model.diffusion.terms, &model.diffusion.coefficients)
    )
}

/// Signed coefficients per term, driver first.
pub type ParsedBsde = (Vec<(String, f64)>, Vec<(String, f64)>);

fn parse_sum(s: &str) -> Result<Vec<(String, f64)>> {
    let err = |m: &str| Error::Parse { row: 0, message: format!("{m} in `{s}`") };
    let mut out = Vec::new();
    let mut rest = s.trim();
    let mut sign = 1.0;
    if let Some(r) = rest.strip_prefix('−').or_else(|| rest.strip_prefix('-')) {
        sign = -1.0;
        rest = r;
    }
    loop {
        let next = [" + ", " − ", " - "]
            .iter()
            .filter_map(|sep| rest.find(sep).map(|i| (i, *sep)))
            .min_by_key(|(i, _)| *i);
        let (chunk, after) = match next {
            Some((i, sep)) => (&rest[..i], Some((&rest[i + sep.len()..], sep))),
            None => (rest, None),
        };
        let (num, name) = match chunk.find('·') {
            Some(i) => (&chunk[..i], chunk[i + '·'.len_utf8()..].to_string()),
            None => (chunk, "1".to_string()),
        };
        let v: f64 = num.trim().parse().map_err(|_| err("bad coefficient"))?;
        out.push((name, sign * v));
        match after {
            Some((r, sep)) => {
                sign = if sep == " + " { 1.0 } else { -1.0 };
                rest = r;
            }
            None => break,
        }
    }
    Ok(out)
}

/// Inverse of [`format_bsde`].
pub fn parse_bsde(s: &str) -> Result<ParsedBsde> {
    let err = |m: &str| Error::Parse { row: 0, message: m.to_string() };
    let body = s.trim().strip_prefix("dY = [").ok_or_else(|| err("missing `dY = [`"))?;
    let (drift, rest) = body.split_once("]dt + [").ok_or_else(|| err("missing `]dt + [`"))?;
    let diffusion = rest.strip_suffix("]dB^Q").ok_or_else(|| err("missing `]dB^Q`"))?;
    Ok((parse_sum(drift)?, parse_sum(diffusion)?))
}
