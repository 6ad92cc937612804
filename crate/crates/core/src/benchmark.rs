//! The Black–Scholes recovery benchmark: simulate a stock/call pair, run the
//! identification pipeline on the training interval and compare the
//! discovered law with the coefficients the pricing PDE implies.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bsde::{discover, render, AnalyticGreeks, BsdeLibraryConfig, DiscoveredBSDE, DriverClock, GreekSource};
use crate::diffusion::{extract_brownian, fit_sigma};
use crate::error::{invalid, Error, Result};
use crate::market::{make_dataset, ModelParams, PathPair};
use crate::pipeline::{PipelineConfig, WindowModel};
use crate::sparse::{Criterion, ScanOptions, Selection, StlsqOptions};
use crate::surface::{train_surface, FitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::Config(format!("unknown scale `{other}` (expected desk or paper)"))),
        }
    }
}

/// Surface settings for the benchmark fits. The data term carries the fit; the
/// increment term pins the slope along the path.
pub fn desk_surface() -> FitConfig {
    let mut cfg = FitConfig::default();
    cfg.architecture.hidden = vec![32; 3];
    cfg.adam.steps = 300;
    cfg.lbfgs.max_iter = 1500;
    cfg.lbfgs.grad_tol = 1e-12;
    cfg.n_collocation = 1024;
    cfg.gamma = 0.0;
    cfg.increment_weight = 1.0;
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub scale: Scale,
    pub params: ModelParams,
    /// Uniform steps over `[0, maturity]`.
    pub total_steps: usize,
    /// The training interval is `[0, train_end]`; the rest is held out.
    pub train_end: f64,
    pub seed: u64,
    /// The rate fields are overwritten with `params.r`.
    pub pipeline: PipelineConfig,
    /// Also rerun discovery under alternative selections on the same surface.
    pub comparisons: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self::for_scale(Scale::Desk)
    }
}

impl BenchmarkConfig {
    /// Desk scale puts 2·10⁴ steps on the training interval; paper scale
    /// puts 5·10⁵ steps on the whole horizon.
    pub fn for_scale(scale: Scale) -> Self {
        let params = ModelParams::default();
        let train_end = 0.8;
        let total_steps = match scale {
            Scale::Desk => 25_000,
            Scale::Paper => 500_000,
        };
        let pipeline = PipelineConfig { surface: desk_surface(), ..Default::default() };
        Self { scale, params, total_steps, train_end, seed: 0, pipeline, comparisons: true }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.train_end > 0.0 && self.train_end < self.params.maturity) {
            return invalid("train_end must lie inside (0, maturity)");
        }
        if self.train_steps() < 10 {
            return invalid("the training interval needs at least 10 steps");
        }
        self.resolved_pipeline().validate()
    }

    pub fn train_steps(&self) -> usize {
        (self.total_steps as f64 * self.train_end / self.params.maturity).round() as usize
    }

    pub fn resolved_pipeline(&self) -> PipelineConfig {
        let mut p = self.pipeline.clone();
        p.r = self.params.r;
        p.sigma.drift = self.params.r;
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Simulate,
    Diffusion,
    Extraction,
    Surface,
    Discovery,
    Comparisons,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Driver,
    Diffusion,
}

/// One expected term of the pricing law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub block: Block,
    pub term: String,
    /// Zero when the term was not selected.
    pub discovered: f64,
    pub ideal: f64,
    pub reference: f64,
    pub low: f64,
    pub high: f64,
    pub pass: bool,
}

/// Reported values for the benchmark law, in table order.
pub const REFERENCE_COEFFICIENTS: [f64; 4] = [1.018, 0.106, 0.016, 0.2];

/// Half-widths of the acceptance bands relative to the ideal coefficient.
pub const BAND_WIDTHS: [f64; 4] = [0.10, 0.30, 0.40, 0.10];

/// Driver terms `u_t`, `x·u_x`, `x²·u_xx` then the diffusion term `x·u_x`,
/// with the coefficients of `u_t + r·x·u_x + ½σ²x²·u_xx` and `σ·x·u_x`.
pub fn ideal_terms(params: &ModelParams) -> [(Block, &'static str, f64); 4] {
    [
        (Block::Driver, "u_t", 1.0),
        (Block::Driver, "x·u_x", params.r),
        (Block::Driver, "x²·u_xx", 0.5 * params.sigma * params.sigma),
        (Block::Diffusion, "x·u_x", params.sigma),
    ]
}

fn equation_of(terms: &[(Block, &str, f64)]) -> String {
    let part = |b: Block| {
        let (names, coefs): (Vec<String>, Vec<f64>) =
            terms.iter().filter(|t| t.0 == b).map(|t| (t.1.to_string(), t.2)).unzip();
        render(&names, &coefs)
    };
    format!("dY = [{}]dt + [{}]dB^Q", part(Block::Driver), part(Block::Diffusion))
}

/// Discovery under an alternative selection, sharing the main surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub equation: Option<String>,
    pub error: Option<String>,
    pub support_matches: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scale: Scale,
    pub seed: u64,
    pub train_steps: usize,
    pub dt: f64,
    pub equation: Option<String>,
    pub reference_equation: String,
    pub ideal_equation: String,
    pub sigma_equation: Option<String>,
    pub rows: Vec<CoefficientRow>,
    /// Selected terms outside the expected support, block-qualified.
    pub unexpected_terms: Vec<String>,
    pub comparisons: Vec<Comparison>,
    pub failure: Option<StageFailure>,
    pub passed: bool,
}

impl BenchmarkReport {
    /// Fixed-width coefficient table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<10} {:<9} {:>11} {:>9} {:>9} {:>17}  {}\n",
            "term", "block", "discovered", "ideal", "reference", "band", "status"
        );
        for r in &self.rows {
            let block = match r.block {
                Block::Driver => "driver",
                Block::Diffusion => "diffusion",
            };
            out.push_str(&format!(
                "{:<10} {:<9} {:>11.5} {:>9.5} {:>9.3} {:>17}  {}\n",
                r.term,
                block,
                r.discovered,
                r.ideal,
                r.reference,
                format!("[{:.3}, {:.3}]", r.low, r.high),
                if r.pass { "pass" } else { "FAIL" }
            ));
        }
        if !self.unexpected_terms.is_empty() {
            out.push_str(&format!("unexpected terms: {}\n", self.unexpected_terms.join(", ")));
        }
        out
    }

    /// Everything a reader needs: equations, the table, comparisons and the verdict.
    pub fn render(&self) -> String {
        let mut out = format!("benchmark scale={} seed={} train_steps={} dt={:.3e}\n", self.scale, self.seed, self.train_steps, self.dt);
        if let Some(f) = &self.failure {
            out.push_str(&format!("stage {} failed: {}\n", f.stage, f.message));
        }
        if let Some(s) = &self.sigma_equation {
            out.push_str(&format!("sigma:      {s}\n"));
        }
        out.push_str(&format!("discovered: {}\n", self.equation.as_deref().unwrap_or("-")));
        out.push_str(&format!("reference:  {}\n", self.reference_equation));
        out.push_str(&format!("ideal:      {}\n\n", self.ideal_equation));
        out.push_str(&self.table());
        if !self.comparisons.is_empty() {
            out.push('\n');
            for c in &self.comparisons {
                let body = match (&c.equation, &c.error) {
                    (Some(e), _) => e.clone(),
                    (None, Some(err)) => format!("error: {err}"),
                    (None, None) => "-".into(),
                };
                let mark = if c.support_matches { "support ok" } else { "support differs" };
                out.push_str(&format!("{:<16} {:<16} {body}\n", c.name, mark));
            }
        }
        out.push_str(&format!("\nresult: {}\n", if self.passed { "PASS" } else { "FAIL" }));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Wall time per completed stage, in seconds.
pub type Timings = Vec<(Stage, f64)>;

#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub report: BenchmarkReport,
    /// The simulated pair over the whole horizon.
    pub data: Option<PathPair>,
    /// The model learned on the training interval.
    pub model: Option<WindowModel>,
    pub timings: Timings,
}

fn support_matches(m: &DiscoveredBSDE) -> bool {
    let mut d: Vec<&str> = m.driver.active_terms();
    d.sort_unstable();
    let mut want = vec!["u_t", "x·u_x", "x²·u_xx"];
    want.sort_unstable();
    d == want && m.diffusion.active_terms() == ["x·u_x"]
}

fn score(model: &DiscoveredBSDE, params: &ModelParams) -> (Vec<CoefficientRow>, Vec<String>) {
    let rows = ideal_terms(params)
        .iter()
        .zip(REFERENCE_COEFFICIENTS.iter().zip(BAND_WIDTHS))
        .map(|(&(block, term, ideal), (&reference, width))| {
            let sm = match block {
                Block::Driver => &model.driver,
                Block::Diffusion => &model.diffusion,
            };
            let discovered = sm.coefficient(term).unwrap_or(0.0);
            let (low, high) = (ideal * (1.0 - width), ideal * (1.0 + width));
            let pass = discovered != 0.0 && (low..=high).contains(&discovered);
            CoefficientRow { block, term: term.to_string(), discovered, ideal, reference, low, high, pass }
        })
        .collect();
    let expected = ideal_terms(params);
    let mut unexpected = Vec::new();
    for (block, sm, label) in [(Block::Driver, &model.driver, "driver"), (Block::Diffusion, &model.diffusion, "diffusion")] {
        for t in sm.active_terms() {
            if !expected.iter().any(|e| e.0 == block && e.1 == t) {
                unexpected.push(format!("{label}:{t}"));
            }
        }
    }
    (rows, unexpected)
}

/// The alternative selections reported next to the main result.
pub fn comparison_libraries(base: &BsdeLibraryConfig) -> Vec<(&'static str, BsdeLibraryConfig)> {
    let mut out = vec![
        ("sr3_scan_bic", base.clone().with_selection(Selection::Sr3Scan(ScanOptions::default()))),
        ("stlsq", base.clone().with_selection(Selection::Stlsq(StlsqOptions::default()))),
        (
            "best_subset_bic",
            base.clone().with_selection(Selection::BestSubset { normalize: true, criterion: Criterion::Bic }),
        ),
    ];
    out.push(("no_share_floor", BsdeLibraryConfig { min_share: 0.0, ..base.clone() }));
    out.push(("time_clock", BsdeLibraryConfig { clock: DriverClock::Time, ..base.clone() }));
    out
}

/// Runs the benchmark. Only an invalid configuration is an error; stage
/// failures land in the report.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkRun> {
    cfg.validate()?;
    let pipeline = cfg.resolved_pipeline();
    let params = &cfg.params;
    let n_train = cfg.train_steps();
    let ideal = ideal_terms(params);
    let reference: Vec<(Block, &str, f64)> =
        ideal.iter().zip(REFERENCE_COEFFICIENTS).map(|(&(b, t, _), c)| (b, t, c)).collect();
    let mut report = BenchmarkReport {
        scale: cfg.scale,
        seed: cfg.seed,
        train_steps: n_train,
        dt: params.maturity / cfg.total_steps as f64,
        equation: None,
        reference_equation: equation_of(&reference),
        ideal_equation: equation_of(&ideal),
        sigma_equation: None,
        rows: Vec::new(),
        unexpected_terms: Vec::new(),
        comparisons: Vec::new(),
        failure: None,
        passed: false,
    };
    let mut timings = Timings::new();
    let mut run = BenchmarkRun { report: report.clone(), data: None, model: None, timings: Vec::new() };

    macro_rules! stage {
        ($stage:expr, $body:expr) => {{
            let clock = Instant::now();
            match $body {
                Ok(v) => {
                    timings.push(($stage, clock.elapsed().as_secs_f64()));
                    v
                }
                Err(e) => {
                    report.failure = Some(StageFailure { stage: $stage, message: e.to_string() });
                    run.report = report;
                    run.timings = timings;
                    return Ok(run);
                }
            }
        }};
    }

    let (data, train) = stage!(
        Stage::Simulate,
        make_dataset(params, cfg.total_steps, cfg.seed).and_then(|d| d.slice(0..n_train + 1).map(|t| (d, t)))
    );
    run.data = Some(data);
    let sigma = stage!(Stage::Diffusion, fit_sigma(&train, &pipeline.sigma));
    report.sigma_equation = Some(sigma.equation());
    let increments = stage!(Stage::Extraction, extract_brownian(&train, pipeline.r, &sigma, pipeline.eps_div));
    let mut surface_cfg = pipeline.surface.clone();
    surface_cfg.seed = cfg.seed;
    let fit = stage!(Stage::Surface, train_surface(&train, &surface_cfg));
    let mut bsde = stage!(Stage::Discovery, discover(&train, &fit.model, &increments, &sigma, pipeline.r, &pipeline.library));
    bsde.provenance.seeds.insert("data".into(), cfg.seed);
    bsde.provenance.seeds.insert("surface".into(), surface_cfg.seed);

    let (rows, unexpected) = score(&bsde, params);
    report.passed = rows.iter().all(|r| r.pass) && unexpected.is_empty();
    report.rows = rows;
    report.unexpected_terms = unexpected;
    report.equation = Some(bsde.equation.clone());

    if cfg.comparisons {
        let clock = Instant::now();
        let mut alternatives: Vec<(String, BsdeLibraryConfig, &dyn GreekSource)> = comparison_libraries(&pipeline.library)
            .into_iter()
            .map(|(n, l)| (n.to_string(), l, &fit.model as &dyn GreekSource))
            .collect();
        let analytic = AnalyticGreeks(*params);
        alternatives.push(("analytic_greeks".into(), pipeline.library.clone(), &analytic));
        if increments.len() > pipeline.library.max_rows {
            let all = BsdeLibraryConfig { max_rows: increments.len(), ..pipeline.library.clone() };
            alternatives.push(("all_rows".into(), all, &fit.model));
        }
        for (name, lib, greeks) in alternatives {
            let c = match discover(&train, greeks, &increments, &sigma, pipeline.r, &lib) {
                Ok(m) => Comparison { name, support_matches: support_matches(&m), equation: Some(m.equation), error: None },
                Err(e) => Comparison { name, equation: None, error: Some(e.to_string()), support_matches: false },
            };
            report.comparisons.push(c);
        }
        timings.push((Stage::Comparisons, clock.elapsed().as_secs_f64()));
    }

    run.report = report;
    run.model = Some(WindowModel { sigma, increments, fit, bsde });
    run.timings = timings;
    Ok(run)
}
