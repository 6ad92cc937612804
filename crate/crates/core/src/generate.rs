//! Synthetic (stock, option) pairs from the learned forward dynamic and the
//! discovered BSDE, driven by one shared Brownian increment per step.
//!
//! The stock advances by the additive Euler step
//! `X ← X + r·X·Δt + σ̂(X)·ΔB`, the exact inverse of the extraction in
//! [`crate::diffusion`], and the option by the discovered one-step law with the
//! same ΔB. Path `k` draws from its own stream, so the number of paths never
//! changes an individual path.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::market::{PathPair, TimeGrid};
use crate::pipeline::{fit_window, PipelineConfig, WindowModel};
use crate::rng::{for_path, normal};
use crate::surface::FitConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    /// The starting model drives every step.
    Frozen,
    /// The window model is refit along each path every `retrain_stride` steps.
    Rolling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    /// End of the generated grid; the start is the last observed time.
    pub t_end: f64,
    /// Starting stock value; the last observation when absent.
    pub x0: Option<f64>,
    /// Starting option value; the last observation when absent.
    pub y0: Option<f64>,
    pub mode: GenerationMode,
    pub retrain_stride: usize,
    /// Points in the rolling window, observed history first.
    pub window: usize,
    /// Surface settings for rolling refits, which start warm.
    pub retrain: FitConfig,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let mut retrain = FitConfig::default();
        retrain.adam.steps = 0;
        retrain.lbfgs.max_iter = 200;
        retrain.outer_rounds = 1;
        Self {
            n_paths: 500,
            n_steps: 500,
            t_end: 1.0,
            x0: None,
            y0: None,
            mode: GenerationMode::Frozen,
            retrain_stride: 100,
            window: 2000,
            retrain,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 || self.n_steps == 0 {
            return invalid("n_paths and n_steps must be at least 1");
        }
        if self.retrain_stride == 0 || self.window < 2 {
            return invalid("retrain_stride must be at least 1 and window at least 2");
        }
        if let Some(y0) = self.y0 {
            if !(y0 >= 0.0) {
                return invalid("y0 must be non-negative");
            }
        }
        if let Some(x0) = self.x0 {
            if !(x0 > 0.0) {
                return invalid("x0 must be positive");
            }
        }
        Ok(())
    }
}

/// One generated trajectory. After a non-positive stock value the path stops
/// at the last valid point and `truncated` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPath {
    pub times: Vec<f64>,
    pub stock: Vec<f64>,
    pub option: Vec<f64>,
    /// ΔB of each completed step, shared by both legs.
    pub increments: Vec<f64>,
    pub truncated: bool,
    /// Refits that failed and kept the previous model.
    pub failed_refits: usize,
}

impl GeneratedPath {
    fn start(t0: f64, x0: f64, y0: f64, n: usize) -> Self {
        let mut p = Self {
            times: Vec::with_capacity(n + 1),
            stock: Vec::with_capacity(n + 1),
            option: Vec::with_capacity(n + 1),
            increments: Vec::with_capacity(n),
            truncated: false,
            failed_refits: 0,
        };
        p.times.push(t0);
        p.stock.push(x0);
        p.option.push(y0);
        p
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Columns `t,x,y`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,x,y")?;
        for i in 0..self.len() {
            writeln!(w, "{:.16e},{:.16e},{:.16e}", self.times[i], self.stock[i], self.option[i])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub config: GenerationConfig,
    pub equation: String,
    pub truncated_paths: Vec<usize>,
    pub failed_refits: usize,
    pub files: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub paths: Vec<GeneratedPath>,
    pub grid: TimeGrid,
    equation: String,
    config: GenerationConfig,
}

impl Generation {
    pub fn manifest(&self) -> GenerationManifest {
        GenerationManifest {
            config: self.config.clone(),
            equation: self.equation.clone(),
            truncated_paths: self.paths.iter().enumerate().filter(|(_, p)| p.truncated).map(|(k, _)| k).collect(),
            failed_refits: self.paths.iter().map(|p| p.failed_refits).sum(),
            files: (0..self.paths.len()).map(path_file).collect(),
        }
    }

    /// One `path_NNNNN.csv` per path and `manifest.json` in `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (k, p) in self.paths.iter().enumerate() {
            let f = std::io::BufWriter::new(std::fs::File::create(dir.join(path_file(k)))?);
            p.write_csv(f)?;
        }
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        std::fs::write(dir.join("manifest.json"), manifest + "\n")?;
        Ok(())
    }
}

fn path_file(k: usize) -> String {
    format!("path_{k:05}.csv")
}

/// Advances `path` by one step with increment `db` under `model`. Returns
/// false when the stock would leave (0, ∞) or a value turns non-finite.
fn advance(path: &mut GeneratedPath, model: &WindowModel, t1: f64, db: f64, greeks: &crate::market::Greeks) -> bool {
    let k = path.len() - 1;
    let (t, x, y) = (path.times[k], path.stock[k], path.option[k]);
    let dt = t1 - t;
    let r = model.bsde.r;
    let x1 = x + r * x * dt + model.sigma.eval(x) * db;
    let y1 = match model.bsde.step_terms(t, x, y, greeks) {
        Ok(st) => y + st.increment(dt, db),
        Err(_) => f64::NAN,
    };
    if !(x1 > 0.0) || !x1.is_finite() || !y1.is_finite() {
        path.truncated = true;
        return false;
    }
    path.times.push(t1);
    path.stock.push(x1);
    path.option.push(y1);
    path.increments.push(db);
    true
}

/// Generates paths from the end of `history` with `model`, the window model
/// fit on `history`.
pub fn generate_paths(
    history: &PathPair,
    model: &WindowModel,
    pipeline: &PipelineConfig,
    cfg: &GenerationConfig,
) -> Result<Generation> {
    cfg.validate()?;
    let n = history.len();
    let t0 = history.times()[n - 1];
    if !(cfg.t_end > t0) {
        return invalid(format!("t_end {} must follow the last observed time {t0}", cfg.t_end));
    }
    let grid = TimeGrid::uniform(t0, cfg.t_end, cfg.n_steps)?;
    let x0 = cfg.x0.unwrap_or(history.stock()[n - 1]);
    let y0 = cfg.y0.unwrap_or(history.option()[n - 1]);
    let mut rngs: Vec<ChaCha8Rng> = (0..cfg.n_paths as u64).map(|k| for_path(cfg.seed, k)).collect();
    let mut paths: Vec<GeneratedPath> =
        (0..cfg.n_paths).map(|_| GeneratedPath::start(t0, x0, y0, cfg.n_steps)).collect();
    let times = grid.times();
    match cfg.mode {
        GenerationMode::Frozen => {
            // Every live path steps together so the surface sees one batch.
            let mut live: Vec<usize> = (0..cfg.n_paths).collect();
            for i in 0..cfg.n_steps {
                let sd = (times[i + 1] - times[i]).sqrt();
                let pts: Vec<(f64, f64)> = live.iter().map(|&k| (times[i], paths[k].stock[i])).collect();
                let greeks = model.fit.model.eval_derivatives(&pts);
                live = live
                    .iter()
                    .zip(&greeks)
                    .filter_map(|(&k, g)| {
                        let db = sd * normal(&mut rngs[k]);
                        advance(&mut paths[k], model, times[i + 1], db, g).then_some(k)
                    })
                    .collect();
                if live.is_empty() {
                    break;
                }
            }
        }
        GenerationMode::Rolling => {
            for (k, path) in paths.iter_mut().enumerate() {
                let mut current = model.clone();
                for i in 0..cfg.n_steps {
                    if i > 0 && i % cfg.retrain_stride == 0 {
                        let window = rolling_window(history, path, cfg.window)?;
                        match fit_window(&window, pipeline, Some((&current.fit, &cfg.retrain))) {
                            Ok(m) => current = m,
                            Err(_) => path.failed_refits += 1,
                        }
                    }
                    let g = current.fit.model.derivatives(times[i], path.stock[i]);
                    let db = (times[i + 1] - times[i]).sqrt() * normal(&mut rngs[k]);
                    if !advance(path, &current, times[i + 1], db, &g) {
                        break;
                    }
                }
            }
        }
    }
    Ok(Generation { paths, grid, equation: model.bsde.equation.clone(), config: cfg.clone() })
}

/// The last `size` points of observed history followed by the generated path.
fn rolling_window(history: &PathPair, path: &GeneratedPath, size: usize) -> Result<PathPair> {
    let n = history.len();
    let generated = path.len() - 1;
    let from_history = size.saturating_sub(generated).min(n);
    let mut t: Vec<f64> = history.times()[n - from_history..].to_vec();
    let mut x: Vec<f64> = history.stock()[n - from_history..].to_vec();
    let mut y: Vec<f64> = history.option()[n - from_history..].to_vec();
    let skip = generated.saturating_sub(size);
    t.extend_from_slice(&path.times[1 + skip..]);
    x.extend_from_slice(&path.stock[1 + skip..]);
    y.extend_from_slice(&path.option[1 + skip..]);
    // Generated values may turn slightly negative; windows only need finite data.
    let y: Vec<f64> = y.into_iter().map(|v| v.max(0.0)).collect();
    PathPair::new(TimeGrid::new(t)?, x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{DriverClock, Provenance, SCHEMA_VERSION, DiscoveredBSDE};
    use crate::diffusion::{BrownianIncrements, SigmaModel};
    use crate::sparse::{Criterion, Selection, SparseModel};
    use crate::surface::{Architecture, FitReport, PhysicsAux, SurfaceModel, Fit};

    fn model(sigma: f64, driver: (&str, f64), z: (&str, f64)) -> WindowModel {
        let sm = |p: (&str, f64)| SparseModel::new(vec![p.0.into()], vec![p.1]).unwrap();
        let sigma_model = SigmaModel::single("x", sigma, (0.01, 100.0)).unwrap();
        let surface = SurfaceModel::constant(Architecture { hidden: vec![2], ..Default::default() }, 0.1);
        let report = FitReport {
            data_loss: 0.0,
            increment_loss: 0.0,
            physics_loss: 0.0,
            total_loss: 0.0,
            converged: true,
            iterations: 0,
            evaluations: 0,
            physics_history: vec![],
            total_history: vec![],
            n_data: 0,
            n_collocation: 0,
            aux: PhysicsAux { terms: vec![], zeta: vec![] },
        };
        WindowModel {
            sigma: sigma_model.clone(),
            increments: BrownianIncrements::new(vec![0.0], vec![0.0], vec![1.0]).unwrap(),
            fit: Fit { model: surface, report },
            bsde: DiscoveredBSDE {
                schema_version: SCHEMA_VERSION,
                driver: sm(driver),
                diffusion: sm(z),
                sigma: sigma_model,
                r: 0.1,
                clock: DriverClock::QuadraticVariation,
                equation: "test".into(),
                provenance: Provenance {
                    t_start: 0.0,
                    t_end: 1.0,
                    n_rows: 1,
                    residual_rms: 0.0,
                    mean_abs_residual: 0.0,
                    selection: Selection::BestSubset { normalize: true, criterion: Criterion::Bic },
                pruned: vec![],
                    seeds: Default::default(),
                    column_scales: Default::default(),
                },
            },
        }
    }

    fn history() -> PathPair {
        PathPair::new(TimeGrid::uniform(0.0, 0.8, 4).unwrap(), vec![1.0; 5], vec![0.2; 5]).unwrap()
    }

    #[test]
    fn noise_free_law_is_deterministic() {
        let m = model(0.0, ("y", 0.1), ("x", 0.0));
        let cfg = GenerationConfig { n_paths: 3, n_steps: 10, ..Default::default() };
        let g = generate_paths(&history(), &m, &PipelineConfig::default(), &cfg).unwrap();
        let dt = 0.02;
        let (mut x, mut y) = (1.0f64, 0.2f64);
        for i in 0..10 {
            x += 0.1 * x * dt;
            y += 0.1 * y * dt;
            for p in &g.paths {
                assert!((p.stock[i + 1] - x).abs() < 1e-15 && (p.option[i + 1] - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shared_noise_reconstructs_both_legs_exactly() {
        let m = model(0.2, ("y", 0.1), ("x", 0.2));
        let cfg = GenerationConfig { n_paths: 20, n_steps: 50, seed: 5, ..Default::default() };
        let g = generate_paths(&history(), &m, &PipelineConfig::default(), &cfg).unwrap();
        for p in &g.paths {
            for i in 0..p.increments.len() {
                let (t, x, y, db) = (p.times[i], p.stock[i], p.option[i], p.increments[i]);
                let dt = p.times[i + 1] - t;
                assert_eq!(p.stock[i + 1], x + 0.1 * x * dt + m.sigma.eval(x) * db);
                let gk = m.fit.model.derivatives(t, x);
                let st = m.bsde.step_terms(t, x, y, &gk).unwrap();
                assert_eq!(p.option[i + 1], y + st.increment(dt, db));
            }
        }
    }

    #[test]
    fn path_count_does_not_change_paths() {
        let m = model(0.2, ("y", 0.1), ("x", 0.2));
        let few = GenerationConfig { n_paths: 3, n_steps: 30, seed: 8, ..Default::default() };
        let many = GenerationConfig { n_paths: 12, ..few.clone() };
        let a = generate_paths(&history(), &m, &PipelineConfig::default(), &few).unwrap();
        let b = generate_paths(&history(), &m, &PipelineConfig::default(), &many).unwrap();
        assert_eq!(a.paths[..], b.paths[..3]);
    }

    #[test]
    fn non_positive_stock_truncates_path() {
        let m = model(20.0, ("y", 0.0), ("x", 0.0));
        let cfg = GenerationConfig { n_paths: 50, n_steps: 40, seed: 1, ..Default::default() };
        let g = generate_paths(&history(), &m, &PipelineConfig::default(), &cfg).unwrap();
        let manifest = g.manifest();
        assert!(!manifest.truncated_paths.is_empty());
        for &k in &manifest.truncated_paths {
            let p = &g.paths[k];
            assert!(p.len() < 41 && p.stock.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn writes_one_file_per_path_and_manifest() {
        let m = model(0.2, ("y", 0.1), ("x", 0.2));
        let cfg = GenerationConfig { n_paths: 2, n_steps: 5, ..Default::default() };
        let g = generate_paths(&history(), &m, &PipelineConfig::default(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        g.write_dir(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("path_00001.csv")).unwrap();
        assert_eq!(text.lines().count(), 7);
        let man: GenerationManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(man.files, vec!["path_00000.csv", "path_00001.csv"]);
    }
}
