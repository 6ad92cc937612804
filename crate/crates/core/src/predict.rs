//! One-step-ahead option prediction with a sliding memory window.
//!
//! Each step draws `n_samples` Brownian increments and pushes them through the
//! discovered law; the mean prediction is the sampling-free conditional mean
//! and the interval comes from empirical quantiles of the candidates. The
//! window model is refit every `retrain_stride` steps, warm-starting the
//! surface from the previous fit.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bsde::{DiscoveredBSDE, GreekSource};
use crate::error::{invalid, Result};
use crate::market::PathPair;
use crate::pipeline::{fit_window, PipelineConfig, WindowModel};
use crate::rng::{for_path, normal};
use crate::stats::{median, quantile_sorted};
use crate::surface::FitConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictionConfig {
    /// Memory window τ in points.
    pub window: usize,
    /// Steps between refits of the window model.
    pub retrain_stride: usize,
    pub n_samples: usize,
    pub confidence: f64,
    /// A step longer than this multiple of the median Δt is a skip.
    pub skip_factor: f64,
    /// Surface settings for refits after the first, which start warm.
    pub retrain: FitConfig,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        let mut retrain = FitConfig::default();
        retrain.adam.steps = 0;
        retrain.lbfgs.max_iter = 200;
        retrain.outer_rounds = 1;
        Self { window: 2000, retrain_stride: 100, n_samples: 1000, confidence: 0.95, skip_factor: 5.0, retrain }
    }
}

impl PredictionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return invalid("window must hold at least 2 points");
        }
        if self.retrain_stride == 0 {
            return invalid("retrain_stride must be at least 1");
        }
        if self.n_samples == 0 {
            return invalid("n_samples must be at least 1");
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return invalid("confidence must lie in (0, 1)");
        }
        if !(self.skip_factor > 1.0) {
            return invalid("skip_factor must exceed 1");
        }
        self.retrain.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Forecast of `Y` one step of length `dt` after the state `(t, x, y)`.
#[allow(clippy::too_many_arguments)]
pub fn predict_step(
    t: f64,
    x: f64,
    y: f64,
    dt: f64,
    model: &DiscoveredBSDE,
    greeks: &dyn GreekSource,
    n_samples: usize,
    confidence: f64,
    seed: u64,
) -> Result<Forecast> {
    if !(dt > 0.0) {
        return invalid("dt must be positive");
    }
    let g = greeks.greeks(&[(t, x)])?[0];
    let st = model.step_terms(t, x, y, &g)?;
    let mean = y + st.mean_increment(dt);
    if !mean.is_finite() {
        return Err(crate::Error::NonFinite { term: "mean prediction".into(), row: 0 });
    }
    let mut rng = for_path(seed, 0);
    let sd = dt.sqrt();
    let mut cand: Vec<f64> = (0..n_samples).map(|_| y + st.increment(dt, sd * normal(&mut rng))).collect();
    cand.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - confidence);
    let lo = quantile_sorted(&cand, tail).min(mean);
    let hi = quantile_sorted(&cand, 1.0 - tail).max(mean);
    Ok(Forecast { mean, lo, hi })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub t: f64,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub realized: f64,
    /// The step crossed a skip; the realized value stands in for the forecast.
    pub skip: bool,
    /// The window model was refit before this step.
    pub retrained: bool,
    /// No usable model; the forecast is persistence.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub rmse: f64,
    pub coverage: f64,
    pub n_records: usize,
    pub n_scored: usize,
    pub n_skips: usize,
    pub n_fallbacks: usize,
    pub n_retrains: usize,
    pub config: PredictionConfig,
}

#[derive(Debug, Clone)]
pub struct PredictionRun {
    pub records: Vec<PredictionRecord>,
    pub summary: PredictionSummary,
    /// The last window model, if any fit succeeded.
    pub last_model: Option<WindowModel>,
}

impl PredictionRun {
    /// Columns `t,mean,lo,hi,realized,skip,retrained`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,mean,lo,hi,realized,skip,retrained")?;
        for r in &self.records {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
                r.t, r.mean, r.lo, r.hi, r.realized, r.skip as u8, r.retrained as u8
            )?;
        }
        Ok(())
    }
}

fn summarize(records: &[PredictionRecord], cfg: &PredictionConfig) -> PredictionSummary {
    let scored: Vec<&PredictionRecord> = records.iter().filter(|r| !r.skip).collect();
    let n = scored.len();
    let (rmse, coverage) = if n == 0 {
        (f64::NAN, f64::NAN)
    } else {
        let sq: f64 = scored.iter().map(|r| (r.mean - r.realized).powi(2)).sum();
        let inside = scored.iter().filter(|r| r.lo <= r.realized && r.realized <= r.hi).count();
        ((sq / n as f64).sqrt(), inside as f64 / n as f64)
    };
    PredictionSummary {
        rmse,
        coverage,
        n_records: records.len(),
        n_scored: n,
        n_skips: records.iter().filter(|r| r.skip).count(),
        n_fallbacks: records.iter().filter(|r| r.fallback).count(),
        n_retrains: records.iter().filter(|r| r.retrained).count(),
        config: cfg.clone(),
    }
}

/// Predicts `Y` at every index in `split..len` from the point before it.
///
/// The window for a step ending at index `i` holds the `window` points up to
/// `i` (fewer near the start). Refit failures keep the previous model; with
/// no model at all the step falls back to persistence.
pub fn online_loop(
    data: &PathPair,
    split: usize,
    pipeline: &PipelineConfig,
    cfg: &PredictionConfig,
    seed: u64,
) -> Result<PredictionRun> {
    cfg.validate()?;
    pipeline.validate()?;
    if split < 2 || split >= data.len() {
        return invalid(format!("split {split} must leave at least 2 training points and 1 test point"));
    }
    let times = data.times();
    let (xs, ys) = (data.stock(), data.option());
    let median_dt = median(&data.grid().increments());
    let mut model: Option<WindowModel> = None;
    let mut records = Vec::with_capacity(data.len() - split);
    for (step, i) in (split - 1..data.len() - 1).enumerate() {
        let dt = times[i + 1] - times[i];
        let mut retrained = false;
        if step % cfg.retrain_stride == 0 {
            let start = (i + 1).saturating_sub(cfg.window);
            let window = data.slice(start..i + 1)?;
            let previous = model.as_ref().map(|m| (&m.fit, &cfg.retrain));
            if let Ok(m) = fit_window(&window, pipeline, previous) {
                model = Some(m);
                retrained = true;
            }
        }
        let skip = dt > cfg.skip_factor * median_dt;
        let realized = ys[i + 1];
        let rec = |mean: f64, lo: f64, hi: f64, skip: bool, fallback: bool| PredictionRecord {
            t: times[i + 1],
            mean,
            lo,
            hi,
            realized,
            skip,
            retrained,
            fallback,
        };
        if skip {
            records.push(rec(realized, realized, realized, true, false));
            continue;
        }
        let forecast = model.as_ref().and_then(|m| {
            let step_seed = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            predict_step(times[i], xs[i], ys[i], dt, &m.bsde, &m.fit.model, cfg.n_samples, cfg.confidence, step_seed)
                .ok()
        });
        records.push(match forecast {
            Some(f) => rec(f.mean, f.lo, f.hi, false, false),
            None => rec(ys[i], ys[i], ys[i], false, true),
        });
    }
    let summary = summarize(&records, cfg);
    Ok(PredictionRun { records, summary, last_model: model })
}
