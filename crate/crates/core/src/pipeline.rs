//! Surface fit, diffusion estimate, Brownian extraction and BSDE discovery on
//! one window of observations.

use serde::{Deserialize, Serialize};

use crate::bsde::{discover, BsdeLibraryConfig, DiscoveredBSDE};
use crate::diffusion::{extract_brownian, fit_sigma, BrownianIncrements, SigmaFitConfig, SigmaModel, EPS_DIV};
use crate::error::{invalid, Result};
use crate::market::PathPair;
use crate::surface::{train_surface, train_surface_warm, Fit, FitConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Risk-free rate, taken as known.
    pub r: f64,
    pub sigma: SigmaFitConfig,
    pub surface: FitConfig,
    pub library: BsdeLibraryConfig,
    pub eps_div: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            r: 0.1,
            sigma: SigmaFitConfig { drift: 0.1, ..Default::default() },
            surface: FitConfig::default(),
            library: BsdeLibraryConfig::default(),
            eps_div: EPS_DIV,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.r.is_finite() {
            return invalid("r must be finite");
        }
        if !(self.eps_div > 0.0) {
            return invalid("eps_div must be positive");
        }
        self.surface.validate()?;
        self.library.validate()
    }
}

/// Everything learned from one window.
#[derive(Debug, Clone)]
pub struct WindowModel {
    pub sigma: SigmaModel,
    pub increments: BrownianIncrements,
    pub fit: Fit,
    pub bsde: DiscoveredBSDE,
}

/// Runs the three identification steps on `window`. With `previous`, the
/// surface starts from that fit and trains under `surface` instead of
/// `cfg.surface`.
pub fn fit_window(
    window: &PathPair,
    cfg: &PipelineConfig,
    previous: Option<(&Fit, &FitConfig)>,
) -> Result<WindowModel> {
    cfg.validate()?;
    let sigma = fit_sigma(window, &cfg.sigma)?;
    let increments = extract_brownian(window, cfg.r, &sigma, cfg.eps_div)?;
    let (fit, seed) = match previous {
        Some((prev, surface)) => (train_surface_warm(window, surface, prev)?, surface.seed),
        None => (train_surface(window, &cfg.surface)?, cfg.surface.seed),
    };
    let mut bsde = discover(window, &fit.model, &increments, &sigma, cfg.r, &cfg.library)?;
    bsde.provenance.seeds.insert("surface".into(), seed);
    Ok(WindowModel { sigma, increments, fit, bsde })
}
