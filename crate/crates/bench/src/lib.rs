//! Shared inputs for the pipeline benchmarks.

use sindy_bsde::benchmark::desk_surface;
use sindy_bsde::market::{make_dataset, ModelParams, PathPair};
use sindy_bsde::surface::FitConfig;

/// Training prefix `[0, 0.8]` of a desk path with `total_steps` over `[0, 1]`.
pub fn training_path(total_steps: usize, seed: u64) -> PathPair {
    let full = make_dataset(&ModelParams::default(), total_steps, seed).expect("valid parameters");
    let n = (total_steps as f64 * 0.8).round() as usize;
    full.slice(0..n + 1).expect("prefix within range")
}

/// Desk surface settings cut down to a few iterations.
pub fn short_fit() -> FitConfig {
    let mut cfg = desk_surface();
    cfg.architecture.hidden = vec![16, 16];
    cfg.adam.steps = 20;
    cfg.lbfgs.max_iter = 20;
    cfg.n_collocation = 64;
    cfg.max_data_points = 1000;
    cfg
}
