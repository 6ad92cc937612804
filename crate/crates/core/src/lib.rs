//! Data-driven discovery of backward stochastic differential equations from a
//! single stock/option trajectory pair under the risk-neutral measure.
//!
//! The pipeline runs in stages, one module each:
//!
//! 1. [`surface`] fits a smooth approximator `u(t, x)` to the observed option
//!    prices with a physics residual on collocation points and exposes exact
//!    derivatives `u_t`, `u_x`, `u_xx`.
//! 2. [`diffusion`] estimates the diffusion function σ̂(x) from realized
//!    quadratic variation and inverts the forward dynamics into Brownian
//!    increments under Q.
//! 3. [`bsde`] assembles the driver and diffusion libraries and identifies the
//!    discrete BSDE `ΔY = f·Δt + Z·ΔB` by sparse regression ([`sparse`]).
//! 4. [`predict`] runs one-step-ahead option prediction with a sliding memory
//!    window; [`generate`] samples new (stock, option) pairs from the learned law.
//!
//! [`market`] supplies the Black–Scholes ground truth and [`ingest`] turns tick
//! files into aligned path pairs.

pub mod benchmark;
pub mod bsde;
pub mod diffusion;
pub mod error;
pub mod generate;
pub mod ingest;
pub mod market;
pub mod optim;
pub mod pipeline;
pub mod predict;
pub mod rng;
pub mod sparse;
pub mod stats;
pub mod surface;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
