//! Ground-truth market models: geometric Brownian motion under the market
//! measure P and the risk-neutral measure Q, Black–Scholes call pricing with
//! analytical Greeks, and a Monte Carlo pricer used as an independent oracle.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::stats::{norm_cdf, norm_pdf};

/// Parameters of the Black–Scholes benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    /// Drift under the market measure P.
    pub mu: f64,
    pub sigma: f64,
    /// Risk-free rate, the drift under Q.
    pub r: f64,
    pub strike: f64,
    pub maturity: f64,
    pub x0: f64,
}

impl Default for ModelParams {
    /// The benchmark configuration: μ = 0.3, σ = 0.2, r = 0.1 on a unit
    /// horizon, at the money with x0 = K = 1.
    fn default() -> Self {
        Self {
            mu: 0.3,
            sigma: 0.2,
            r: 0.1,
            strike: 1.0,
            maturity: 1.0,
            x0: 1.0,
        }
    }
}

impl ModelParams {
    /// Checks the parameter invariants. A zero volatility is accepted so the
    /// deterministic limits can be exercised; negative values are not.
    pub fn validate(&self) -> Result<()> {
        let all = [self.mu, self.sigma, self.r, self.strike, self.maturity, self.x0];
        if all.iter().any(|v| !v.is_finite()) {
            return invalid("model parameters must be finite");
        }
        if self.sigma < 0.0 {
            return invalid(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if self.strike <= 0.0 || self.maturity <= 0.0 || self.x0 <= 0.0 {
            return invalid("strike, maturity and x0 must be positive");
        }
        Ok(())
    }

    /// Market price of risk (μ − r)/σ.
    pub fn market_price_of_risk(&self) -> f64 {
        (self.mu - self.r) / self.sigma
    }

    pub fn payoff(&self, s: f64) -> f64 {
        (s - self.strike).max(0.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measure {
    P,
    Q,
}

/// Strictly increasing observation times.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return invalid("time grid must have at least one point");
        }
        if times.iter().any(|t| !t.is_finite()) {
            return invalid("time grid contains non-finite values");
        }
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return invalid(format!("time grid not strictly increasing at index {}", i + 1));
        }
        Ok(Self { times })
    }

    /// `n_steps` equal increments on `[t0, t1]`; the last time is `t1` exactly.
    pub fn uniform(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || t1 <= t0 {
            return invalid("uniform grid needs n_steps >= 1 and t1 > t0");
        }
        let h = t1 - t0;
        let mut times: Vec<f64> = (0..=n_steps)
            .map(|i| t0 + h * (i as f64 / n_steps as f64))
            .collect();
        times[n_steps] = t1;
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of increments.
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }

    pub fn increments(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn median_dt(&self) -> f64 {
        crate::stats::median(&self.increments())
    }
}

/// An aligned pair of stock and option trajectories on one time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPair {
    grid: TimeGrid,
    stock: Vec<f64>,
    option: Vec<f64>,
}

impl PathPair {
    pub fn new(grid: TimeGrid, stock: Vec<f64>, option: Vec<f64>) -> Result<Self> {
        if stock.len() != grid.len() || option.len() != grid.len() {
            return invalid(format!(
                "length mismatch: grid {}, stock {}, option {}",
                grid.len(),
                stock.len(),
                option.len()
            ));
        }
        if let Some(i) = stock.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
            return invalid(format!("stock value at index {i} is not strictly positive"));
        }
        if let Some(i) = option.iter().position(|y| !(y.is_finite() && *y >= 0.0)) {
            return invalid(format!("option value at index {i} is negative or non-finite"));
        }
        Ok(Self { grid, stock, option })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        self.grid.times()
    }

    pub fn stock(&self) -> &[f64] {
        &self.stock
    }

    pub fn option(&self) -> &[f64] {
        &self.option
    }

    pub fn len(&self) -> usize {
        self.stock.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stock.is_empty()
    }

    /// Points `range.start..range.end` as a new pair.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return invalid(format!("slice {:?} out of bounds for length {}", range, self.len()));
        }
        Self::new(
            TimeGrid::new(self.grid.times()[range.clone()].to_vec())?,
            self.stock[range.clone()].to_vec(),
            self.option[range].to_vec(),
        )
    }

    /// Appends `other`, whose first time must follow this pair's last time.
    pub fn concat(&self, other: &PathPair) -> Result<Self> {
        let mut t = self.grid.times().to_vec();
        t.extend_from_slice(other.times());
        let mut x = self.stock.clone();
        x.extend_from_slice(&other.stock);
        let mut y = self.option.clone();
        y.extend_from_slice(&other.option);
        Self::new(TimeGrid::new(t)?, x, y)
    }

    /// CSV with header `t,x,y` and 17 significant digits per value.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,x,y")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e}",
                self.grid.times()[i],
                self.stock[i],
                self.option[i]
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t", "x", "y"] {
            return Err(Error::Parse {
                row: 0,
                message: format!("expected header t,x,y, found {:?}", headers),
            });
        }
        let (mut t, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse {
                        row: i + 1,
                        message: format!("bad value in column {k}"),
                    })
            };
            t.push(field(0)?);
            x.push(field(1)?);
            y.push(field(2)?);
        }
        Self::new(TimeGrid::new(t)?, x, y)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_csv(f)
    }
}

/// A simulated stock path together with the standard normal draws and the
/// Brownian increments that produced it.
#[derive(Debug, Clone)]
pub struct SimulatedPath {
    pub stock: Vec<f64>,
    /// Brownian increments ΔB_i = √Δt_i · ξ_i, one per grid step.
    pub increments: Vec<f64>,
}

/// Exact log-Euler scheme
/// `X_{i+1} = X_i exp((d − σ²/2)Δt_i + σ ΔB_i)` with `d = μ` under P and
/// `d = r` under Q.
pub fn simulate_gbm_with_increments(
    params: &ModelParams,
    grid: &TimeGrid,
    measure: Measure,
    seed: u64,
) -> Result<SimulatedPath> {
    params.validate()?;
    let drift = match measure {
        Measure::P => params.mu,
        Measure::Q => params.r,
    };
    let mut rng = rng::seeded(seed);
    let n = grid.n_steps();
    let mut stock = Vec::with_capacity(n + 1);
    let mut increments = Vec::with_capacity(n);
    let mut x = params.x0;
    stock.push(x);
    let s2 = params.sigma * params.sigma;
    for i in 0..n {
        let dt = grid.dt(i);
        let db = dt.sqrt() * rng::normal(&mut rng);
        x *= ((drift - 0.5 * s2) * dt + params.sigma * db).exp();
        stock.push(x);
        increments.push(db);
    }
    Ok(SimulatedPath { stock, increments })
}

pub fn simulate_gbm(
    params: &ModelParams,
    grid: &TimeGrid,
    measure: Measure,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(simulate_gbm_with_increments(params, grid, measure, seed)?.stock)
}

/// Additive Euler–Maruyama scheme `X_{i+1} = X_i + d X_i Δt + σ X_i ΔB_i`,
/// driven by the same normal stream as [`simulate_gbm`] for a given seed.
pub fn simulate_gbm_euler(
    params: &ModelParams,
    grid: &TimeGrid,
    measure: Measure,
    seed: u64,
) -> Result<Vec<f64>> {
    params.validate()?;
    let drift = match measure {
        Measure::P => params.mu,
        Measure::Q => params.r,
    };
    let mut rng = rng::seeded(seed);
    let mut x = params.x0;
    let mut out = vec![x];
    for i in 0..grid.n_steps() {
        let dt = grid.dt(i);
        let db = dt.sqrt() * rng::normal(&mut rng);
        x += drift * x * dt + params.sigma * x * db;
        out.push(x);
    }
    Ok(out)
}

fn check_point(t: f64, s: f64, params: &ModelParams) -> Result<()> {
    params.validate()?;
    if !(t.is_finite() && s.is_finite()) {
        return Err(Error::Domain("non-finite (t, s)".into()));
    }
    if t < 0.0 || t > params.maturity {
        return Err(Error::Domain(format!("t = {t} outside [0, {}]", params.maturity)));
    }
    if s <= 0.0 {
        return Err(Error::Domain(format!("stock price must be positive, got {s}")));
    }
    Ok(())
}

/// Black–Scholes value of the European call at `(t, s)`.
pub fn bs_price(t: f64, s: f64, params: &ModelParams) -> Result<f64> {
    check_point(t, s, params)?;
    let tau = params.maturity - t;
    let k = params.strike;
    if tau == 0.0 {
        return Ok(params.payoff(s));
    }
    let disc_k = k * (-params.r * tau).exp();
    if params.sigma == 0.0 {
        return Ok((s - disc_k).max(0.0));
    }
    let (d1, d2) = d1_d2(tau, s, params);
    Ok(s * norm_cdf(d1) - disc_k * norm_cdf(d2))
}

fn d1_d2(tau: f64, s: f64, p: &ModelParams) -> (f64, f64) {
    let vol = p.sigma * tau.sqrt();
    let d1 = ((s / p.strike).ln() + (p.r + 0.5 * p.sigma * p.sigma) * tau) / vol;
    (d1, d1 - vol)
}

/// Analytical theta `u_t`, delta `u_x` and gamma `u_xx` of the call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Greeks {
    pub u: f64,
    pub u_t: f64,
    pub u_x: f64,
    pub u_xx: f64,
}

pub fn bs_greeks(t: f64, s: f64, params: &ModelParams) -> Result<Greeks> {
    check_point(t, s, params)?;
    let tau = params.maturity - t;
    if tau <= 0.0 {
        return Err(Error::Domain("Greeks undefined at maturity".into()));
    }
    if params.sigma <= 0.0 {
        return Err(Error::Domain("Greeks need sigma > 0".into()));
    }
    let (d1, d2) = d1_d2(tau, s, params);
    let disc_k = params.strike * (-params.r * tau).exp();
    let pdf = norm_pdf(d1);
    let sqrt_tau = tau.sqrt();
    Ok(Greeks {
        u: s * norm_cdf(d1) - disc_k * norm_cdf(d2),
        u_t: -s * pdf * params.sigma / (2.0 * sqrt_tau) - params.r * disc_k * norm_cdf(d2),
        u_x: norm_cdf(d1),
        u_xx: pdf / (s * params.sigma * sqrt_tau),
    })
}

/// One Q-measure path on a uniform grid over `[0, T]` paired with its
/// Black–Scholes option values.
pub fn make_dataset(params: &ModelParams, n_steps: usize, seed: u64) -> Result<PathPair> {
    Ok(make_dataset_with_increments(params, n_steps, seed)?.0)
}

/// As [`make_dataset`], also returning the Brownian increments that drove
/// the stock path.
pub fn make_dataset_with_increments(
    params: &ModelParams,
    n_steps: usize,
    seed: u64,
) -> Result<(PathPair, Vec<f64>)> {
    if n_steps < 2 {
        return invalid("make_dataset needs n_steps >= 2");
    }
    let grid = TimeGrid::uniform(0.0, params.maturity, n_steps)?;
    let sim = simulate_gbm_with_increments(params, &grid, Measure::Q, seed)?;
    let option = grid
        .times()
        .iter()
        .zip(&sim.stock)
        .map(|(&t, &x)| bs_price(t, x, params))
        .collect::<Result<Vec<_>>>()?;
    Ok((PathPair::new(grid, sim.stock, option)?, sim.increments))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Monte Carlo estimate of the discounted expected payoff under Q, sampling
/// the terminal price from its exact lognormal law. Path `k` draws from its
/// own stream so the estimate does not depend on how paths are scheduled.
pub fn monte_carlo_price(
    t: f64,
    s: f64,
    params: &ModelParams,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_point(t, s, params)?;
    if n_paths < 100 {
        return invalid("monte_carlo_price needs at least 100 paths");
    }
    let tau = params.maturity - t;
    let disc = (-params.r * tau).exp();
    let drift = (params.r - 0.5 * params.sigma * params.sigma) * tau;
    let vol = params.sigma * tau.sqrt();
    let mut rng = rng::seeded(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_paths {
        let xt = s * (drift + vol * rng::normal(&mut rng)).exp();
        let v = disc * params.payoff(xt);
        sum += v;
        sum_sq += v * v;
    }
    Ok(summarize(sum, sum_sq, n_paths))
}

/// Monte Carlo price with the additive Euler scheme on `n_steps` steps. It
/// shares no code path with the closed form or the exact sampler.
pub fn monte_carlo_price_euler(
    t: f64,
    s: f64,
    params: &ModelParams,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_point(t, s, params)?;
    if n_paths < 100 || n_steps == 0 {
        return invalid("monte_carlo_price_euler needs >= 100 paths and >= 1 step");
    }
    let tau = params.maturity - t;
    let dt = tau / n_steps as f64;
    let sq = dt.sqrt();
    let disc = (-params.r * tau).exp();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for k in 0..n_paths {
        let mut rng = rng::for_path(seed, k as u64);
        let mut x = s;
        for _ in 0..n_steps {
            x += params.r * x * dt + params.sigma * x * sq * rng::normal(&mut rng);
        }
        let v = disc * params.payoff(x);
        sum += v;
        sum_sq += v * v;
    }
    Ok(summarize(sum, sum_sq, n_paths))
}

fn summarize(sum: f64, sum_sq: f64, n: usize) -> McEstimate {
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    McEstimate {
        mean,
        std_error: (var / nf).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bench() -> ModelParams {
        ModelParams::default()
    }

    #[test]
    fn zero_vol_q_path_is_deterministic_exponential() {
        let p = ModelParams { sigma: 0.0, ..bench() };
        let grid = TimeGrid::uniform(0.0, 1.0, 1).unwrap();
        let x = simulate_gbm(&p, &grid, Measure::Q, 3).unwrap();
        assert_eq!(x[1], 0.1_f64.exp());
    }

    #[test]
    fn same_seed_same_path() {
        let grid = TimeGrid::uniform(0.0, 1.0, 500).unwrap();
        let a = simulate_gbm(&bench(), &grid, Measure::Q, 11).unwrap();
        let b = simulate_gbm(&bench(), &grid, Measure::Q, 11).unwrap();
        assert_eq!(a, b);
        let c = simulate_gbm(&bench(), &grid, Measure::Q, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn p_and_q_paths_differ_by_drift_factor() {
        let grid = TimeGrid::uniform(0.0, 1.0, 200).unwrap();
        let p = bench();
        let xp = simulate_gbm(&p, &grid, Measure::P, 5).unwrap();
        let xq = simulate_gbm(&p, &grid, Measure::Q, 5).unwrap();
        for i in 0..grid.n_steps() {
            let ratio_p = xp[i + 1] / xp[i];
            let ratio_q = xq[i + 1] / xq[i];
            let expected = ((p.mu - p.r) * grid.dt(i)).exp();
            assert!((ratio_p / ratio_q - expected).abs() < 1e-13);
        }
    }

    #[test]
    fn terminal_price_is_payoff() {
        let p = bench();
        assert_eq!(bs_price(1.0, 1.5, &p).unwrap(), 0.5);
        assert_eq!(bs_price(1.0, 0.5, &p).unwrap(), 0.0);
    }

    #[test]
    fn at_the_money_reference_value() {
        // 0.13269676584... from the closed form; the Monte Carlo agreement is
        // checked in the integration tests.
        let v = bs_price(0.0, 1.0, &bench()).unwrap();
        assert!((v - 0.1327).abs() < 5e-5, "{v}");
    }

    #[test]
    fn small_vol_limit_is_discounted_forward_intrinsic() {
        let p = ModelParams { sigma: 1e-6, ..bench() };
        let v = bs_price(0.3, 1.2, &p).unwrap();
        let lim = 1.2 - (-p.r * 0.7_f64).exp();
        assert!((v - lim).abs() < 1e-12);
        let p0 = ModelParams { sigma: 0.0, ..bench() };
        assert_eq!(bs_price(0.3, 1.2, &p0).unwrap(), lim);
    }

    #[test]
    fn price_domain_errors() {
        let p = bench();
        assert!(matches!(bs_price(1.1, 1.0, &p), Err(Error::Domain(_))));
        assert!(matches!(bs_price(0.5, 0.0, &p), Err(Error::Domain(_))));
        assert!(matches!(bs_greeks(1.0, 1.0, &p), Err(Error::Domain(_))));
    }

    #[test]
    fn deep_itm_greeks_limit() {
        let g = bs_greeks(0.5, 50.0, &bench()).unwrap();
        assert!((g.u_x - 1.0).abs() < 1e-12);
        assert!(g.u_xx.abs() < 1e-12);
    }

    #[test]
    fn greeks_satisfy_pricing_pde() {
        let p = bench();
        for &t in &[0.0, 0.3, 0.7, 0.99] {
            for &s in &[0.6, 0.9, 1.0, 1.1, 1.6] {
                let g = bs_greeks(t, s, &p).unwrap();
                let res = g.u_t + p.r * s * g.u_x + 0.5 * p.sigma * p.sigma * s * s * g.u_xx
                    - p.r * g.u;
                assert!(res.abs() < 1e-10 * (p.r * g.u).abs().max(1e-300), "t={t} s={s} res={res}");
            }
        }
    }

    #[test]
    fn delta_matches_central_difference() {
        let p = bench();
        let h = 1e-5;
        let fd = (bs_price(0.0, 1.0 + h, &p).unwrap() - bs_price(0.0, 1.0 - h, &p).unwrap()) / (2.0 * h);
        let g = bs_greeks(0.0, 1.0, &p).unwrap();
        assert!((fd - g.u_x).abs() < 1e-6);
    }

    #[test]
    fn dataset_terminal_condition_is_exact() {
        let p = bench();
        let d = make_dataset(&p, 2, 9).unwrap();
        assert_eq!(d.len(), 3);
        let xt = d.stock()[2];
        assert_eq!(d.option()[2], (xt - p.strike).max(0.0));
        assert_eq!(d.times()[2], p.maturity);
    }

    #[test]
    fn zero_vol_monte_carlo_has_no_error() {
        let p = ModelParams { sigma: 0.0, ..bench() };
        let e = monte_carlo_price(0.0, 1.0, &p, 100, 1).unwrap();
        assert_eq!(e.std_error, 0.0);
        assert!((e.mean - (1.0 - (-0.1_f64).exp())).abs() < 1e-12);
        let at_t = monte_carlo_price(1.0, 1.3, &bench(), 100, 1).unwrap();
        assert!((at_t.mean - 0.3).abs() < 1e-15);
        assert_eq!(at_t.std_error, 0.0);
    }

    #[test]
    fn path_pair_rejects_bad_input() {
        let g = TimeGrid::uniform(0.0, 1.0, 2).unwrap();
        assert!(PathPair::new(g.clone(), vec![1.0, 0.0, 1.0], vec![0.0; 3]).is_err());
        assert!(PathPair::new(g.clone(), vec![1.0; 2], vec![0.0; 3]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5]).is_err());
    }

    #[test]
    fn params_json_is_flat() {
        let js = bench().to_json();
        let v: serde_json::Value = serde_json::from_str(&js).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 6);
        assert_eq!(ModelParams::from_json(&js).unwrap(), bench());
        // Omitted keys take the benchmark values; unknown keys are rejected.
        assert_eq!(ModelParams::from_json(r#"{"sigma":0.2}"#).unwrap(), bench());
        assert!(ModelParams::from_json(r#"{"vol":0.3}"#).is_err());
    }
}
