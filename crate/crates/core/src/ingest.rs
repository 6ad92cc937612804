//! Tick files to aligned path pairs: parsing under a configurable schema,
//! time normalization against the option expiry, gap-aware LOCF resampling,
//! chronological splitting, and a synthetic fixture generator with
//! market-hour gaps.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, NaiveDateTime, Weekday};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::market::{bs_price, ModelParams, PathPair, TimeGrid};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimestampFormat {
    /// Seconds since the Unix epoch, fractional allowed.
    UnixSeconds,
    UnixMillis,
    /// Carries its own offset.
    Rfc3339,
    /// A `chrono` strftime pattern without offset, read in the schema's
    /// fixed UTC offset.
    Naive { pattern: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TickSchema {
    pub timestamp: String,
    pub stock: String,
    pub option: String,
    pub format: TimestampFormat,
    /// Offset applied to naive timestamps, in minutes east of UTC.
    pub utc_offset_minutes: i32,
    /// Option expiration in the same format as the timestamps.
    pub expiry: String,
    /// Normalized time assigned to the expiry.
    pub horizon: f64,
}

impl Default for TickSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            stock: "stock".into(),
            option: "option".into(),
            format: TimestampFormat::Naive { pattern: "%Y-%m-%d %H:%M:%S".into() },
            utc_offset_minutes: -300,
            expiry: "2025-07-18 16:00:00".into(),
            horizon: 1.0,
        }
    }
}

const NANOS: i64 = 1_000_000_000;

impl TickSchema {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return invalid("horizon must be positive");
        }
        let names = [&self.timestamp, &self.stock, &self.option];
        if names.iter().any(|n| n.is_empty()) {
            return invalid("column names must be nonempty");
        }
        if names[0] == names[1] || names[0] == names[2] || names[1] == names[2] {
            return invalid("timestamp, stock and option columns must differ");
        }
        Ok(())
    }

    /// Nanoseconds since the Unix epoch, UTC.
    pub fn parse_timestamp(&self, s: &str) -> std::result::Result<i64, String> {
        let s = s.trim();
        let nanos = match &self.format {
            TimestampFormat::UnixSeconds => {
                let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number of seconds"))?;
                if !v.is_finite() {
                    return Err(format!("`{s}` is not finite"));
                }
                (v * NANOS as f64).round() as i64
            }
            TimestampFormat::UnixMillis => {
                let v: i64 = s.parse().map_err(|_| format!("`{s}` is not an integer of milliseconds"))?;
                v.checked_mul(1_000_000).ok_or_else(|| format!("`{s}` out of range"))?
            }
            TimestampFormat::Rfc3339 => DateTime::parse_from_rfc3339(s)
                .map_err(|e| format!("`{s}`: {e}"))?
                .timestamp_nanos_opt()
                .ok_or_else(|| format!("`{s}` out of range"))?,
            TimestampFormat::Naive { pattern } => {
                let local = NaiveDateTime::parse_from_str(s, pattern).map_err(|e| format!("`{s}`: {e}"))?;
                let utc = local - Duration::minutes(self.utc_offset_minutes as i64);
                utc.and_utc().timestamp_nanos_opt().ok_or_else(|| format!("`{s}` out of range"))?
            }
        };
        Ok(nanos)
    }

    fn format_naive(&self, at: NaiveDateTime) -> String {
        match &self.format {
            TimestampFormat::Naive { pattern } => at.format(pattern).to_string(),
            TimestampFormat::Rfc3339 => {
                let off = chrono::FixedOffset::east_opt(self.utc_offset_minutes * 60).expect("offset in range");
                let utc = at - Duration::minutes(self.utc_offset_minutes as i64);
                utc.and_utc().with_timezone(&off).to_rfc3339()
            }
            TimestampFormat::UnixSeconds | TimestampFormat::UnixMillis => {
                let utc = at - Duration::minutes(self.utc_offset_minutes as i64);
                let ns = utc.and_utc().timestamp_nanos_opt().expect("timestamp in range");
                match self.format {
                    TimestampFormat::UnixMillis => (ns / 1_000_000).to_string(),
                    _ => format!("{}", ns as f64 / NANOS as f64),
                }
            }
        }
    }
}

/// One parsed tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tick {
    pub nanos: i64,
    pub stock: f64,
    pub option: f64,
}

/// Parses every row, sorts by timestamp and keeps the last row of each
/// timestamp in file order. Row numbers in errors count data rows from 1.
pub fn read_ticks<R: Read>(reader: R, schema: &TickSchema) -> Result<Vec<Tick>> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column `{name}` missing from header {headers:?}")))
    };
    let (ct, cx, cy) = (column(&schema.timestamp)?, column(&schema.stock)?, column(&schema.option)?);
    let mut ticks = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        let get = |k: usize| rec.get(k).ok_or_else(|| Error::Parse { row, message: format!("missing field {k}") });
        let nanos = schema.parse_timestamp(get(ct)?).map_err(|message| Error::Parse { row, message })?;
        let number = |k: usize, what: &str| -> Result<f64> {
            let s = get(k)?;
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse { row, message: format!("{what} `{s}` is not a finite number") })
        };
        let stock = number(cx, "stock")?;
        let option = number(cy, "option")?;
        if stock <= 0.0 || option < 0.0 {
            return Err(Error::Parse { row, message: format!("stock {stock} or option {option} out of range") });
        }
        ticks.push(Tick { nanos, stock, option });
    }
    // Stable, so equal timestamps stay in file order and the last survives.
    ticks.sort_by_key(|t| t.nanos);
    let mut out: Vec<Tick> = Vec::with_capacity(ticks.len());
    for t in ticks {
        match out.last_mut() {
            Some(last) if last.nanos == t.nanos => *last = t,
            _ => out.push(t),
        }
    }
    Ok(out)
}

/// Maps ticks to normalized time `horizon·(τ − τ₀)/(expiry − τ₀)`, where τ₀
/// is the first tick.
pub fn ticks_to_path(ticks: &[Tick], schema: &TickSchema) -> Result<PathPair> {
    let first = ticks.first().ok_or_else(|| Error::Config("tick file has no data rows".into()))?;
    let expiry = schema
        .parse_timestamp(&schema.expiry)
        .map_err(|m| Error::Config(format!("expiry: {m}")))?;
    let last = ticks[ticks.len() - 1].nanos;
    if expiry <= last {
        return invalid("expiry must fall after the last tick");
    }
    let span = (expiry - first.nanos) as f64;
    let t: Vec<f64> = ticks.iter().map(|k| schema.horizon * (k.nanos - first.nanos) as f64 / span).collect();
    PathPair::new(
        TimeGrid::new(t)?,
        ticks.iter().map(|k| k.stock).collect(),
        ticks.iter().map(|k| k.option).collect(),
    )
}

pub fn load_ticks(path: &Path, schema: &TickSchema) -> Result<PathPair> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    ticks_to_path(&read_ticks(f, schema)?, schema)
}

/// Indices `i` whose step `t[i] → t[i+1]` exceeds `factor` times `reference`.
pub fn gap_indices(grid: &TimeGrid, factor: f64, reference: f64) -> Vec<usize> {
    grid.increments()
        .iter()
        .enumerate()
        .filter(|(_, dt)| **dt > factor * reference)
        .map(|(i, _)| i)
        .collect()
}

/// Grid spacing and segmentation threshold, both in normalized time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleSpec {
    pub interval: f64,
    /// A step longer than this splits the path into independent segments.
    pub max_gap: f64,
}

impl ResampleSpec {
    /// Both values as multiples of the path's median step.
    pub fn relative(path: &PathPair, interval_multiple: f64, gap_multiple: f64) -> Self {
        let med = if path.len() > 1 { path.grid().median_dt() } else { 1.0 };
        Self { interval: interval_multiple * med, max_gap: gap_multiple * med }
    }
}

/// Last-observation-carried-forward sampling on `s₀ + k·h` within each
/// segment, plus the segment's last observation. A grid time within
/// `1e-9·h` of an observation takes that observation's time exactly, which
/// makes resampling at a path's own spacing the identity.
pub fn resample(path: &PathPair, spec: &ResampleSpec) -> Result<PathPair> {
    let h = spec.interval;
    if !(h > 0.0 && h.is_finite()) {
        return invalid("resample interval must be positive");
    }
    if !(spec.max_gap > 0.0) {
        return invalid("max_gap must be positive");
    }
    let times = path.times();
    let mut cuts = vec![0];
    cuts.extend(gap_indices(path.grid(), 1.0, spec.max_gap).iter().map(|i| i + 1));
    cuts.push(path.len());
    let snap = 1e-9 * h;
    let (mut t, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for seg in cuts.windows(2) {
        let (lo, hi) = (seg[0], seg[1]);
        let (s0, s1) = (times[lo], times[hi - 1]);
        let mut j = lo;
        let mut k = 0usize;
        loop {
            let g = s0 + k as f64 * h;
            if g > s1 + snap {
                break;
            }
            while j + 1 < hi && times[j + 1] <= g + snap {
                j += 1;
            }
            let at = if (times[j] - g).abs() <= snap { times[j] } else { g };
            t.push(at);
            x.push(path.stock()[j]);
            y.push(path.option()[j]);
            k += 1;
        }
        if s1 > t[t.len() - 1] + snap {
            t.push(s1);
            x.push(path.stock()[hi - 1]);
            y.push(path.option()[hi - 1]);
        }
    }
    PathPair::new(TimeGrid::new(t)?, x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.8 }
    }
}

/// The first `round(fraction·N)` points train, the rest test.
pub fn split(path: &PathPair, spec: &SplitSpec) -> Result<(PathPair, PathPair)> {
    let f = spec.train_fraction;
    if !(f > 0.0 && f < 1.0) {
        return invalid("train_fraction must lie strictly between 0 and 1");
    }
    let n = path.len();
    let n_train = (f * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return invalid(format!("fraction {f} leaves an empty side for {n} points"));
    }
    Ok((path.slice(0..n_train)?, path.slice(n_train..n)?))
}

/// Synthetic tick stream: exact GBM samples at trading-session ticks with
/// overnight and weekend gaps, priced by Black–Scholes in normalized time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureConfig {
    /// Local start of the first session.
    pub start: String,
    pub trading_days: usize,
    pub session_minutes: i64,
    pub tick_seconds: i64,
    /// Every this many ticks one stale row for the same timestamp is
    /// written first; zero disables duplicates.
    pub duplicate_every: usize,
    /// Dynamics in normalized time, with the expiry at `params.maturity`.
    pub params: ModelParams,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            start: "2025-06-02 09:30:00".into(),
            trading_days: 5,
            session_minutes: 390,
            tick_seconds: 60,
            duplicate_every: 97,
            params: ModelParams::default(),
            seed: 0,
        }
    }
}

/// Local session tick times: weekdays only, `session_minutes` long.
fn session_times(cfg: &FixtureConfig, pattern: &str) -> Result<Vec<NaiveDateTime>> {
    let start = NaiveDateTime::parse_from_str(&cfg.start, pattern)
        .map_err(|e| Error::Config(format!("fixture start `{}`: {e}", cfg.start)))?;
    if cfg.tick_seconds <= 0 || cfg.session_minutes <= 0 || cfg.trading_days == 0 {
        return invalid("fixture needs positive tick, session length and day count");
    }
    let per_day = (cfg.session_minutes * 60 / cfg.tick_seconds) as usize + 1;
    let mut out = Vec::with_capacity(per_day * cfg.trading_days);
    let mut day = start;
    let mut days = 0;
    while days < cfg.trading_days {
        if !matches!(day.weekday(), Weekday::Sat | Weekday::Sun) {
            out.extend((0..per_day).map(|k| day + Duration::seconds(k as i64 * cfg.tick_seconds)));
            days += 1;
        }
        day += Duration::days(1);
    }
    Ok(out)
}

/// Writes a fixture tick CSV under `schema` and returns the schema with its
/// expiry set to the last session close plus one calendar week.
pub fn write_fixture<W: Write>(mut w: W, cfg: &FixtureConfig, schema: &TickSchema) -> Result<TickSchema> {
    cfg.params.validate()?;
    let pattern = "%Y-%m-%d %H:%M:%S";
    let local = session_times(cfg, pattern)?;
    let expiry_local = local[local.len() - 1] + Duration::days(7);
    let mut schema = schema.clone();
    schema.expiry = schema.format_naive(expiry_local);
    let stamps: Vec<String> = local.iter().map(|t| schema.format_naive(*t)).collect();
    let nanos: Vec<i64> = stamps
        .iter()
        .map(|s| schema.parse_timestamp(s).map_err(Error::Config))
        .collect::<Result<_>>()?;
    let expiry = schema.parse_timestamp(&schema.expiry).map_err(Error::Config)?;
    let p = &cfg.params;
    let span = (expiry - nanos[0]) as f64;
    let t: Vec<f64> = nanos.iter().map(|n| p.maturity * (n - nanos[0]) as f64 / span).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = p.x0;
    writeln!(w, "{},{},{}", schema.timestamp, schema.stock, schema.option)?;
    for i in 0..t.len() {
        if i > 0 {
            let dt = t[i] - t[i - 1];
            let z = crate::rng::normal(&mut rng);
            x *= ((p.mu - 0.5 * p.sigma * p.sigma) * dt + p.sigma * dt.sqrt() * z).exp();
        }
        let y = bs_price(t[i], x, p)?;
        if cfg.duplicate_every > 0 && i % cfg.duplicate_every == cfg.duplicate_every - 1 {
            writeln!(w, "{},{:.10},{:.10}", stamps[i], x * 1.01, y * 1.01)?;
        }
        writeln!(w, "{},{:.10},{:.10}", stamps[i], x, y)?;
    }
    Ok(schema)
}
