use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sindy_bsde::benchmark::run_benchmark;
use sindy_bsde::bsde::discover;
use sindy_bsde::diffusion::{extract_brownian, fit_sigma};
use sindy_bsde::generate::generate_paths;
use sindy_bsde::ingest::{load_ticks, resample, split, write_fixture, ResampleSpec};
use sindy_bsde::market::{bs_greeks, make_dataset, PathPair};
use sindy_bsde::pipeline::fit_window;
use sindy_bsde::predict::online_loop;
use sindy_bsde::surface::{train_surface, SurfaceModel};

use crate::config::RunConfig;
use crate::failure::Failure;

/// What a command wrote and what it prints. `error` marks a run that wrote
/// partial outputs and still failed.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<String>,
    pub stdout: String,
    pub error: Option<Failure>,
}

struct Out<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl<'a> Out<'a> {
    fn new(dir: &'a Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>, Failure> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(path)?))
    }

    fn text(&mut self, name: &str, body: &str) -> Result<(), Failure> {
        let mut w = self.create(name)?;
        w.write_all(body.as_bytes())?;
        if !body.ends_with('\n') {
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    fn json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        self.text(name, &serde_json::to_string_pretty(value)?)
    }

    fn path(&mut self, name: &str, p: &PathPair) -> Result<(), Failure> {
        let mut w = self.create(name)?;
        p.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn done(self, stdout: String) -> Outcome {
        Outcome { files: self.files, stdout, error: None }
    }
}

fn require(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::MissingInput(format!("{} does not exist", path.display())))
    }
}

fn load_path(path: &Path) -> Result<PathPair, Failure> {
    require(path)?;
    Ok(PathPair::load(path)?)
}

fn training(data: &PathPair, cfg: &RunConfig) -> Result<PathPair, Failure> {
    Ok(split(data, &cfg.split)?.0)
}

/// `t,x,y` followed by surface values and derivatives at each point of `data`.
fn write_greeks<W: Write>(mut w: W, data: &PathPair, surface: &SurfaceModel, analytic: Option<&sindy_bsde::market::ModelParams>) -> Result<(), Failure> {
    let points: Vec<(f64, f64)> = data.times().iter().copied().zip(data.stock().iter().copied()).collect();
    let fitted = surface.eval_derivatives(&points);
    write!(w, "t,x,y,u,u_t,u_x,u_xx")?;
    if analytic.is_some() {
        write!(w, ",bs_u,bs_u_t,bs_u_x,bs_u_xx")?;
    }
    writeln!(w)?;
    for ((&(t, x), &y), g) in points.iter().zip(data.option()).zip(&fitted) {
        write!(w, "{t:.16e},{x:.16e},{y:.16e},{:.16e},{:.16e},{:.16e},{:.16e}", g.u, g.u_t, g.u_x, g.u_xx)?;
        if let Some(p) = analytic {
            let b = bs_greeks(t, x, p)?;
            write!(w, ",{:.16e},{:.16e},{:.16e},{:.16e}", b.u, b.u_t, b.u_x, b.u_xx)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn simulate(cfg: &RunConfig, dir: &Path) -> Result<Outcome, Failure> {
    let data = make_dataset(&cfg.params, cfg.simulate.total_steps, cfg.seed)?;
    let mut out = Out::new(dir)?;
    out.path("path.csv", &data)?;
    let n = data.len();
    Ok(out.done(format!("simulated {n} points on [0, {}]\n", cfg.params.maturity)))
}

pub fn fit(cfg: &RunConfig, dir: &Path, input: &Path) -> Result<Outcome, Failure> {
    let train = training(&load_path(input)?, cfg)?;
    let fit = train_surface(&train, &cfg.pipeline.surface)?;
    let mut out = Out::new(dir)?;
    out.text("surface.json", &fit.model.to_json())?;
    out.json("fit_report.json", &fit.report)?;
    let w = out.create("greeks.csv")?;
    write_greeks(w, &train, &fit.model, None)?;
    Ok(out.done(format!(
        "data loss {:.6e} over {} points after {} iterations\n",
        fit.report.data_loss, fit.report.n_data, fit.report.iterations
    )))
}

pub fn discover_cmd(cfg: &RunConfig, dir: &Path, input: &Path, surface: Option<&PathBuf>) -> Result<Outcome, Failure> {
    let train = training(&load_path(input)?, cfg)?;
    let p = &cfg.pipeline;
    let mut out = Out::new(dir)?;
    let (bsde, sigma, increments) = match surface {
        Some(file) => {
            require(file)?;
            let text = std::fs::read_to_string(file)?;
            let model = SurfaceModel::from_json(&text)?;
            let sigma = fit_sigma(&train, &p.sigma)?;
            let increments = extract_brownian(&train, p.r, &sigma, p.eps_div)?;
            let bsde = discover(&train, &model, &increments, &sigma, p.r, &p.library)?;
            (bsde, sigma, increments)
        }
        None => {
            let m = fit_window(&train, p, None)?;
            out.text("surface.json", &m.fit.model.to_json())?;
            out.json("fit_report.json", &m.fit.report)?;
            (m.bsde, m.sigma, m.increments)
        }
    };
    out.text("bsde.json", &bsde.to_json())?;
    out.json("sigma.json", &sigma)?;
    let mut w = out.create("increments.csv")?;
    increments.write_csv(&mut w)?;
    w.flush()?;
    out.text("brownian.json", &increments.diagnostics_json())?;
    Ok(out.done(format!("{}\n", bsde.equation)))
}

pub fn predict(cfg: &RunConfig, dir: &Path, input: &Path) -> Result<Outcome, Failure> {
    let data = load_path(input)?;
    let n_train = training(&data, cfg)?.len();
    let run = online_loop(&data, n_train, &cfg.pipeline, &cfg.prediction, cfg.seed)?;
    let mut out = Out::new(dir)?;
    let mut w = out.create("predictions.csv")?;
    run.write_csv(&mut w)?;
    w.flush()?;
    out.json("summary.json", &run.summary)?;
    let s = &run.summary;
    Ok(out.done(format!(
        "rmse {:.6e} coverage {:.4} over {} scored steps ({} skips, {} retrains)\n",
        s.rmse, s.coverage, s.n_scored, s.n_skips, s.n_retrains
    )))
}

pub fn generate(cfg: &RunConfig, dir: &Path, input: &Path) -> Result<Outcome, Failure> {
    let train = training(&load_path(input)?, cfg)?;
    let model = fit_window(&train, &cfg.pipeline, None)?;
    let generation = generate_paths(&train, &model, &cfg.pipeline, &cfg.generation)?;
    let mut out = Out::new(dir)?;
    out.text("bsde.json", &model.bsde.to_json())?;
    let sub = dir.join("paths");
    generation.write_dir(&sub)?;
    out.files.extend(generation.manifest().files.iter().map(|f| format!("paths/{f}")));
    out.files.push("paths/manifest.json".into());
    let truncated = generation.paths.iter().filter(|p| p.truncated).count();
    Ok(out.done(format!(
        "{}\ngenerated {} paths, {} truncated\n",
        model.bsde.equation,
        generation.paths.len(),
        truncated
    )))
}

pub fn ingest(cfg: &RunConfig, dir: &Path, input: &Path) -> Result<Outcome, Failure> {
    require(input)?;
    let schema = &cfg.ingest.schema;
    let raw = load_ticks(input, schema)?;
    let path = match cfg.ingest.resample {
        Some(m) => {
            let spec = ResampleSpec::relative(&raw, m.interval, m.max_gap);
            resample(&raw, &spec)?
        }
        None => raw,
    };
    let (train, test) = split(&path, &cfg.split)?;
    let mut out = Out::new(dir)?;
    out.path("path.csv", &path)?;
    out.path("train.csv", &train)?;
    out.path("test.csv", &test)?;
    Ok(out.done(format!("{} points: {} train, {} test\n", path.len(), train.len(), test.len())))
}

pub fn fixture(cfg: &RunConfig, dir: &Path) -> Result<Outcome, Failure> {
    let mut out = Out::new(dir)?;
    let mut w = out.create("ticks.csv")?;
    let schema = write_fixture(&mut w, &cfg.fixture, &cfg.ingest.schema)?;
    w.flush()?;
    out.json("schema.json", &schema)?;
    let mut follow = cfg.clone();
    follow.ingest.schema = schema;
    out.json("run_config.json", &follow)?;
    Ok(out.done("wrote ticks.csv with its schema and a matching run_config.json\n".into()))
}

pub fn benchmark(cfg: &RunConfig, dir: &Path) -> Result<(Outcome, Vec<(String, f64)>), Failure> {
    let run = run_benchmark(&cfg.benchmark)?;
    let mut out = Out::new(dir)?;
    let report = &run.report;
    out.text("report.json", &report.to_json())?;
    out.text("report.txt", &report.render())?;
    if let (Some(model), Some(data)) = (&run.model, &run.data) {
        let n_train = report.train_steps + 1;
        let stride = (n_train / 2000).max(1);
        let idx: Vec<usize> = (0..n_train).step_by(stride).collect();
        let times: Vec<f64> = idx.iter().map(|&i| data.times()[i]).collect();
        let thin = PathPair::new(
            sindy_bsde::market::TimeGrid::new(times)?,
            idx.iter().map(|&i| data.stock()[i]).collect(),
            idx.iter().map(|&i| data.option()[i]).collect(),
        )?;
        let w = out.create("greeks.csv")?;
        write_greeks(w, &thin, &model.fit.model, Some(&cfg.benchmark.params))?;
        out.text("bsde.json", &model.bsde.to_json())?;
    }
    let timings = run.timings.iter().map(|(s, t)| (s.to_string(), *t)).collect();
    let mut outcome = out.done(report.render());
    if let Some(f) = &report.failure {
        outcome.error = Some(Failure::Model(format!("stage {} failed: {}", f.stage, f.message)));
    }
    Ok((outcome, timings))
}
