use std::path::Path;

use serde::{Deserialize, Serialize};
use sindy_bsde::benchmark::{desk_surface, BenchmarkConfig, Scale};
use sindy_bsde::generate::GenerationConfig;
use sindy_bsde::ingest::{FixtureConfig, SplitSpec, TickSchema};
use sindy_bsde::market::ModelParams;
use sindy_bsde::pipeline::PipelineConfig;
use sindy_bsde::predict::PredictionConfig;

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Uniform steps over `[0, params.maturity]`.
    pub total_steps: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { total_steps: 25_000 }
    }
}

/// Optional LOCF resampling, in multiples of the ingested path's median step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleMultiples {
    pub interval: f64,
    pub max_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub schema: TickSchema,
    pub resample: Option<ResampleMultiples>,
}

/// Every knob of every subcommand. Sections a subcommand does not use are
/// ignored by it but still validated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Applied to every seeded component.
    pub seed: u64,
    pub params: ModelParams,
    pub simulate: SimulateConfig,
    /// Training prefix of an input path for fit, discover, predict and generate.
    pub split: SplitSpec,
    pub pipeline: PipelineConfig,
    pub prediction: PredictionConfig,
    pub generation: GenerationConfig,
    pub ingest: IngestConfig,
    pub fixture: FixtureConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            params: ModelParams::default(),
            simulate: SimulateConfig::default(),
            split: SplitSpec::default(),
            pipeline: PipelineConfig { surface: desk_surface(), ..Default::default() },
            prediction: PredictionConfig::default(),
            generation: GenerationConfig::default(),
            ingest: IngestConfig::default(),
            fixture: FixtureConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, Failure> {
        serde_json::from_str(text).map_err(|e| Failure::Config(format!("malformed config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::MissingInput(format!("config {}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    /// Applies command-line overrides and spreads the global seed.
    pub fn resolve(mut self, seed: Option<u64>, scale: Option<Scale>) -> Result<Self, Failure> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(scale) = scale {
            let preset = BenchmarkConfig::for_scale(scale);
            self.benchmark.scale = scale;
            self.benchmark.total_steps = preset.total_steps;
        }
        let s = self.seed;
        self.pipeline.surface.seed = s;
        self.prediction.retrain.seed = s;
        self.generation.seed = s;
        self.generation.retrain.seed = s;
        self.fixture.seed = s;
        self.benchmark.seed = s;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let checks = [
            ("params", self.params.validate()),
            ("pipeline", self.pipeline.validate()),
            ("prediction", self.prediction.validate()),
            ("generation", self.generation.validate()),
            ("ingest.schema", self.ingest.schema.validate()),
            ("benchmark", self.benchmark.validate()),
        ];
        for (section, r) in checks {
            r.map_err(|e| Failure::Config(format!("{section}: {e}")))?;
        }
        if self.simulate.total_steps < 2 {
            return Err(Failure::Config("simulate.total_steps must be at least 2".into()));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(Failure::Config("split.train_fraction must lie strictly between 0 and 1".into()));
        }
        Ok(())
    }

    /// Seeds each component ends up with.
    pub fn seeds(&self) -> std::collections::BTreeMap<&'static str, u64> {
        [
            ("simulate", self.seed),
            ("surface", self.pipeline.surface.seed),
            ("prediction", self.seed),
            ("prediction.retrain", self.prediction.retrain.seed),
            ("generation", self.generation.seed),
            ("generation.retrain", self.generation.retrain.seed),
            ("fixture", self.fixture.seed),
            ("benchmark", self.benchmark.seed),
        ]
        .into_iter()
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        for (text, key) in [
            (r#"{"sede": 1}"#, "sede"),
            (r#"{"pipeline": {"surface": {"gama": 0.1}}}"#, "gama"),
            (r#"{"prediction": {"retrain": {"lbfgs": {"max_iters": 3}}}}"#, "max_iters"),
            (r#"{"params": {"vol": 0.2}}"#, "vol"),
        ] {
            match RunConfig::from_json(text) {
                Err(Failure::Config(m)) => assert!(m.contains(key), "{m}"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn seed_reaches_every_component() {
        let cfg = RunConfig::default().resolve(Some(42), None).unwrap();
        assert!(cfg.seeds().values().all(|&s| s == 42));
    }

    #[test]
    fn scale_override_sets_the_step_count() {
        let cfg = RunConfig::default().resolve(None, Some(Scale::Paper)).unwrap();
        assert_eq!(cfg.benchmark.total_steps, 500_000);
        assert_eq!(cfg.benchmark.scale, Scale::Paper);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.prediction.retrain_stride = 0;
        assert!(matches!(cfg.resolve(None, None), Err(Failure::Config(m)) if m.starts_with("prediction")));
    }
}
