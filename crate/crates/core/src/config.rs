//! Declarative run configuration.
//!
//! Relative input paths are resolved against the directory of the config
//! file; the output directory is taken as given.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::placement::ClusterTopology;
use crate::predictor::NoiseModel;
use crate::profile::{line_of, LatencyProfile};
use crate::simulator::{SimConfig, Strategy, TrainingConfig};
use crate::workload::{generate_synthetic, load_trace, SynthConfig, TraceFormat, TraceLimits, WorkloadTrace};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSource {
    /// Recorded trace; when absent a synthetic one is generated.
    pub path: Option<PathBuf>,
    pub format: Option<TraceFormat>,
    pub synthetic: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub trace: TraceSource,
    pub strategies: Vec<Strategy>,
    pub tau: f64,
    pub lambda: f64,
    pub window: usize,
    pub alpha: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub baseline_actors: usize,
    /// Latency profile file; the built-in reference profile when absent.
    pub profile: Option<PathBuf>,
    /// Cluster topology file; the built-in reference cluster when absent.
    pub topology: Option<PathBuf>,
    /// Overrides the profile's price per GPU-second.
    pub rho: Option<f64>,
    /// Overrides the synthetic trace's responses per prompt.
    pub responses_per_prompt: Option<usize>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub noise: NoiseModel,
    pub b_prefill: usize,
    pub model_bytes: f64,
    pub kv_bytes_per_token: f64,
    pub migration_bytes_per_token: f64,
    pub prep_seconds: f64,
    pub learn_seconds: f64,
    pub overlap_penalty: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainingConfig::default();
        RunConfig {
            trace: TraceSource::default(),
            strategies: vec![Strategy::Elastic, Strategy::Static],
            tau: t.sim.tau,
            lambda: t.lambda,
            window: t.window,
            alpha: t.alpha,
            n_min: t.n_min,
            n_max: t.n_max,
            baseline_actors: t.baseline_actors,
            profile: None,
            topology: None,
            rho: None,
            responses_per_prompt: None,
            seed: 0,
            output_dir: PathBuf::from("out"),
            noise: t.noise,
            b_prefill: t.b_prefill,
            model_bytes: t.model_bytes,
            kv_bytes_per_token: t.kv_bytes_per_token,
            migration_bytes_per_token: t.sim.migration_bytes_per_token,
            prep_seconds: t.sim.prep_seconds,
            learn_seconds: t.sim.learn_seconds,
            overlap_penalty: t.overlap_penalty,
        }
    }
}

/// Everything a run needs, loaded and checked.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub trace: WorkloadTrace,
    pub profile: LatencyProfile,
    pub topology: ClusterTopology,
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::format(path, line_of(&text, e.span()), e.message()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.trace.path, &mut cfg.profile, &mut cfg.topology].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            sim: SimConfig {
                tau: self.tau,
                migration_bytes_per_token: self.migration_bytes_per_token,
                prep_seconds: self.prep_seconds,
                learn_seconds: self.learn_seconds,
            },
            lambda: self.lambda,
            n_min: self.n_min,
            n_max: self.n_max,
            baseline_actors: self.baseline_actors,
            window: self.window,
            alpha: self.alpha,
            noise: self.noise,
            seed: self.seed,
            b_prefill: self.b_prefill,
            model_bytes: self.model_bytes,
            kv_bytes_per_token: self.kv_bytes_per_token,
            overlap_penalty: self.overlap_penalty,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let mut synth = self.trace.synthetic.clone();
        if let Some(g) = self.responses_per_prompt {
            synth.responses_per_prompt = g;
        }
        synth
    }

    /// Checks parameter domains and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        self.training().validate()?;
        if let Some(rho) = self.rho {
            if !(rho >= 0.0 && rho.is_finite()) {
                return Err(Error::Config(format!("rho must be a non-negative number, got {rho}")));
            }
        }
        if self.responses_per_prompt == Some(0) {
            return Err(Error::Config("responses_per_prompt must be at least 1".into()));
        }
        for (what, p) in [("trace", &self.trace.path), ("profile", &self.profile), ("topology", &self.topology)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::Config(format!("{what} file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<Resolved> {
        self.validate()?;
        let mut profile = match &self.profile {
            Some(p) => LatencyProfile::load(p)?,
            None => LatencyProfile::reference(),
        };
        if let Some(rho) = self.rho {
            profile.rho = rho;
        }
        let topology = match &self.topology {
            Some(p) => ClusterTopology::load(p)?,
            None => ClusterTopology::reference(),
        };
        let trace = match &self.trace.path {
            Some(p) => {
                let format = match self.trace.format {
                    Some(f) => f,
                    None => TraceFormat::from_path(p).ok_or_else(|| {
                        Error::Config(format!("cannot tell the format of {}; set trace.format", p.display()))
                    })?,
                };
                load_trace(p, format, TraceLimits::default())?
            }
            None => generate_synthetic(&self.synth_config(), self.seed)?,
        };
        Ok(Resolved {
            trace,
            profile,
            topology,
            training: self.training(),
        })
    }
}
