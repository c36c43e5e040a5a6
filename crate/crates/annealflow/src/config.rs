//! Run configuration file (TOML). Unknown keys are rejected.
//!
//! ```toml
//! name = "gmm"
//! seed = 0
//!
//! [target]
//! kind = "gmm40"
//!
//! [flow]            # FlowConfig: dims, layers, bins, hidden, mask, ...
//!
//! [pretrain]
//! temperature = 30.0
//! [pretrain.train]  # TrainConfig
//!
//! [annealing]
//! draws = 500000
//! resample = 500000
//! forward_steps = 5000
//! [annealing.temperatures]
//! kind = "geometric"
//! target = 1.0
//! levels = 8
//! fine_tune = 1
//! [annealing.train] # TrainConfig; `steps` is ignored
//!
//! [evaluation]
//! ```

use std::path::{Path, PathBuf};

use annealflow_core::annealing::{geometric_schedule, linear_schedule, AnnealingSchedule};
use annealflow_core::flow::FlowConfig;
use annealflow_core::targets::TargetSpec;
use annealflow_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::RunError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub target: TargetSpec,
    pub flow: FlowConfig,
    pub pretrain: PretrainConfig,
    pub annealing: AnnealingConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub temperature: f64,
    pub train: TrainConfig,
}

/// How the temperature ladder below the pretraining temperature is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TemperatureSpec {
    /// `levels` temperatures from the pretraining temperature down to
    /// `target`, then `fine_tune` repeats of `target`.
    Geometric {
        target: f64,
        levels: usize,
        #[serde(default)]
        fine_tune: usize,
    },
    Linear {
        target: f64,
        levels: usize,
        #[serde(default)]
        fine_tune: usize,
    },
    /// The full list, starting at the pretraining temperature.
    Explicit { temperatures: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealingConfig {
    pub temperatures: TemperatureSpec,
    pub draws: usize,
    pub resample: usize,
    pub forward_steps: usize,
    #[serde(default)]
    pub clip_fraction: f64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistConfig {
    pub bins: usize,
    pub ranges: [[f64; 2]; 2],
    pub reference_samples: usize,
    pub model_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub resolution: usize,
    pub ranges: [[f64; 2]; 2],
    /// Pixels per grid cell in the heatmaps.
    #[serde(default = "default_pixel_scale")]
    pub pixel_scale: usize,
    /// Free-energy span mapped onto the color ramp.
    #[serde(default = "default_free_energy_span")]
    pub free_energy_span: f64,
}

fn default_pixel_scale() -> usize {
    4
}

fn default_free_energy_span() -> f64 {
    12.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_samples")]
    pub nll_samples: usize,
    #[serde(default = "default_eval_samples")]
    pub ess_samples: usize,
    /// Weight clipping for reweighted metrics (0 disables it).
    #[serde(default)]
    pub clip_fraction: f64,
    /// Model samples used to check that every mixture mean is visited.
    #[serde(default)]
    pub coverage_samples: usize,
    #[serde(default = "default_coverage_radius")]
    pub coverage_radius: f64,
    #[serde(default)]
    pub histogram: Option<HistConfig>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
}

fn default_eval_samples() -> usize {
    1000
}

fn default_coverage_radius() -> f64 {
    3.0
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nll_samples: default_eval_samples(),
            ess_samples: default_eval_samples(),
            clip_fraction: 0.0,
            coverage_samples: 0,
            coverage_radius: default_coverage_radius(),
            histogram: None,
            grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Parent of timestamped run directories when `--out` is not given.
    #[serde(default = "default_root")]
    pub root: PathBuf,
    /// Training steps between rows of `curves.csv`.
    #[serde(default = "default_curve_interval")]
    pub curve_interval: usize,
}

fn default_root() -> PathBuf {
    PathBuf::from("runs")
}

fn default_curve_interval() -> usize {
    100
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { root: default_root(), curve_interval: default_curve_interval() }
    }
}

fn config_err(field: &str, e: impl std::fmt::Display) -> RunError {
    RunError::Config(format!("{field}: {e}"))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, RunError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(RunError::io(path))?;
        Self::from_toml_str(&text)
    }

    /// Canonical TOML text of this configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let target = self.target.build().map_err(|e| config_err("target", e))?;
        self.flow.validate().map_err(|e| config_err("flow", e))?;
        use annealflow_core::targets::TargetDensity;
        if target.dim() != self.flow.dim() {
            return Err(config_err(
                "flow.dims",
                format!("flow has {} dimensions, target has {}", self.flow.dim(), target.dim()),
            ));
        }
        self.pretrain.train.validate().map_err(|e| config_err("pretrain.train", e))?;
        if !(self.pretrain.temperature > 0.0) {
            return Err(config_err("pretrain.temperature", "must be positive"));
        }
        self.schedule().map_err(|e| config_err("annealing", e))?;
        let mut t = self.annealing.train.clone();
        t.steps = self.annealing.forward_steps;
        t.validate().map_err(|e| config_err("annealing.train", e))?;
        let ev = &self.evaluation;
        if ev.nll_samples == 0 || ev.ess_samples == 0 {
            return Err(config_err("evaluation", "sample counts must be positive"));
        }
        if !(0.0..1.0).contains(&ev.clip_fraction) {
            return Err(config_err("evaluation.clip_fraction", "must lie in [0, 1)"));
        }
        if let Some(h) = &ev.histogram {
            if h.bins == 0 || h.reference_samples == 0 || h.model_samples == 0 {
                return Err(config_err("evaluation.histogram", "bins and sample counts must be positive"));
            }
        }
        if let Some(g) = &ev.grid {
            if g.resolution == 0 || g.pixel_scale == 0 || !(g.free_energy_span > 0.0) {
                return Err(config_err("evaluation.grid", "resolution, pixel_scale and span must be positive"));
            }
        }
        if self.output.curve_interval == 0 {
            return Err(config_err("output.curve_interval", "must be positive"));
        }
        Ok(())
    }

    /// Full temperature ladder, starting at the pretraining temperature.
    pub fn temperatures(&self) -> Result<Vec<f64>, annealflow_core::Error> {
        let t0 = self.pretrain.temperature;
        let (mut temps, target, fine) = match &self.annealing.temperatures {
            TemperatureSpec::Geometric { target, levels, fine_tune } => {
                (geometric_schedule(t0, *target, *levels)?, *target, *fine_tune)
            }
            TemperatureSpec::Linear { target, levels, fine_tune } => {
                (linear_schedule(t0, *target, *levels)?, *target, *fine_tune)
            }
            TemperatureSpec::Explicit { temperatures } => {
                if temperatures.first() != Some(&t0) {
                    return Err(annealflow_core::Error::Config(
                        "explicit temperatures must start at the pretraining temperature".into(),
                    ));
                }
                return Ok(temperatures.clone());
            }
        };
        temps.extend(std::iter::repeat_n(target, fine));
        Ok(temps)
    }

    pub fn schedule(&self) -> Result<AnnealingSchedule, annealflow_core::Error> {
        let s = AnnealingSchedule {
            temperatures: self.temperatures()?,
            draws: self.annealing.draws,
            resample: self.annealing.resample,
            forward_steps: self.annealing.forward_steps,
            clip_fraction: self.annealing.clip_fraction,
        };
        s.validate()?;
        Ok(s)
    }

    /// Temperature the final model is evaluated at.
    pub fn final_temperature(&self) -> f64 {
        self.temperatures().ok().and_then(|t| t.last().copied()).unwrap_or(self.pretrain.temperature)
    }
}

/// The bundled 2-D mixture configuration with the published hyperparameters.
pub const GMM_CONFIG: &str = include_str!("../configs/gmm.toml");
/// Reduced mixture configuration for a single desktop core.
pub const GMM_DESK_CONFIG: &str = include_str!("../configs/gmm_desk.toml");
/// Circular flow on the four-well torus target.
pub const TORUS_CONFIG: &str = include_str!("../configs/torus.toml");
