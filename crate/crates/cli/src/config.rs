//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fibergi::acquisition::{AcquisitionPlan, TransmissionOrder, DEFAULT_RESOLUTION_BITS, DEFAULT_SHIFTS};
use fibergi::fiber::{FiberConfig, FiberProfile};
use fibergi::reconstruction::Method;
use fibergi::spectroscopy::frequency_grid;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Marks errors caused by the configuration rather than by the run itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub k: u32,
    pub bit_duration_ns: f64,
    #[serde(default = "default_duty")]
    pub duty_cycle: f64,
    #[serde(default = "default_shifts")]
    pub shifts: usize,
    /// Defaults to the fewest sections covering the fiber.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sections: Option<usize>,
    #[serde(default)]
    pub order: OrderConfig,
}

fn default_duty() -> f64 {
    0.5
}

fn default_shifts() -> usize {
    DEFAULT_SHIFTS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderConfig {
    #[default]
    Interleaved,
    Blocked,
}

impl From<OrderConfig> for TransmissionOrder {
    fn from(o: OrderConfig) -> Self {
        match o {
            OrderConfig::Interleaved => TransmissionOrder::Interleaved,
            OrderConfig::Blocked => TransmissionOrder::Blocked,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DigitizerSection {
    #[serde(default = "default_bits")]
    pub resolution_bits: u32,
    /// Noise standard deviation as a fraction of the mean noiseless bucket.
    pub relative_noise: f64,
    /// Frequency at which the noise is calibrated; defaults to the segment
    /// Brillouin frequency with the strongest buckets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_mhz: Option<f64>,
}

fn default_bits() -> u32 {
    DEFAULT_RESOLUTION_BITS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub start_mhz: f64,
    pub stop_mhz: f64,
    pub step_mhz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Fiber description, relative to the directory of this file.
    pub fiber: PathBuf,
    pub plan: PlanConfig,
    /// `null` for an ideal noiseless detector.
    #[serde(default)]
    pub digitizer: Option<DigitizerSection>,
    pub sweep: SweepSpec,
    #[serde(default = "default_method")]
    pub method: String,
    /// Random pattern pairs used by `rsgi`.
    #[serde(default = "default_rsgi_pairs")]
    pub rsgi_pairs: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_method() -> String {
    "whgi".into()
}

fn default_rsgi_pairs() -> usize {
    4096
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// A config with its fiber loaded and every derived quantity checked.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub fiber_config: FiberConfig,
    pub fiber: FiberProfile,
    pub plan: AcquisitionPlan,
    pub method: Method,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_error(format!("config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!(config_error(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn method(&self) -> anyhow::Result<Method> {
        self.method
            .parse()
            .map_err(|_| config_error(format!("method: unknown method `{}` (whgi, iwht or rsgi)", self.method)))
    }

    pub fn frequencies(&self) -> anyhow::Result<Vec<f64>> {
        let s = self.sweep;
        if s.step_mhz.is_nan() || s.step_mhz <= 0.0 {
            bail!(config_error("sweep.step_mhz: must be positive"));
        }
        if s.stop_mhz.is_nan() || s.stop_mhz < s.start_mhz {
            bail!(config_error("sweep.stop_mhz: must not be below start_mhz"));
        }
        frequency_grid(s.start_mhz, s.stop_mhz, s.step_mhz).map_err(|e| config_error(format!("sweep: {e}")))
    }
}

impl Experiment {
    /// Reads a config file and the fiber it refers to.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let config = ExperimentConfig::from_json(&text).with_context(|| path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::resolve(config, base)
    }

    /// Loads the fiber relative to `base` and builds the plan.
    pub fn resolve(config: ExperimentConfig, base: &Path) -> anyhow::Result<Self> {
        let fiber_path = base.join(&config.fiber);
        let fiber_text = fs::read_to_string(&fiber_path)
            .map_err(|e| config_error(format!("fiber: {}: {e}", fiber_path.display())))?;
        let fiber_config: FiberConfig = serde_json::from_str(&fiber_text)
            .map_err(|e| config_error(format!("fiber: {}: {e}", fiber_path.display())))?;
        let fiber = FiberProfile::try_from(fiber_config.clone()).map_err(|e| config_error(format!("fiber: {e}")))?;

        let method = config.method()?;
        let p = &config.plan;
        let mut plan = AcquisitionPlan::new(p.k, p.bit_duration_ns / 1e9, p.duty_cycle)
            .with_shifts(p.shifts)
            .with_frequencies(config.frequencies()?);
        plan.order = p.order.into();
        let sections = match p.sections {
            Some(s) => s,
            None => plan.required_sections(fiber.total_length(), fiber.group_index()),
        };
        plan = plan.with_sections(sections);
        plan.validate().map_err(|e| config_error(format!("plan: {e}")))?;
        plan.check_coverage(&fiber)
            .map_err(|e| config_error(format!("plan.sections: {e}")))?;
        if method.uses_random_patterns() && config.rsgi_pairs == 0 {
            bail!(config_error("rsgi_pairs: must be at least 1"));
        }
        if let Some(d) = &config.digitizer {
            if d.relative_noise.is_nan() || d.relative_noise < 0.0 {
                bail!(config_error("digitizer.relative_noise: must be non-negative"));
            }
            if !(1..=32).contains(&d.resolution_bits) {
                bail!(config_error("digitizer.resolution_bits: must be in [1, 32]"));
            }
        }
        Ok(Self {
            config,
            fiber_config,
            fiber,
            plan,
            method,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.seed = seed;
        self
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self.config.method = method.name().into();
        self
    }

    pub fn with_output_dir(mut self, dir: PathBuf) -> Self {
        self.config.output_dir = dir;
        self
    }
}
