//! Experiment bundle: one TOML file with a section per pipeline step.

use std::path::Path;

use npunas::arch::{
    build_default_supernet, default_superkernels, Expansion, HeadSpec, StemSpec, SuperkernelSpec, SupernetSpec,
};
use npunas::latency::CostModelParams;
use npunas::network::{LrSchedule, TrainConfig};
use npunas::scale::ScalingCoefficients;
use npunas::search::SearchConfig;
use npunas::synth::SynthTaskSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub width: usize,
    pub stride: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperkernelConfig {
    pub kernels: Vec<u32>,
    pub expansions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetConfig {
    pub input_resolution: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageConfig>,
    pub head: HeadSpec,
    /// Template shared by every block.
    pub superkernels: Vec<SuperkernelConfig>,
}

impl SupernetConfig {
    pub fn full_default() -> Self {
        let net = build_default_supernet();
        Self {
            input_resolution: net.input_resolution,
            stem: net.stem,
            stages: net.stages.iter().map(|s| StageConfig { width: s.width, stride: s.stride, depth: s.depth() }).collect(),
            head: net.head,
            superkernels: default_superkernels().iter().map(superkernel_config).collect(),
        }
    }

    /// Six blocks on 16×16 inputs, sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            input_resolution: 16,
            stem: StemSpec { kernel: 3, stride: 2, width: 16, in_channels: 3 },
            stages: vec![
                StageConfig { width: 16, stride: 1, depth: 2 },
                StageConfig { width: 24, stride: 2, depth: 2 },
                StageConfig { width: 32, stride: 2, depth: 2 },
            ],
            head: HeadSpec { hidden: 64, num_classes: 6 },
            superkernels: default_superkernels().iter().map(superkernel_config).collect(),
        }
    }

    pub fn build(&self) -> Result<SupernetSpec, CliError> {
        let template = self
            .superkernels
            .iter()
            .map(|sk| {
                let es = sk.expansions.iter().map(|&e| Expansion::from_f64(e)).collect::<Result<Vec<_>, _>>()?;
                SuperkernelSpec::new(sk.kernels.clone(), es)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::config(e.to_string()))?;
        let stages: Vec<(usize, usize, usize)> = self.stages.iter().map(|s| (s.width, s.stride, s.depth)).collect();
        SupernetSpec::from_template(self.stem, &stages, self.head, self.input_resolution, &template)
            .map_err(|e| CliError::config(e.to_string()))
    }
}

fn superkernel_config(sk: &SuperkernelSpec) -> SuperkernelConfig {
    SuperkernelConfig {
        kernels: sk.kernel_sizes().to_vec(),
        expansions: sk.expansions().iter().map(|e| e.as_f64()).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Latency-matched candidates trained by `baseline random-search`.
    pub count: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { count: 15 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleConfig {
    pub coefficients: ScalingCoefficients,
    pub target_latency_ms: f64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self { coefficients: ScalingCoefficients::default(), target_latency_ms: f64::MAX }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub keep_fraction: f64,
    pub se_reduction: f64,
    /// Validation images used for the dispersion metric.
    pub dispersion_samples: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            keep_fraction: npunas::postprocess::DEFAULT_KEEP_FRACTION,
            se_reduction: npunas::latency::DEFAULT_SE_REDUCTION,
            dispersion_samples: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    pub supernet: SupernetConfig,
    #[serde(default)]
    pub cost_model: CostModelParams,
    #[serde(default)]
    pub task: SynthTaskSpec,
    #[serde(default)]
    pub search: SearchConfig,
    /// Trainer used for baselines, final evaluation and dispersion.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub scale: ScaleConfig,
    #[serde(default)]
    pub postprocess: PostprocessConfig,
}

impl Config {
    pub fn full_default() -> Self {
        Self {
            seed: 0,
            supernet: SupernetConfig::full_default(),
            cost_model: CostModelParams::default(),
            task: SynthTaskSpec { num_classes: 6, ..Default::default() },
            search: SearchConfig::default(),
            train: TrainConfig::default(),
            baseline: BaselineConfig::default(),
            scale: ScaleConfig::default(),
            postprocess: PostprocessConfig::default(),
        }
    }

    pub fn desk() -> Self {
        Self {
            seed: 0,
            supernet: SupernetConfig::desk(),
            cost_model: CostModelParams::default(),
            task: SynthTaskSpec { image_size: 16, samples_per_class: 200, ..Default::default() },
            search: SearchConfig { phase1_epochs: 4, phase2_epochs: 2, batch_size: 32, ..Default::default() },
            train: TrainConfig { epochs: 4, batch_size: 32, schedule: LrSchedule::Cosine, ..Default::default() },
            baseline: BaselineConfig { count: 5 },
            scale: ScaleConfig::default(),
            postprocess: PostprocessConfig { dispersion_samples: 120, ..Default::default() },
        }
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "default" => Ok(Self::full_default()),
            "desk" => Ok(Self::desk()),
            other => Err(CliError::config(format!("unknown preset `{other}` (expected default or desk)"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = crate::io::read(path)?;
        let cfg: Config = toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Propagates the top-level seed into every section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.search.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.supernet.build()?;
        self.cost_model.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.task.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.search.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(())
    }

    /// Checks the task can feed the supernet; needed only by commands that
    /// train.
    pub fn validate_task(&self) -> Result<(), CliError> {
        if self.task.num_classes != self.supernet.head.num_classes {
            return Err(CliError::config("task.num_classes must equal supernet.head.num_classes"));
        }
        if self.task.image_size != self.supernet.input_resolution || self.task.channels != self.supernet.stem.in_channels {
            return Err(CliError::config("task image shape must match the supernet input"));
        }
        Ok(())
    }
}
