//! TOML run configuration. Every section is optional and defaults to the
//! toy experiment; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tqdp_core::dynamics::{Activation, BlockDims, SystemConfig};
use tqdp_core::experiments::{auto_measure_level, DatasetSpec, RobustnessSpec, TrainingSetup};
use tqdp_core::quantization::{ActionNet, NetMode};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub n_particles: usize,
    pub d: usize,
    pub d1: usize,
    pub d2: usize,
    pub beta: f64,
    pub horizon: usize,
    pub activation: Activation,
    pub state_box: Vec<(f64, f64)>,
    pub action_bound: f64,
    pub lambda: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        let s = SystemConfig::toy();
        Self {
            n_particles: s.n_particles,
            d: s.dims.d,
            d1: s.dims.d1,
            d2: s.dims.d2,
            beta: s.beta,
            horizon: s.horizon,
            activation: s.activation,
            state_box: s.state_box,
            action_bound: s.action_bound,
            lambda: s.lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizationSection {
    /// State grid level `n`; covering radius `1/n`.
    pub state_level: usize,
    /// Measure level `ℓ`. Ignored when `measure_level_scale` is set.
    pub measure_level: u32,
    /// When set, `ℓ = scale·n^(d+1)`.
    pub measure_level_scale: Option<f64>,
    pub include_data_points: bool,
}

impl Default for QuantizationSection {
    fn default() -> Self {
        Self {
            state_level: 10,
            measure_level: 20,
            measure_level_scale: None,
            include_data_points: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Sampled,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionsSection {
    pub mode: ActionMode,
    /// Net size for `train` in sampled mode.
    pub size: usize,
    pub seed: u64,
    /// Lattice resolution `m` in grid mode.
    pub resolution: u32,
}

impl Default for ActionsSection {
    fn default() -> Self {
        Self {
            mode: ActionMode::Sampled,
            size: 100,
            seed: 0,
            resolution: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub k_train: usize,
    pub k_test: usize,
    pub seed: u64,
    pub beta_target: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetSpec::toy();
        Self {
            k_train: d.k_train,
            k_test: d.k_test,
            seed: d.seed,
            beta_target: d.beta_target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out_dir: PathBuf,
    /// Maximum number of ensembles per stage.
    pub budget: Option<usize>,
    pub levels: Vec<usize>,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub truth_size: usize,
    pub truth_seed: u64,
    pub robustness_net_size: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        let r = RobustnessSpec::toy();
        Self {
            out_dir: PathBuf::from("out"),
            budget: Some(2_000_000),
            levels: (1..=10).map(|m| 10 * m).collect(),
            sizes: r.sizes,
            seeds: r.seeds,
            truth_size: r.truth_size,
            truth_seed: r.truth_seed,
            robustness_net_size: r.net_size,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSection,
    pub quantization: QuantizationSection,
    pub actions: ActionsSection,
    pub dataset: DatasetSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.system()?;
        self.dataset_spec().validate()?;
        if self.quantization.state_level == 0 {
            return Err(CliError::Validation("quantization.state_level must be at least 1".into()));
        }
        self.measure_level()?;
        match self.actions.mode {
            ActionMode::Sampled if self.actions.size == 0 => {
                return Err(CliError::Validation("actions.size must be at least 1".into()))
            }
            ActionMode::Grid if self.actions.resolution == 0 => {
                return Err(CliError::Validation("actions.resolution must be at least 1".into()))
            }
            _ => {}
        }
        if self.run.budget == Some(0) {
            return Err(CliError::Validation("run.budget must be positive".into()));
        }
        Ok(())
    }

    pub fn system(&self) -> Result<SystemConfig, CliError> {
        let s = &self.system;
        Ok(SystemConfig {
            n_particles: s.n_particles,
            dims: BlockDims {
                d: s.d,
                d1: s.d1,
                d2: s.d2,
            },
            beta: s.beta,
            horizon: s.horizon,
            activation: s.activation,
            state_box: s.state_box.clone(),
            action_bound: s.action_bound,
            lambda: s.lambda,
        }
        .validated()?)
    }

    pub fn measure_level(&self) -> Result<u32, CliError> {
        let q = &self.quantization;
        match q.measure_level_scale {
            Some(c) => Ok(auto_measure_level(q.state_level, self.system.d, c)?),
            None if q.measure_level == 0 => {
                Err(CliError::Validation("quantization.measure_level must be at least 1".into()))
            }
            None => Ok(q.measure_level),
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_particles: self.system.n_particles,
            dim: self.system.d,
            k_train: self.dataset.k_train,
            k_test: self.dataset.k_test,
            seed: self.dataset.seed,
            beta_target: self.dataset.beta_target,
            state_box: self.system.state_box.clone(),
        }
    }

    pub fn training_setup(&self) -> Result<TrainingSetup, CliError> {
        Ok(TrainingSetup {
            sys: self.system()?,
            state_level: self.quantization.state_level,
            measure_level: self.measure_level()?,
            net_seed: self.actions.seed,
            budget: self.run.budget,
            include_data_points: self.quantization.include_data_points,
        })
    }

    pub fn net_mode(&self) -> NetMode {
        match self.actions.mode {
            ActionMode::Sampled => NetMode::Sampled { seed: self.actions.seed },
            ActionMode::Grid => NetMode::Grid {
                resolution: self.actions.resolution,
            },
        }
    }

    pub fn action_net(&self) -> Result<ActionNet, CliError> {
        Ok(ActionNet::build(&self.system()?, self.net_mode(), self.actions.size)?)
    }

    pub fn robustness_spec(&self) -> RobustnessSpec {
        RobustnessSpec {
            dataset: self.dataset_spec(),
            truth_size: self.run.truth_size,
            truth_seed: self.run.truth_seed,
            sizes: self.run.sizes.clone(),
            seeds: self.run.seeds.clone(),
            net_size: self.run.robustness_net_size,
        }
    }
}
