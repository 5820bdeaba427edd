//! Versioned JSON documents written by the commands.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tqdp_core::dp::OpenLoopPolicy;
use tqdp_core::dynamics::WeightAction;
use tqdp_core::experiments::Dataset;
use tqdp_core::lifting::ActionSequence;
use tqdp_core::quantization::NetMode;

use crate::config::RunConfig;
use crate::error::CliError;

pub const POLICY_FORMAT: &str = "tqdp-policy";
pub const POLICY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetDescription {
    #[serde(flatten)]
    pub mode: NetMode,
    pub size: usize,
}

/// Trained open-loop weights together with everything needed to replay them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub net: NetDescription,
    pub dataset_sha256: String,
    /// One weight tuple per layer, matrices as row lists.
    pub actions: Vec<WeightAction>,
    pub action_indices: Vec<usize>,
    /// Sparse `(atom, count)` pairs of each quantized training input.
    pub initial_counts: Vec<Vec<(u32, u32)>>,
    pub quantized_value: f64,
    pub state_counts: Vec<usize>,
}

impl PolicyFile {
    pub fn new(
        config: RunConfig,
        net: NetDescription,
        dataset_sha256: String,
        open: &OpenLoopPolicy,
        state_counts: Vec<usize>,
    ) -> Self {
        let initial_counts = open
            .initial
            .decode()
            .iter()
            .map(|m| m.entries().to_vec())
            .collect();
        Self {
            format: POLICY_FORMAT.into(),
            version: POLICY_VERSION,
            config,
            net,
            dataset_sha256,
            actions: open.actions.actions.clone(),
            action_indices: open.action_indices.clone(),
            initial_counts,
            quantized_value: open.value,
            state_counts,
        }
    }

    pub fn sequence(&self) -> ActionSequence {
        ActionSequence::new(self.actions.clone())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("policy serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let p: PolicyFile =
            serde_json::from_str(text).map_err(|e| CliError::Validation(format!("policy: {e}")))?;
        if p.format != POLICY_FORMAT || p.version != POLICY_VERSION {
            return Err(CliError::Validation(format!(
                "unsupported policy document {} v{}",
                p.format, p.version
            )));
        }
        p.config.validate()?;
        let sys = p.config.system()?;
        if p.actions.len() != sys.horizon {
            return Err(CliError::Validation(format!(
                "policy has {} layers, config horizon is {}",
                p.actions.len(),
                sys.horizon
            )));
        }
        for u in &p.actions {
            sys.check_action(u)?;
        }
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn dataset_to_json(d: &Dataset) -> String {
    let mut s = serde_json::to_string_pretty(d).expect("dataset serializes");
    s.push('\n');
    s
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, String), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let d: Dataset = serde_json::from_slice(&bytes).map_err(|e| CliError::Validation(format!("dataset: {e}")))?;
    Ok((d, sha256_hex(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub file: String,
    pub sha256: String,
    pub seed: u64,
    pub config: RunConfig,
}
