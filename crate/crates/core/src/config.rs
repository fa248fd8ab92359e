//! Experiment configuration files.
//!
//! Configs are JSON with matrices stored row-major. Unknown fields are
//! rejected so that typos surface as usage errors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DualError, Result};
use crate::problem::ProblemData;
use crate::simulator::{Disturbance, RolloutConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub n: usize,
    /// `n * n` entries, row-major.
    pub a: Vec<f64>,
    /// `n * n` entries, row-major.
    pub s: Vec<f64>,
    pub r: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl ProblemBlock {
    pub fn build(&self) -> Result<ProblemData> {
        let n = self.n;
        if n == 0 {
            return Err(DualError::Config("n must be positive".into()));
        }
        for (name, m) in [("a", &self.a), ("s", &self.s)] {
            if m.len() != n * n {
                return Err(DualError::Config(format!("{name} has {} entries, expected {}", m.len(), n * n)));
            }
        }
        ProblemData::new(
            DMatrix::from_row_slice(n, n, &self.a),
            DMatrix::from_row_slice(n, n, &self.s),
            self.r,
            self.beta,
            self.gamma,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateBlock {
    pub b_true: Vec<f64>,
    pub horizon: usize,
    pub rollouts: usize,
    pub disturbance: Disturbance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

fn default_bellman_samples() -> usize {
    10_000
}
fn default_membership_samples() -> usize {
    100_000
}
fn default_band() -> f64 {
    1e-9
}
fn default_tele_rollouts() -> usize {
    100
}
fn default_tele_horizon() -> usize {
    50
}
fn default_tolerance() -> f64 {
    crate::bellman::DEFAULT_TOLERANCE
}
fn default_tele_tolerance() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyBlock {
    #[serde(default = "default_bellman_samples")]
    pub bellman_samples: usize,
    #[serde(default = "default_membership_samples")]
    pub membership_samples: usize,
    #[serde(default = "default_band")]
    pub membership_band: f64,
    #[serde(default = "default_tele_rollouts")]
    pub telescoping_rollouts: usize,
    #[serde(default = "default_tele_horizon")]
    pub telescoping_horizon: usize,
    /// True input vector for the telescoping rollouts; drawn from the
    /// admissible set when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_true: Option<Vec<f64>>,
    /// Bellman tolerance coefficient: `tol = tolerance (1 + |V_hat|)`.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_tele_tolerance")]
    pub telescoping_tolerance: f64,
}

impl Default for VerifyBlock {
    fn default() -> Self {
        VerifyBlock {
            bellman_samples: default_bellman_samples(),
            membership_samples: default_membership_samples(),
            membership_band: default_band(),
            telescoping_rollouts: default_tele_rollouts(),
            telescoping_horizon: default_tele_horizon(),
            b_true: None,
            tolerance: default_tolerance(),
            telescoping_tolerance: default_tele_tolerance(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyBlock>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Jsonl,
    Csv,
}

impl FromStr for OutputFormat {
    type Err = DualError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(OutputFormat::Jsonl),
            "csv" => Ok(OutputFormat::Csv),
            other => Err(DualError::Config(format!("unknown output format {other:?}"))),
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputFormat::Jsonl => "jsonl",
            OutputFormat::Csv => "csv",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub path: String,
    #[serde(default)]
    pub format: OutputFormat,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { path: "out".into(), format: OutputFormat::Jsonl }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemBlock,
    #[serde(default)]
    pub run: RunBlock,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputBlock,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DualError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DualError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact serialization, hex encoded. The output block
    /// does not affect results and is left out.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(&(&self.problem, &self.run, self.seed)).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Rollout settings for `simulate`, with the config seed.
    pub fn rollout_config(&self) -> Result<RolloutConfig> {
        let sim =
            self.run.simulate.as_ref().ok_or_else(|| DualError::Config("config has no run.simulate block".into()))?;
        Ok(RolloutConfig {
            b_true: sim.b_true.clone(),
            horizon: sim.horizon,
            disturbance: sim.disturbance.clone(),
            rollouts: sim.rollouts,
            seed: self.seed,
            x0: sim.x0.clone(),
        })
    }
}
