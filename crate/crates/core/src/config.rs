//! Experiment configuration: fully defaulted, strict about unknown keys,
//! hashed for report provenance.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::builder::{BuildCaps, RunMode};
use crate::network::{DomainBox, NetworkShape};
use crate::{Error, Result};

/// One experiment: instance dimensions, bounds, GD hyperparameters, budget,
/// mode, seed, and optional sweep axes. Every field has a default; unknown
/// keys in a config file are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// input dimension d_x
    pub input_dim: usize,
    /// output dimension d_y
    pub output_dim: usize,
    /// hidden width K
    pub width: usize,
    /// layer count N (>= 2)
    pub depth: usize,
    /// in-context example count n
    pub examples: usize,
    pub activation: String,
    /// dataset scaling: ||x_i||_2 <= b_x
    pub b_x: f64,
    /// dataset scaling: ||y_i||_2 <= b_y
    pub b_y: f64,
    /// coordinate box bound of the projection domain
    pub box_b: f64,
    /// GD step size
    pub eta: f64,
    /// number of in-context GD steps L
    pub steps: usize,
    /// target gradient-approximation error
    pub eps_target: f64,
    pub seed: u64,
    /// exact | approx
    pub mode: String,
    pub max_segments: usize,
    pub max_total_heads: usize,
    /// sweep axes (cartesian product); empty lists mean "not swept"
    pub sweep_depth: Vec<usize>,
    pub sweep_width: Vec<usize>,
    pub sweep_steps: Vec<usize>,
    pub sweep_segments: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            input_dim: 2,
            output_dim: 2,
            width: 4,
            depth: 3,
            examples: 8,
            activation: "sigmoid".into(),
            b_x: 1.0,
            b_y: 1.0,
            box_b: 0.5,
            eta: 0.05,
            steps: 3,
            eps_target: 1e-2,
            seed: 17,
            mode: "approx".into(),
            max_segments: 100_000,
            max_total_heads: 100_000,
            sweep_depth: Vec::new(),
            sweep_width: Vec::new(),
            sweep_steps: Vec::new(),
            sweep_segments: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape()?;
        self.run_mode()?;
        crate::activation::Activation::from_name(&self.activation)?;
        DomainBox::new(self.box_b)?;
        if self.examples < 1 {
            return Err(Error::InvalidConfig("examples must be >= 1".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::InvalidConfig("eta must be > 0".into()));
        }
        if self.steps < 1 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if !(self.eps_target > 0.0) {
            return Err(Error::InvalidConfig("eps_target must be > 0".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> Result<NetworkShape> {
        NetworkShape::new(self.input_dim, self.output_dim, self.width, self.depth)
    }

    pub fn run_mode(&self) -> Result<RunMode> {
        self.mode.parse()
    }

    pub fn caps(&self) -> BuildCaps {
        BuildCaps {
            max_segments: self.max_segments,
            max_total_heads: self.max_total_heads,
        }
    }

    pub fn has_sweep_axes(&self) -> bool {
        !(self.sweep_depth.is_empty()
            && self.sweep_width.is_empty()
            && self.sweep_steps.is_empty()
            && self.sweep_segments.is_empty())
    }

    /// Hex digest of the canonical JSON serialization; stamped on every
    /// report row.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }
}
