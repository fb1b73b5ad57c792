//! Experiment configuration: defaults, command-line overrides and JSON files.

use std::path::{Path, PathBuf};

use apc::models::{model_by_name, Distribution};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Regression variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Values and gradients at `q` points.
    SearPc,
    /// Values only at `q_a` points.
    WlsqApc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::SearPc => "sear-pc",
            Method::WlsqApc => "wlsq-apc",
        }
    }

    pub fn uses_gradients(self) -> bool {
        self == Method::SearPc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: String,
    /// Law of every input; inputs are independent and identically distributed.
    pub inputs: Distribution,
    pub n_u: usize,
    pub orders: Vec<usize>,
    pub n_o: usize,
    /// Monte Carlo pool size `n_s`.
    pub pool_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub method: Method,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: "cubic".into(),
            inputs: Distribution::bimodal_mixture(),
            n_u: 10,
            orders: vec![1, 2, 3],
            n_o: 2,
            pool_size: 10_000,
            seed: 0,
            output_dir: PathBuf::from("out"),
            method: Method::SearPc,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        model_by_name(&self.model, self.n_u.max(1)).map_err(|e| CliError::Config(e.to_string()))?;
        self.inputs
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.n_u == 0 {
            return Err(CliError::Config("n_u must be at least 1".into()));
        }
        if self.orders.is_empty() || self.orders.contains(&0) {
            return Err(CliError::Config("orders must be a non-empty list of positive degrees".into()));
        }
        if self.n_o == 0 {
            return Err(CliError::Config("n_o must be at least 1".into()));
        }
        // Density estimates need at least 100 surrogate samples.
        if self.pool_size < 100 {
            return Err(CliError::Config("pool_size must be at least 100".into()));
        }
        Ok(())
    }

    /// SHA-256 of the configuration with the output directory cleared, so
    /// that identical experiments written to different places agree.
    pub fn sha256(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    /// Replace the fields present in the JSON object `file` and keep the rest.
    pub fn overridden_by(&self, file: serde_json::Value) -> Result<Self, CliError> {
        let serde_json::Value::Object(patch) = file else {
            return Err(CliError::Config("config file must hold a JSON object".into()));
        };
        let mut merged = serde_json::to_value(self).expect("config serializes");
        let obj = merged.as_object_mut().expect("config is an object");
        for (k, v) in patch {
            obj.insert(k, v);
        }
        serde_json::from_value(merged).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Read a JSON config file.
pub fn read_config_file(path: &Path) -> Result<serde_json::Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// `multimodal`, `gev`, or a JSON distribution object.
pub fn parse_inputs(s: &str) -> Result<Distribution, String> {
    match s {
        "multimodal" | "mixture" => Ok(Distribution::bimodal_mixture()),
        "gev" | "gumbel" => Ok(Distribution::gumbel_quarter()),
        _ => serde_json::from_str(s).map_err(|e| format!("unknown input family {s:?}: {e}")),
    }
}
