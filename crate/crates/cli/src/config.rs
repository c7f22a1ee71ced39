//! The experiment configuration file: one JSON document describing the
//! protocol, the K values to run, the ablation grid and the master seed.

use std::path::{Path, PathBuf};

use prlab_core::protocol::{AblationGrid, ProtocolConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random draw of `simulate` derives from it.
    pub seed: u64,
    /// K values fine-tuned and evaluated by `simulate`.
    pub shots: Vec<usize>,
    pub protocol: ProtocolConfig,
    pub ablation: AblationConfig,
    /// Output directory. Not written to `config.resolved.json`, so runs
    /// that differ only in where they write produce identical artifacts.
    #[serde(skip_serializing)]
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            shots: vec![1, 2, 3, 5, 10],
            protocol: ProtocolConfig::default(),
            ablation: AblationConfig::default(),
            output: PathBuf::from("prlab-out"),
        }
    }
}

/// Grid of the `ablate` command: one cell per (gamma, refinement, K), each
/// run for every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub gammas: Vec<f64>,
    pub refinement: Vec<bool>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            gammas: vec![0.0, 0.5],
            refinement: vec![false, true],
            shots: vec![5],
            seeds: (0..10).collect(),
        }
    }
}

impl AblationConfig {
    pub fn grid(&self) -> AblationGrid {
        AblationGrid {
            gammas: self.gammas.clone(),
            refinement: self.refinement.clone(),
            shots: self.shots.clone(),
        }
    }
}

impl ExperimentConfig {
    /// Checks every module's invariants; errors name the offending field.
    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |field: &str, msg: String| CliError::usage(format!("invalid config field `{field}`: {msg}"));
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(invalid("shots", "must be a non-empty list of K >= 1".into()));
        }
        self.protocol
            .validate()
            .map_err(|e| invalid("protocol", e.to_string()))?;
        self.ablation
            .grid()
            .validate()
            .map_err(|e| invalid("ablation", e.to_string()))?;
        if self.ablation.seeds.is_empty() {
            return Err(invalid("ablation.seeds", "must list at least one seed".into()));
        }
        Ok(())
    }

    /// Parses and validates a config document. `origin` names it in errors.
    pub fn from_json(text: &str, origin: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            let path = e.path().to_string();
            let field = if path == "." {
                String::new()
            } else {
                format!(" at `{path}`")
            };
            let (line, column) = (inner.line(), inner.column());
            let message = inner.to_string();
            let message = message
                .strip_suffix(&format!(" at line {line} column {column}"))
                .unwrap_or(&message);
            CliError::usage(format!("{origin}:{line}:{column}: invalid config{field}: {message}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a missing path yields the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => {
                let cfg = ExperimentConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                ExperimentConfig::from_json(&text, &p.display().to_string())
            }
        }
    }

    /// Pretty JSON of the fully resolved configuration.
    pub fn to_resolved_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
