use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::args::Cli;
use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written to the output directory before any result. `invocation` and
/// `config` are enough to rerun the command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Parsed command line, with `--config` and `--out` cleared.
    pub invocation: Cli,
    /// Resolved training config, for `train`.
    pub config: Option<RunConfig>,
    pub seed: Option<u64>,
    pub checkpoint_paths: Vec<String>,
    pub out_dir: String,
    /// File names inside `out_dir`.
    pub output_paths: Vec<String>,
    pub toolkit_version: String,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(cli: &Cli, config: Option<RunConfig>, checkpoints: Vec<String>, out_dir: &Path, outputs: &[&str]) -> Self {
        let mut invocation = cli.clone();
        invocation.config = None;
        invocation.out = None;
        Self {
            subcommand: cli.command.name().to_string(),
            invocation,
            config,
            seed: cli.seed,
            checkpoint_paths: checkpoints,
            out_dir: out_dir.display().to_string(),
            output_paths: outputs.iter().map(|s| s.to_string()).collect(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::input(&path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::input("manifest", e))
    }
}
