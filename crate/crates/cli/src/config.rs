use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ethena_ctl::{ModelParams, SimConfig};
use serde::Deserialize;

use crate::error::CliError;

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "ETHENA_CTL_OUT";

fn default_fh_steps() -> usize {
    1000
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

fn default_mc_ih_dt() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelParams,
    #[serde(default)]
    pub sim: SimConfig,
    /// RK4 steps for the finite-horizon coefficient grid.
    #[serde(default = "default_fh_steps")]
    pub fh_steps: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_true")]
    pub emit_plots: bool,
    /// Check name -> tolerance replacing the built-in one.
    #[serde(default)]
    pub verify_tolerances: BTreeMap<String, f64>,
    /// Truncation horizon of the discounted Monte-Carlo objective; `5 / rho`
    /// when absent.
    #[serde(default)]
    pub mc_ih_horizon: Option<f64>,
    /// Step of the discounted Monte-Carlo objective.
    #[serde(default = "default_mc_ih_dt")]
    pub mc_ih_dt: f64,
    /// Offsets added to `(alpha1, ..., alpha6)` before verification. A
    /// diagnostic hook for checking that the verifier rejects a wrong
    /// solution.
    #[serde(default)]
    pub alpha_offsets: Option<[f64; 6]>,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub paths: Option<usize>,
    pub no_plots: bool,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self, CliError> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| {
            CliError::Usage(format!(
                "{}:{}:{}: {}",
                origin.display(),
                e.line(),
                e.column(),
                e
            ))
        })?;
        config.check()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text, path)
    }

    fn check(&self) -> Result<(), CliError> {
        if self.fh_steps < 10 {
            return Err(CliError::Usage(format!("fh_steps must be at least 10, got {}", self.fh_steps)));
        }
        if !(self.mc_ih_dt > 0.0) {
            return Err(CliError::Usage(format!("mc_ih_dt must be positive, got {}", self.mc_ih_dt)));
        }
        if let Some(h) = self.mc_ih_horizon {
            if !(h > 0.0) {
                return Err(CliError::Usage(format!("mc_ih_horizon must be positive, got {h}")));
            }
        }
        self.sim.check().map_err(|e| CliError::Usage(e.to_string()))
    }

    /// Applies command-line flags, then the environment override for the
    /// output directory.
    pub fn apply(mut self, overrides: &Overrides, env_out: Option<PathBuf>) -> Result<Self, CliError> {
        if let Some(dir) = &overrides.out_dir {
            self.out_dir = dir.clone();
        }
        if let Some(dir) = env_out {
            self.out_dir = dir;
        }
        if let Some(seed) = overrides.seed {
            self.sim.seed = seed;
        }
        if let Some(steps) = overrides.steps {
            self.fh_steps = steps;
        }
        if let Some(paths) = overrides.paths {
            self.sim.n_paths = paths;
        }
        if overrides.no_plots {
            self.emit_plots = false;
        }
        self.check()?;
        Ok(self)
    }
}
