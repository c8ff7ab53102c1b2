//! Optional TOML run configuration. Every key mirrors a command-line flag;
//! flags win when both are given.

use std::path::Path;

use serde::Deserialize;

use crate::commands::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    // generate
    pub family: Option<String>,
    pub n: Option<usize>,
    pub neq: Option<usize>,
    pub nineq: Option<usize>,
    pub count: Option<usize>,
    // shared
    pub seed: Option<u64>,
    pub seeds: Option<usize>,
    // training
    pub mode: Option<String>,
    pub epochs: Option<usize>,
    pub decay: Option<usize>,
    pub soft_epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub mu_upper: Option<f64>,
    pub mu_lower: Option<f64>,
    pub grad_clip: Option<f64>,
    pub samples: Option<usize>,
    // repair
    pub tol: Option<f64>,
    pub lambda: Option<f64>,
    pub max_iters: Option<usize>,
    // evaluation
    pub tol_sweep: Option<Vec<f64>>,
    pub eval_max_iters: Option<usize>,
    // rollout
    pub steps: Option<usize>,
    pub starts: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }
}
