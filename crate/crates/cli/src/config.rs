//! TOML run configuration. Every field is optional; command-line flags
//! override file values, and unset values fall back to command defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub constants: ConstantsConfig,
    #[serde(default)]
    pub ground_state: GroundStateConfig,
    #[serde(default)]
    pub forward: ForwardConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsConfig {
    pub alpha: Option<f64>,
    pub diffusion: Option<f64>,
    pub r_tot: Option<f64>,
    pub l0: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundStateConfig {
    pub half_width: Option<f64>,
    pub step: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardConfig {
    pub k_nf: Option<f64>,
    pub k_pf: Option<f64>,
    pub branch: Option<String>,
    pub grid_step: Option<f64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub input: Option<PathBuf>,
    pub method: Option<String>,
    pub level: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub exclude_failed: Option<bool>,
    pub tol: Option<f64>,
    pub max_outer: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub quantile_normalize: Option<bool>,
    pub background: Option<bool>,
    pub standardize: Option<bool>,
    pub clamp_negative: Option<bool>,
    pub bandwidth: Option<f64>,
    pub remove_outliers: Option<bool>,
    pub outlier_half_window: Option<f64>,
    pub outlier_threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub preset: Option<String>,
    pub case: Option<u8>,
    pub method: Option<String>,
    pub sigma: Option<f64>,
    pub replicates: Option<usize>,
    pub level: Option<f64>,
    pub out: Option<PathBuf>,
}

/// First of flag, file value, default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections() {
        let c: FileConfig = toml::from_str(
            "seed = 7\n[constants]\nalpha = 1.5\n[simulate]\npreset = \"table2-case2\"\nreplicates = 10\n",
        )
        .unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.constants.alpha, Some(1.5));
        assert_eq!(c.simulate.replicates, Some(10));
        assert!(c.fit.method.is_none());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("[constants]\nbeta = 1\n").is_err());
    }

    #[test]
    fn flags_win() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None, None, 3), 3);
    }
}
