use std::path::{Path, PathBuf};

use dualbounds::estimands::EstimandConfig;
use dualbounds::models::PropensityMethod;
use dualbounds::pipeline::PipelineConfig;
use dualbounds::sim::SimScenario;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::CliError;

/// Column mapping of the input CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Path to the CSV, relative to the config file.
    pub input: String,
    pub outcome: String,
    pub treatment: String,
    #[serde(default)]
    pub selection: Option<String>,
    #[serde(default)]
    pub cluster: Option<String>,
    #[serde(default)]
    pub propensity: Option<String>,
    /// Covariate columns; all remaining columns when omitted.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub data: DataConfig,
    pub estimand: EstimandConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    /// Output directory, relative to the config file.
    #[serde(default)]
    pub output: Option<String>,
}

impl EstimateConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.pipeline.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.estimand.build().map_err(|e| CliError::Config(e.to_string()))?;
        if self.pipeline.propensity == PropensityMethod::Known && self.data.propensity.is_none() {
            return Err(CliError::Config(
                "pipeline.propensity = \"known\" needs a propensity column (data.propensity)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Seed applied to every scenario; scenarios keep their own when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output: Option<String>,
    pub scenarios: Vec<SimScenario>,
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.scenarios.is_empty() {
            return Err(CliError::Config("no [[scenarios]] given".into()));
        }
        for (i, sc) in self.scenarios.iter().enumerate() {
            sc.validate().map_err(|e| CliError::Config(format!("scenario {i}: {e}")))?;
        }
        Ok(())
    }

    /// Apply the seed override (flag first, then the top-level key).
    pub fn resolve_seed(&mut self, flag: Option<u64>) {
        if let Some(s) = flag.or(self.seed) {
            self.seed = Some(s);
            self.scenarios.iter_mut().for_each(|sc| sc.seed = s);
        }
    }
}

/// Parse a TOML config file.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

/// Resolve `p` against the directory holding the config file.
pub fn relative_to(config_path: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}
