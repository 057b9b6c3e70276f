//! Run configuration: a TOML file with a `[federation]` and a `[data]`
//! section plus the output directory. Every key is optional and falls back
//! to its default.

use std::fs;
use std::path::{Path, PathBuf};

use fedbcs::federation::FederationConfig;
use fedbcs::synthdata::DataSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_OUT: &str = "runs/fedbcs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory for metrics and checkpoints.
    pub out: PathBuf,
    pub federation: FederationConfig,
    pub data: DataSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from(DEFAULT_OUT),
            federation: FederationConfig::default(),
            data: DataSpec::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML; errors carry the line, column and offending key.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration is always representable")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.federation
            .validate()
            .map_err(|e| CliError::Config(format!("[federation] {e}")))?;
        if self.data.styles.is_empty() {
            return Err(CliError::Config("[data] needs at least one style".into()));
        }
        if self.data.image_size < 8 || !self.data.image_size.is_power_of_two() {
            return Err(CliError::Config(format!(
                "[data] image_size must be a power of two ≥ 8, got {}",
                self.data.image_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use fedbcs::federation::Method;

    use super::*;

    #[test]
    fn default_config_round_trips() {
        let config = RunConfig::default();
        let text = config.to_toml();
        assert_eq!(RunConfig::parse(&text).unwrap(), config);
    }

    #[test]
    fn edited_config_round_trips() {
        let mut config = RunConfig::default();
        config.federation.method = Method::FedbcsNoCdpa;
        config.federation.lambda_c = 0.125;
        config.federation.seed = 42;
        config.data.styles.truncate(2);
        config.data.styles[1].amplitude_gain = [0.1, 0.2, 0.3, 1e-7];
        config.out = PathBuf::from("somewhere/else");
        let once = RunConfig::parse(&config.to_toml()).unwrap();
        assert_eq!(once, config);
        assert_eq!(RunConfig::parse(&once.to_toml()).unwrap(), once);
    }

    #[test]
    fn partial_files_fall_back_to_defaults() {
        let config = RunConfig::parse("[federation]\nrounds = 3\nmethod = \"fedavg\"\n").unwrap();
        assert_eq!(config.federation.rounds, 3);
        assert_eq!(config.federation.method, Method::Fedavg);
        assert_eq!(config.data, DataSpec::default());
    }

    #[test]
    fn errors_name_the_line_and_field() {
        let err = RunConfig::parse("[federation]\nrounds = 3\nlearning_rat = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("learning_rat"), "{msg}");

        let err = RunConfig::parse("[federation]\nrounds = \"many\"\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        let err = RunConfig::parse("[federation]\nrounds = 0\n").unwrap_err();
        assert!(err.to_string().contains("rounds"), "{err}");
    }
}
