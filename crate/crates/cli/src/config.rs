use std::fs;
use std::path::Path;

use marseg::evaluation::EvalConfig;
use marseg::network::{Aggregation, NetworkConfig};
use marseg::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Network shape as written in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub context_len: usize,
    pub feature_channels: usize,
    pub strides: Vec<usize>,
    pub aggregation: Aggregation,
    pub spatial_kernel: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let d = NetworkConfig::desk_scale(5, Aggregation::Conv3d);
        NetworkSection {
            context_len: d.context_len,
            feature_channels: d.feature_channels,
            strides: d.encoder.iter().map(|s| s.stride).collect(),
            aggregation: d.aggregation,
            spatial_kernel: d.spatial_kernel,
        }
    }
}

impl NetworkSection {
    pub fn build(&self) -> Result<NetworkConfig, CliError> {
        let cfg = NetworkConfig::with_strides(
            self.context_len,
            self.feature_channels,
            &self.strides,
            self.aggregation,
            self.spatial_kernel,
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Combined config file with optional `[network]`, `[training]` and
/// `[evaluation]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkSection,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub context_len: Option<usize>,
    pub aggregation: Option<Aggregation>,
    pub kernel: Option<usize>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(t) = self.context_len {
            cfg.network.context_len = t;
        }
        if let Some(a) = self.aggregation {
            cfg.network.aggregation = a;
        }
        if let Some(k) = self.kernel {
            cfg.network.spatial_kernel = k;
        }
        if let Some(s) = self.seed {
            cfg.training.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.training.epochs = e;
        }
    }
}
