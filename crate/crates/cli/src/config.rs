use std::path::Path;

use hevopt::orchestrator::ControllerConfig;
use hevopt::VehicleParams;
use serde::{Deserialize, Serialize};

/// Run configuration: vehicle parameters, controller settings and the DP
/// grid. Every section and field is optional; missing ones take defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub vehicle: VehicleParams,
    pub controller: ControllerConfig,
    pub dp: DpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    pub n_e: usize,
    pub n_u: usize,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self { n_e: 401, n_u: 81 }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.vehicle.validate().map_err(|e| e.to_string())?;
        cfg.controller.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// Reads `path`, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                Self::parse(&text).map_err(|e| format!("{}: {e}", p.display()))
            }
        }
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}
