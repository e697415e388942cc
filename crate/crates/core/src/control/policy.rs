//! Policy files.
//!
//! ```toml
//! [slo]
//! service_id = "mnv1"
//! slo_p99 = 100.0            # ms
//! boundary = 6600.0          # pages/s
//! threshold_fraction = 0.7   # optional
//! consecutive_cycles = 5     # optional
//! sample_interval = 1000.0   # ms, optional
//!
//! [scale]
//! service_id = "mnv1"
//! target_utilization = 0.6
//! min_replicas = 1
//! max_replicas = 6
//! cooldown = 10000.0         # ms
//! period = 5000.0            # ms, optional
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ControlError, ScalePolicy, SloPolicy};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slo: Option<SloPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<ScalePolicy>,
}

impl PolicyFile {
    pub fn parse(text: &str) -> Result<Self, ControlError> {
        let file: PolicyFile = toml::from_str(text).map_err(|e| ControlError::InvalidPolicy(e.to_string()))?;
        if let Some(s) = &file.slo {
            s.validate()?;
        }
        if let Some(s) = &file.scale {
            s.validate()?;
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, ControlError> {
        let text = std::fs::read_to_string(path).map_err(|e| ControlError::InvalidPolicy(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("policy serializes")
    }
}
