//! Architecture profiles: every free architectural choice pinned in one
//! place, mirrored by the checked-in `model_profile.json`, and hashed into
//! checkpoints so weights can never silently load into a different topology.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

use super::{QamConfig, SegNetConfig};

/// Repo-root profile file name.
pub const PROFILE_FILE: &str = "model_profile.json";

/// One named architecture profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub name: String,
    /// Square input side both networks are trained at.
    pub image_size: usize,
    pub segnet_depth: usize,
    pub segnet_base_width: usize,
    pub qam_block_widths: Vec<usize>,
    pub nonlinearity: String,
    pub normalization: String,
    pub upsample: String,
}

impl ModelProfile {
    /// Small profile for CPU-scale experiments and the test suite.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            image_size: 64,
            segnet_depth: 4,
            segnet_base_width: 16,
            qam_block_widths: vec![16, 32, 64, 64, 64],
            nonlinearity: "relu".into(),
            normalization: "none".into(),
            upsample: "nearest".into(),
        }
    }

    /// Full-scale profile for chest-radiograph runs.
    pub fn full() -> Self {
        Self {
            name: "full".into(),
            image_size: 256,
            segnet_depth: 4,
            segnet_base_width: 64,
            qam_block_widths: vec![64, 128, 256, 512, 512],
            nonlinearity: "relu".into(),
            normalization: "none".into(),
            upsample: "nearest".into(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown model profile {other:?} (expected \"desk\" or \"full\")"
            ))),
        }
    }

    /// SHA-256 of the canonical JSON encoding; stored in checkpoints and
    /// verified on load.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("profile serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    pub fn segnet_config(&self, n_classes: usize) -> SegNetConfig {
        SegNetConfig {
            in_channels: 1,
            n_classes,
            depth: self.segnet_depth,
            base_width: self.segnet_base_width,
        }
    }

    /// QAM input channels are image channels + n label channels.
    pub fn qam_config(&self, n_classes: usize) -> QamConfig {
        QamConfig { in_channels: 1 + n_classes, block_widths: self.qam_block_widths.clone() }
    }

    /// Parses the checked-in profile file (a JSON array of profiles).
    pub fn load_all(path: &Path) -> Result<Vec<Self>> {
        let raw = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| CoreError::json(path, e))
    }
}
