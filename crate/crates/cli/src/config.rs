use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use recist_core::dataio::{default_window_presets, WindowPreset};
use recist_core::eval::EvalConfig;
use recist_core::fusion::SoftNmsConfig;
use recist_core::grouping::GroupingConfig;
use recist_core::loss::FocalParams;
use recist_core::targets::{TargetConfig, DEFAULT_STRIDE};

use crate::UsageError;

/// Input resolution of axial slices fed to the detector.
pub const DEFAULT_INPUT_SIZE: u32 = 511;

/// Every tunable constant in one place. Loaded from TOML; command-line
/// flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub stride: u32,
    pub input_size: u32,
    pub targets: TargetConfig,
    pub grouping: GroupingConfig,
    pub soft_nms: SoftNmsConfig,
    pub focal: FocalParams,
    pub eval: EvalConfig,
    pub windows: Vec<WindowPreset>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stride: DEFAULT_STRIDE,
            input_size: DEFAULT_INPUT_SIZE,
            targets: TargetConfig::default(),
            grouping: GroupingConfig::default(),
            soft_nms: SoftNmsConfig::default(),
            focal: FocalParams::default(),
            eval: EvalConfig::default(),
            windows: default_window_presets(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| UsageError(e.message().to_string()).into())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.stride == 0 {
            return Err(UsageError("stride must be >= 1".into()).into());
        }
        if self.input_size == 0 {
            return Err(UsageError("input_size must be >= 1".into()).into());
        }
        self.grouping.validate()?;
        self.soft_nms.validate()?;
        self.focal.validate()?;
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            return Err(UsageError("iou threshold must lie in [0, 1]".into()).into());
        }
        if self.eval.fp_targets.is_empty() || self.eval.fp_targets.iter().any(|f| !(*f >= 0.0)) {
            return Err(
                UsageError("fp targets must be a non-empty list of values >= 0".into()).into(),
            );
        }
        Ok(())
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}
