use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Architecture hyper-parameters.
///
/// The defaults describe the full-width network (pyramid widths 256/512/1024,
/// 20 disease classes, six anatomy classes); [`ModelConfig::desk`] shrinks it for
/// CPU training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_disease_classes: usize,
    /// Named anatomy classes. An implicit background class is added on top.
    pub num_anatomy_classes: usize,
    /// `[height, width]` in pixels; both multiples of 32.
    pub input_size: [usize; 2],
    /// 1 for grayscale; 3 replicates the grayscale channel.
    pub input_channels: usize,
    /// Unscaled P3/P4/P5 widths.
    pub pyramid_channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Unscaled width of the detection head and the segmentation convolutions.
    pub head_channels: usize,
    /// 3x3 blocks per head branch.
    pub head_depth: usize,
    pub width_multiplier: f64,
    pub depth_multiplier: f64,
    /// Concatenate structural context into the classification branch.
    pub context_fusion: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_disease_classes: 20,
            num_anatomy_classes: 6,
            input_size: [256, 256],
            input_channels: 1,
            pyramid_channels: vec![256, 512, 1024],
            strides: vec![8, 16, 32],
            head_channels: 256,
            head_depth: 3,
            width_multiplier: 1.0,
            depth_multiplier: 1.0,
            context_fusion: true,
            seed: 0,
        }
    }
}

pub const STRIDES: [usize; 3] = [8, 16, 32];

impl ModelConfig {
    /// Narrow, shallow variant that trains on a laptop CPU.
    pub fn desk(input_size: [usize; 2], num_disease_classes: usize) -> Self {
        ModelConfig {
            num_disease_classes,
            input_size,
            width_multiplier: 0.125,
            depth_multiplier: 0.33,
            head_depth: 2,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be positive multiples of 32"
            )));
        }
        if self.num_disease_classes == 0 {
            return Err(Error::Config("num_disease_classes must be at least 1".into()));
        }
        if self.num_anatomy_classes == 0 {
            return Err(Error::Config("num_anatomy_classes must be at least 1".into()));
        }
        if self.num_anatomy_classes + 1 > u8::MAX as usize {
            return Err(Error::Config("too many anatomy classes for 8-bit masks".into()));
        }
        if self.pyramid_channels.len() != 3 || self.pyramid_channels.contains(&0) {
            return Err(Error::Config(
                "pyramid_channels must have exactly three positive entries".into(),
            ));
        }
        if self.strides.len() != 3 || !self.strides.windows(2).all(|s| s[0] < s[1]) {
            return Err(Error::Config(
                "strides must have exactly three strictly increasing entries".into(),
            ));
        }
        if self.strides != STRIDES {
            return Err(Error::Config(format!(
                "the backbone produces strides {STRIDES:?}, got {:?}",
                self.strides
            )));
        }
        if !(self.input_channels == 1 || self.input_channels == 3) {
            return Err(Error::Config("input_channels must be 1 or 3".into()));
        }
        for (name, m) in [
            ("width_multiplier", self.width_multiplier),
            ("depth_multiplier", self.depth_multiplier),
        ] {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {m}")));
            }
        }
        if self.head_channels == 0 || self.head_depth == 0 {
            return Err(Error::Config("head_channels and head_depth must be positive".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, channels: usize) -> usize {
        ((channels as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// P3/P4/P5 widths after the width multiplier.
    pub fn pyramid_widths(&self) -> [usize; 3] {
        [
            self.scaled(self.pyramid_channels[0]),
            self.scaled(self.pyramid_channels[1]),
            self.scaled(self.pyramid_channels[2]),
        ]
    }

    pub fn head_width(&self) -> usize {
        self.scaled(self.head_channels)
    }

    /// Residual blocks per backbone stage.
    pub fn stage_depth(&self) -> usize {
        ((3.0 * self.depth_multiplier).round() as usize).max(1)
    }

    /// Segmentation output channels: named anatomy classes plus background.
    pub fn seg_channels(&self) -> usize {
        self.num_anatomy_classes + 1
    }

    /// Spatial size of each pyramid level, `(h, w)`.
    pub fn level_sizes(&self) -> [(usize, usize); 3] {
        let [h, w] = self.input_size;
        STRIDES.map(|s| (h / s, w / s))
    }

    /// Spatial size of the segmentation logits (twice P3).
    pub fn seg_size(&self) -> (usize, usize) {
        let (h, w) = self.level_sizes()[0];
        (2 * h, 2 * w)
    }
}

/// The four training settings of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    DetOnly,
    SegOnly,
    JointNocontext,
    JointContext,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [
        RunMode::DetOnly,
        RunMode::SegOnly,
        RunMode::JointNocontext,
        RunMode::JointContext,
    ];

    pub fn trains_detection(self) -> bool {
        self != RunMode::SegOnly
    }

    pub fn trains_segmentation(self) -> bool {
        self != RunMode::DetOnly
    }

    pub fn uses_context(self) -> bool {
        self == RunMode::JointContext
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::DetOnly => "det-only",
            RunMode::SegOnly => "seg-only",
            RunMode::JointNocontext => "joint-nocontext",
            RunMode::JointContext => "joint-context",
        }
    }

    /// Applies the mode's wiring to a model configuration.
    pub fn configure(self, config: &mut ModelConfig) {
        config.context_fusion = self.uses_context();
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_sizes_not_divisible_by_32() {
        let cfg = ModelConfig {
            input_size: [100, 128],
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_zero_classes() {
        for cfg in [
            ModelConfig {
                num_disease_classes: 0,
                ..ModelConfig::default()
            },
            ModelConfig {
                num_anatomy_classes: 0,
                ..ModelConfig::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn rejects_malformed_pyramid() {
        let two = ModelConfig {
            pyramid_channels: vec![256, 512],
            ..ModelConfig::default()
        };
        assert!(two.validate().is_err());
        let unordered = ModelConfig {
            strides: vec![8, 32, 16],
            ..ModelConfig::default()
        };
        assert!(unordered.validate().is_err());
    }

    #[test]
    fn width_multiplier_scales_pyramid() {
        let cfg = ModelConfig {
            width_multiplier: 0.25,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.pyramid_widths(), [64, 128, 256]);
        assert_eq!(ModelConfig::default().pyramid_widths(), [256, 512, 1024]);
    }

    #[test]
    fn mode_round_trips_through_text() {
        for m in RunMode::ALL {
            assert_eq!(m.as_str().parse::<RunMode>().unwrap(), m);
        }
        assert!("both".parse::<RunMode>().is_err());
    }
}
