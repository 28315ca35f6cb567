use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{EpsNetKind, LogitCombine, Modulation};
use crate::error::{Error, Result};
use crate::geometry::RefState;
use crate::queries::{BevRange, DetectionFilter};
use crate::sampling::{FixedLayout, DEFAULT_FFN_HIDDEN, DEFAULT_LEARNABLE_POINTS};

use super::scene::SceneConfig;

/// Detector configuration. Unspecified JSON fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Decoder repeats N.
    pub decoder_layers: usize,
    pub n_global: usize,
    /// Queue length L (frames).
    pub queue_length: usize,
    /// Per-frame queue size S.
    pub queue_size: usize,
    /// Model width d.
    pub d: usize,
    pub heads: usize,
    pub modulation: Modulation,
    pub eps_net: EpsNetKind,
    pub logit_combine: LogitCombine,
    pub fixed_layout: FixedLayout,
    pub learnable_points: usize,
    pub levels: usize,
    pub ffn_hidden: usize,
    pub num_classes: usize,
    /// Length of the semantic vector carried by detections.
    pub semantic_dim: usize,
    /// Channels of the feature pyramid.
    pub feature_channels: usize,
    pub filter: DetectionFilter,
    pub bev_range: BevRange,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            decoder_layers: 6,
            n_global: 644,
            queue_length: 4,
            queue_size: 64,
            d: 256,
            heads: 8,
            modulation: Modulation::Gaussian,
            eps_net: EpsNetKind::Double,
            logit_combine: LogitCombine::Multiply,
            fixed_layout: FixedLayout::Faces,
            learnable_points: DEFAULT_LEARNABLE_POINTS,
            levels: 4,
            ffn_hidden: DEFAULT_FFN_HIDDEN,
            num_classes: 10,
            semantic_dim: 10,
            feature_channels: 64,
            filter: DetectionFilter::default(),
            bev_range: BevRange::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Temporal query budget `L·S`.
    pub fn temporal_budget(&self) -> usize {
        self.queue_length * self.queue_size
    }

    /// Sampling points per query after blending.
    pub fn sampling_points(&self) -> usize {
        self.fixed_layout.count().max(self.learnable_points)
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_layers == 0 {
            return Err(Error::Config(
                "at least one decoder layer is required".into(),
            ));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.d < 2 * RefState::DIM {
            return Err(Error::Config(format!(
                "d = {} is too small for the positional encoding",
                self.d
            )));
        }
        if !(1..=4).contains(&self.levels) {
            return Err(Error::Config(format!(
                "levels must be in 1..=4, got {}",
                self.levels
            )));
        }
        if self.ffn_hidden == 0 || self.feature_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "ffn_hidden, feature_channels and num_classes must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.filter.score_min)
            || !(0.0..=1.0).contains(&self.filter.depth_confidence_min)
        {
            return Err(Error::Config(
                "detection filter thresholds must lie in [0, 1]".into(),
            ));
        }
        self.bev_range.validate()
    }
}

/// Top-level JSON accepted by `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub scene: SceneConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.pipeline.validate()?;
        cfg.scene.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.temporal_budget(), 256);
        assert_eq!(c.sampling_points(), 13);
        assert_eq!((c.n_global, c.decoder_layers, c.ffn_hidden), (644, 6, 2048));
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_and_validation() {
        let c: RunConfig =
            serde_json::from_str(r#"{"pipeline": {"d": 64, "modulation": "laplacian"}}"#).unwrap();
        assert_eq!(c.pipeline.d, 64);
        assert_eq!(c.pipeline.modulation, Modulation::Laplacian);
        assert_eq!(c.pipeline.n_global, 644);
        assert!(serde_json::from_str::<RunConfig>(r#"{"pipeline": {"dd": 64}}"#).is_err());
        let bad = PipelineConfig {
            heads: 7,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig {
            decoder_layers: 0,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
