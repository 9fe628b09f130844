use crate::error::{Error, Result};
use crate::wbipam::{Axis, WbipamConfig, WbipamMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// One weight per source and location: scores (B, H, W, 3).
    #[default]
    FeatureWise,
    /// One weight per source, location and channel: (B, H, W, 3C).
    PixelWise,
    /// One weight per source and channel from pooled context: (B, 1, 1, 3C).
    ChannelWise,
    /// No scoring; the three sources are concatenated and convolved.
    ConcatOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ScoreNorm {
    /// Convex weights across the three sources.
    #[default]
    Softmax,
    /// Raw scores.
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Width of the full-resolution stem; encoder stage `i` (stride 2^i) has
    /// `base_channels · 2^(i-1)` channels.
    pub base_channels: usize,
    /// Number of stride-2 RGB encoder stages. The decoder has as many blocks.
    pub stages: usize,
    /// Hidden-width multiplier of the inverted-residual blocks.
    pub expansion: usize,
    /// Number of DP encoder blocks; fusion happens at the first `dp_depth` strides.
    pub dp_depth: usize,
    pub window: usize,
    pub axis: Axis,
    pub wbipam: WbipamMode,
    pub scaled_attention: bool,
    pub fusion: FusionMode,
    pub score_norm: ScoreNorm,
    pub deep_supervision: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            base_channels: 16,
            stages: 6,
            expansion: 4,
            dp_depth: 2,
            window: 8,
            axis: Axis::Vertical,
            wbipam: WbipamMode::Full,
            scaled_attention: false,
            fusion: FusionMode::FeatureWise,
            score_norm: ScoreNorm::Softmax,
            deep_supervision: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small 32×32 network used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        Self { height: 32, width: 32, base_channels: 4, stages: 5, expansion: 2, window: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.stages > 8 {
            return Err(Error::config(format!("stages must be in 1..=8, got {}", self.stages)));
        }
        let f = 1usize << self.stages;
        if self.height == 0 || self.width == 0 || self.height % f != 0 || self.width % f != 0 {
            return Err(Error::config(format!(
                "input {}x{} must be a non-zero multiple of {f} for {} stages",
                self.height, self.width, self.stages
            )));
        }
        if self.base_channels < 2 {
            return Err(Error::config("base_channels must be at least 2"));
        }
        if self.decoder_channels(self.stages) == 0 {
            return Err(Error::config(format!(
                "base_channels {} too small: decoder width would reach zero",
                self.base_channels
            )));
        }
        if self.expansion == 0 {
            return Err(Error::config("expansion must be at least 1"));
        }
        if !(1..=5).contains(&self.dp_depth) || self.dp_depth > self.stages {
            return Err(Error::config(format!(
                "dp_depth must be in 1..=5 and not exceed the {} encoder stages, got {}",
                self.stages, self.dp_depth
            )));
        }
        if self.window == 0 {
            return Err(Error::config("window must be at least 1"));
        }
        Ok(())
    }

    /// Channels of RGB stage `i` (1-based, stride 2^i); stage 0 is the stem.
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i.saturating_sub(1)
    }

    /// Output channels of decoder block `j` (1-based); block 0 is the deepest encoder stage.
    pub fn decoder_channels(&self, j: usize) -> usize {
        self.stage_channels(self.stages) >> j
    }

    /// Spatial extent of encoder stage `i`.
    pub fn stage_extent(&self, i: usize) -> (usize, usize) {
        (self.height >> i, self.width >> i)
    }

    pub fn wbipam_config(&self) -> WbipamConfig {
        WbipamConfig { window: self.window, axis: self.axis, mode: self.wbipam, scaled: self.scaled_attention }
    }
}
