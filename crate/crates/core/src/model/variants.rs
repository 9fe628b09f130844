use super::config::{FusionMode, ModelConfig};
use crate::wbipam::WbipamMode;

/// A named network configuration for the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub cfg: ModelConfig,
    /// Initialize the encoders from single-modality pretraining.
    pub transfer: bool,
}

/// The ablation rows followed by the reference configuration, all derived from `base`.
pub fn ablation_variants(base: &ModelConfig) -> Vec<Variant> {
    let with = |name, f: &dyn Fn(&mut ModelConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Variant { name, cfg, transfer: true }
    };
    vec![
        with("no-wbipam", &|c| c.wbipam = WbipamMode::Disabled),
        with("no-window", &|c| c.wbipam = WbipamMode::NoWindow),
        with("unidirectional", &|c| c.wbipam = WbipamMode::Unidirectional),
        with("pixel-wise-fusion", &|c| c.fusion = FusionMode::PixelWise),
        with("channel-wise-fusion", &|c| c.fusion = FusionMode::ChannelWise),
        with("dp-depth-5", &|c| c.dp_depth = 5),
        with("dp-depth-4", &|c| c.dp_depth = 4),
        with("dp-depth-3", &|c| c.dp_depth = 3),
        with("dp-depth-1", &|c| c.dp_depth = 1),
        Variant { name: "no-cmtl", cfg: base.clone(), transfer: false },
        Variant { name: "full", cfg: base.clone(), transfer: true },
    ]
}
