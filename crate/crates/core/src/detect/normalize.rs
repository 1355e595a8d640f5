use std::sync::OnceLock;

use crate::error::Result;
use crate::registry::{Registry, Strategy};

/// Maps one clip's raw scores to the values fed into AUC.
pub trait ScoreNormalizer: Strategy {
    fn normalize(&self, raw: &[f64]) -> Vec<f64>;
}

pub struct NoNormalization;

impl Strategy for NoNormalization {
    fn name(&self) -> &'static str {
        "none"
    }
    fn describe(&self) -> &'static str {
        "raw scores concatenated across clips"
    }
}

impl ScoreNormalizer for NoNormalization {
    fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.to_vec()
    }
}

/// `(s − min) / (max − min)` within each clip; constant clips map to zeros.
pub struct MinMaxPerVideo;

impl Strategy for MinMaxPerVideo {
    fn name(&self) -> &'static str {
        "per_video_minmax"
    }
    fn describe(&self) -> &'static str {
        "min-max rescaling to [0,1] within each clip"
    }
}

impl ScoreNormalizer for MinMaxPerVideo {
    fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return vec![0.0; raw.len()];
        }
        raw.iter().map(|s| (s - lo) / (hi - lo)).collect()
    }
}

pub fn registry() -> &'static Registry<dyn ScoreNormalizer> {
    static REG: OnceLock<Registry<dyn ScoreNormalizer>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg: Registry<dyn ScoreNormalizer> = Registry::new("score normalization");
        reg.register(Box::new(NoNormalization)).register(Box::new(MinMaxPerVideo));
        reg
    })
}

pub fn normalize(name: &str, raw: &[f64]) -> Result<Vec<f64>> {
    Ok(registry().get(name)?.normalize(raw))
}
