//! Temporally consistent augmentation: one draw per sample, applied
//! identically to the target, every context frame and the annotation.

use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Frame, TemporalSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    /// Additive brightness offset is drawn from `±brightness`.
    pub brightness: f64,
    /// Contrast factor is drawn from `1 ± contrast`.
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_probability: 0.5,
            brightness: 0.1,
            contrast: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            flip_probability: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }
}

/// One sampled transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            flip: false,
            brightness: 0.0,
            contrast: 1.0,
        }
    }

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let flip = cfg.flip_probability > 0.0 && rng.random_bool(cfg.flip_probability.min(1.0));
        let brightness = if cfg.brightness > 0.0 {
            rng.random_range(-cfg.brightness..cfg.brightness)
        } else {
            0.0
        };
        let contrast = if cfg.contrast > 0.0 {
            1.0 + rng.random_range(-cfg.contrast..cfg.contrast)
        } else {
            1.0
        };
        AugmentDraw {
            flip,
            brightness,
            contrast,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentDraw::identity()
    }

    fn apply_frame(&self, frame: &Frame) -> Frame {
        let mut img: Array3<f64> = frame.image().to_owned();
        if self.flip {
            img.invert_axis(Axis(2));
            img = img.as_standard_layout().into_owned();
        }
        if self.brightness != 0.0 || self.contrast != 1.0 {
            img.mapv_inplace(|v| ((v - 0.5) * self.contrast + 0.5 + self.brightness).clamp(0.0, 1.0));
        }
        Frame::new(img, frame.sequence_id.clone(), frame.frame_index).expect("clamped to [0, 1]")
    }

    pub fn apply(&self, sample: &TemporalSample) -> TemporalSample {
        if self.is_identity() {
            return sample.clone();
        }
        TemporalSample {
            target: self.apply_frame(&sample.target),
            context: sample.context.iter().map(|f| self.apply_frame(f)).collect(),
            annotation: sample
                .annotation
                .as_ref()
                .map(|a| if self.flip { a.flip_horizontal() } else { a.clone() }),
        }
    }
}

/// Draws one transform and applies it to the whole sample.
pub fn augment(sample: &TemporalSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> TemporalSample {
    AugmentDraw::sample(cfg, rng).apply(sample)
}
