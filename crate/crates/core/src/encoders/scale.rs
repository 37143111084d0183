use serde::{Deserialize, Serialize};

use super::config::{ImageEncoderConfig, TextEncoderConfig};
use crate::error::{Error, Result};

/// Multipliers that split extra compute equally between width², depth and
/// resolution².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalePlan {
    pub width_mult: f64,
    pub depth_mult: f64,
    pub resolution_mult: f64,
}

impl ScalePlan {
    /// `width_mult² · depth_mult · resolution_mult²`.
    pub fn compute(&self) -> f64 {
        self.width_mult.powi(2) * self.depth_mult * self.resolution_mult.powi(2)
    }

    /// Scaled configs with integer dimensions rounded to valid values:
    /// widths to a multiple of the head count, image size to a multiple of
    /// the patch size. Text width follows the image width multiplier; text
    /// depth stays fixed.
    pub fn apply(
        &self,
        text: &TextEncoderConfig,
        image: &ImageEncoderConfig,
    ) -> (TextEncoderConfig, ImageEncoderConfig) {
        let round_to = |x: f64, m: usize| ((x / m as f64).round() as usize).max(1) * m;
        let image = ImageEncoderConfig {
            width: round_to(image.width as f64 * self.width_mult, image.heads),
            layers: ((image.layers as f64 * self.depth_mult).round() as usize).max(1),
            image_size: round_to(image.image_size as f64 * self.resolution_mult, image.patch_size),
            ..*image
        };
        let text = TextEncoderConfig {
            width: round_to(text.width as f64 * self.width_mult, text.heads),
            ..*text
        };
        (text, image)
    }
}

/// Compute multiplier actually realized by a scaled image config.
pub fn realized_compute(base: &ImageEncoderConfig, scaled: &ImageEncoderConfig) -> f64 {
    let w = scaled.width as f64 / base.width as f64;
    let d = scaled.layers as f64 / base.layers as f64;
    let r = scaled.image_size as f64 / base.image_size as f64;
    w * w * d * r * r
}

/// Each of width², depth and resolution² gets `compute_mult^(1/3)`.
pub fn scale_plan(compute_mult: f64) -> Result<ScalePlan> {
    if !(compute_mult >= 1.0) || !compute_mult.is_finite() {
        return Err(Error::invalid(format!(
            "compute multiplier must be at least 1, got {compute_mult}"
        )));
    }
    let share = compute_mult.cbrt();
    Ok(ScalePlan {
        width_mult: share.sqrt(),
        depth_mult: share,
        resolution_mult: share.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vit_base() -> (TextEncoderConfig, ImageEncoderConfig) {
        (
            TextEncoderConfig {
                layers: 12,
                width: 512,
                heads: 8,
                context_length: 77,
                vocab_size: 49408,
            },
            ImageEncoderConfig {
                image_size: 224,
                patch_size: 16,
                layers: 12,
                width: 768,
                heads: 12,
                pre_norm: true,
            },
        )
    }

    #[test]
    fn unit_multiplier_is_identity() {
        let p = scale_plan(1.0).unwrap();
        assert_eq!((p.width_mult, p.depth_mult, p.resolution_mult), (1.0, 1.0, 1.0));
        let (t, i) = vit_base();
        assert_eq!(p.apply(&t, &i), (t, i));
    }

    #[test]
    fn four_times_compute() {
        let p = scale_plan(4.0).unwrap();
        // 4^(1/6) and 4^(1/3)
        assert!((p.width_mult - 1.259_921_049_894_873).abs() < 1e-12);
        assert!((p.depth_mult - 1.587_401_051_968_199).abs() < 1e-12);
        assert!((p.resolution_mult - p.width_mult).abs() < 1e-15);
        assert!((p.compute() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rn50x4_resolution_matches_sixth_root() {
        // 224 → 288 for the 4× model
        let ratio = 288.0 / 224.0;
        assert!((ratio - 4f64.powf(1.0 / 6.0)).abs() < 0.03);
    }

    #[test]
    fn rounded_configs_stay_within_five_percent() {
        let (t, i) = vit_base();
        for c in [1.0, 4.0, 16.0] {
            let p = scale_plan(c).unwrap();
            let (st, si) = p.apply(&t, &i);
            si.validate().unwrap();
            st.validate().unwrap();
            assert_eq!(st.layers, t.layers);
            let r = realized_compute(&i, &si);
            assert!((r / c - 1.0).abs() < 0.05, "c={c}: realized {r}");
        }
    }

    #[test]
    fn sub_unit_multiplier_rejected() {
        assert!(scale_plan(0.5).is_err());
        assert!(scale_plan(f64::NAN).is_err());
    }
}
