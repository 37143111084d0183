//! Synthetic near-duplicate generator: crop/zoom with aspect distortion,
//! down- and up-scaling, small rotations and HSV jitter. Every stage samples
//! its own parameters, and each resize picks its interpolation at random.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Interpolation};

/// Closed sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Range { lo: v, hi: v }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn check(&self, name: &str, min: f64) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi || self.lo < min {
            return Err(Error::invalid(format!("augment range {name} = [{}, {}] is invalid", self.lo, self.hi)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Kept fraction of the side before zooming back; values above 1 clamp
    /// to the full frame.
    pub crop_zoom: Range,
    /// Width/height ratio of the crop window.
    pub aspect: Range,
    /// Degrees, counter-clockwise.
    pub rotation: Range,
    /// Intermediate size as a fraction of the original.
    pub downscale: Range,
    pub interpolations: Vec<Interpolation>,
    /// Hue shift in turns.
    pub hue: Range,
    pub saturation: Range,
    pub value: Range,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_zoom: Range::new(0.8, 1.0),
            aspect: Range::new(0.9, 1.1),
            rotation: Range::new(-6.0, 6.0),
            downscale: Range::new(0.5, 1.0),
            interpolations: vec![Interpolation::Nearest, Interpolation::Bilinear],
            hue: Range::new(-0.03, 0.03),
            saturation: Range::new(0.85, 1.15),
            value: Range::new(0.85, 1.15),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every stage pinned to its identity value.
    pub fn identity() -> Self {
        AugmentConfig {
            crop_zoom: Range::point(1.0),
            aspect: Range::point(1.0),
            rotation: Range::point(0.0),
            downscale: Range::point(1.0),
            interpolations: vec![Interpolation::Bilinear],
            hue: Range::point(0.0),
            saturation: Range::point(1.0),
            value: Range::point(1.0),
            seed: 0,
        }
    }

    /// Lighter settings used to plant duplicates.
    pub fn light() -> Self {
        AugmentConfig {
            crop_zoom: Range::new(0.9, 1.0),
            aspect: Range::new(0.95, 1.05),
            rotation: Range::new(-3.0, 3.0),
            downscale: Range::new(0.75, 1.0),
            hue: Range::new(-0.01, 0.01),
            saturation: Range::new(0.95, 1.05),
            value: Range::new(0.95, 1.05),
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.crop_zoom.check("crop_zoom", f64::MIN_POSITIVE)?;
        self.aspect.check("aspect", f64::MIN_POSITIVE)?;
        self.rotation.check("rotation", -180.0)?;
        self.downscale.check("downscale", f64::MIN_POSITIVE)?;
        self.hue.check("hue", -1.0)?;
        self.saturation.check("saturation", 0.0)?;
        self.value.check("value", 0.0)?;
        if self.interpolations.is_empty() {
            return Err(Error::invalid("no interpolation methods to choose from"));
        }
        Ok(())
    }
}

fn pick<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Interpolation {
    cfg.interpolations[rng.random_range(0..cfg.interpolations.len())]
}

/// Returns an image of the same size; identity settings give the input
/// back unchanged.
pub fn augment<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Result<Image> {
    cfg.validate()?;
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();

    let zoom = cfg.crop_zoom.sample(rng);
    let aspect = cfg.aspect.sample(rng);
    let ch = ((h as f64 * zoom / aspect.sqrt()).round() as usize).clamp(1, h);
    let cw = ((w as f64 * zoom * aspect.sqrt()).round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let interp = pick(cfg, rng);
    if (ch, cw) != (h, w) {
        out = out.crop(y0, x0, ch, cw).resize(h, w, interp);
    }

    let s = cfg.downscale.sample(rng);
    let (dh, dw) = (((h as f64 * s).round() as usize).max(1), ((w as f64 * s).round() as usize).max(1));
    let (down, up) = (pick(cfg, rng), pick(cfg, rng));
    if (dh, dw) != (h, w) {
        out = out.resize(dh, dw, down).resize(h, w, up);
    }

    let angle = cfg.rotation.sample(rng);
    if angle != 0.0 {
        out = rotate(&out, angle);
    }

    let (dh_, sm, vm) = (cfg.hue.sample(rng), cfg.saturation.sample(rng), cfg.value.sample(rng));
    if dh_ != 0.0 || sm != 1.0 || vm != 1.0 {
        hsv_jitter(&mut out, dh_, sm, vm);
    }
    Ok(out)
}

/// Bilinear rotation about the centre; samples outside the frame take the
/// nearest edge pixel.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    let (s, c) = degrees.to_radians().sin_cos();
    let (h, w, chn) = (img.height, img.width, img.channels);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            // inverse map output → source
            let sx = (c * dx - s * dy + cx - 0.5).clamp(0.0, (w - 1) as f64);
            let sy = (s * dx + c * dy + cy - 0.5).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
            for k in 0..chn {
                let top = img.at(y0, x0, k) * (1.0 - tx) + img.at(y0, x1, k) * tx;
                let bot = img.at(y1, x0, k) * (1.0 - tx) + img.at(y1, x1, k) * tx;
                data.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    Image {
        height: h,
        width: w,
        channels: chn,
        data,
    }
}

pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

fn hsv_jitter(img: &mut Image, dh: f64, sm: f64, vm: f64) {
    if img.channels != 3 {
        return;
    }
    for px in img.data.chunks_exact_mut(3) {
        let [h, s, v] = rgb_to_hsv([px[0], px[1], px[2]]);
        let rgb = hsv_to_rgb([h + dh, (s * sm).clamp(0.0, 1.0), (v * vm).clamp(0.0, 1.0)]);
        px.copy_from_slice(&rgb);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::datakit::random_scene;

    fn scene(seed: u64) -> Image {
        random_scene(32, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn identity_is_exact() {
        let img = scene(1);
        let out = augment(&img, &AugmentConfig::identity(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn same_seed_same_output() {
        let img = scene(2);
        let cfg = AugmentConfig::default();
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height, a.width), (32, 32));
        assert_ne!(a, img);
    }

    #[test]
    fn stripes_differ_between_interpolations() {
        let mut img = Image::filled(32, 32, [0.0; 3]);
        for y in 0..32 {
            for x in (0..32).step_by(2) {
                for c in 0..3 {
                    img.set(y, x, c, 1.0);
                }
            }
        }
        let only = |i| AugmentConfig {
            downscale: Range::point(0.7),
            interpolations: vec![i],
            ..AugmentConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = augment(&img, &only(Interpolation::Nearest), &mut rng).unwrap();
        let b = augment(&img, &only(Interpolation::Bilinear), &mut rng).unwrap();
        assert!(a.mean_abs_diff(&b) > 0.0);
    }

    #[test]
    fn oversized_crop_clamps_to_frame() {
        let img = scene(3);
        let cfg = AugmentConfig {
            crop_zoom: Range::point(1.5),
            ..AugmentConfig::identity()
        };
        assert_eq!(augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), img);
    }

    #[test]
    fn invalid_ranges_rejected() {
        let cfg = AugmentConfig {
            rotation: Range::new(5.0, -5.0),
            ..AugmentConfig::default()
        };
        assert!(augment(&scene(0), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let cfg = AugmentConfig {
            interpolations: vec![],
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for k in 0..3 {
                assert!((back[k] - rgb[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let img = scene(4);
        let r = rotate(&img, 90.0);
        // a quarter turn of a square grid maps pixel centres onto centres
        let back = rotate(&rotate(&rotate(&r, 90.0), 90.0), 90.0);
        assert!(back.mean_abs_diff(&img) < 1e-9);
    }
}
