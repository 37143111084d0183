use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Height × width × channel grid of reals in `[0, 1]`, row-major HWC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape {
                op: "image",
                left: vec![height, width, channels],
                right: vec![data.len()],
            });
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image {
            height,
            width,
            channels: 3,
            data,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let w = self.width;
        let ch = self.channels;
        self.data[(y * w + x) * ch + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Quantizes to 8 bits per channel.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    /// Rounds every value onto the 8-bit grid.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len().max(1) as f64
    }
}

/// Resampling rule used by [`Image::resize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

impl Image {
    /// Axis-aligned crop; the window is clamped to the frame.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Image {
        let y0 = y0.min(self.height.saturating_sub(1));
        let x0 = x0.min(self.width.saturating_sub(1));
        let h = height.clamp(1, self.height - y0);
        let w = width.clamp(1, self.width - x0);
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[row..row + w * self.channels]);
        }
        Image {
            height: h,
            width: w,
            channels: self.channels,
            data,
        }
    }

    /// Resamples to `height × width` with pixel-centre alignment.
    pub fn resize(&self, height: usize, width: usize, interp: Interpolation) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let ch = self.channels;
        let mut data = Vec::with_capacity(height * width * ch);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                match interp {
                    Interpolation::Nearest => {
                        let (iy, ix) = (fy.round() as usize, fx.round() as usize);
                        data.extend_from_slice(self.pixel(iy, ix));
                    }
                    Interpolation::Bilinear => {
                        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
                        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                        for c in 0..ch {
                            let top = self.at(y0, x0, c) * (1.0 - tx) + self.at(y0, x1, c) * tx;
                            let bot = self.at(y1, x0, c) * (1.0 - tx) + self.at(y1, x1, c) * tx;
                            data.push(top * (1.0 - ty) + bot * ty);
                        }
                    }
                }
            }
        }
        Image {
            height,
            width,
            channels: ch,
            data,
        }
    }

    /// 8-bit RGB PNG bytes.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(Error::invalid("PNG export needs 3 channels"));
        }
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        w.write_image_data(&self.to_u8()).map_err(|e| Error::Format(e.to_string()))?;
        w.finish().map_err(|e| Error::Format(e.to_string()))?;
        Ok(out)
    }

    /// Decodes an 8-bit PNG into RGB; grey is replicated, alpha dropped.
    pub fn from_png(bytes: &[u8]) -> Result<Image> {
        let fmt = |e: png::DecodingError| Error::Format(format!("png: {e}"));
        let mut dec = png::Decoder::new(Cursor::new(bytes));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(fmt)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Format("png too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(fmt)?;
        let (h, w) = (info.height as usize, info.width as usize);
        let src_ch = info.color_type.samples();
        let mut rgb = Vec::with_capacity(h * w * 3);
        for px in buf[..info.buffer_size()].chunks(src_ch) {
            match src_ch {
                1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
                _ => rgb.extend_from_slice(&px[..3]),
            }
        }
        Image::from_u8(h, w, 3, &rgb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stripes(n: usize) -> Image {
        let mut img = Image::filled(n, n, [0.0; 3]);
        for y in 0..n {
            for x in (0..n).step_by(2) {
                for c in 0..3 {
                    img.set(y, x, c, 1.0);
                }
            }
        }
        img
    }

    #[test]
    fn png_round_trip_is_exact_on_u8_grid() {
        let mut img = stripes(6);
        img.set(2, 3, 1, 0.3);
        img.quantize();
        let back = Image::from_png(&img.to_png().unwrap()).unwrap();
        assert_eq!(back, img);
        assert!(Image::from_png(b"not a png").is_err());
    }

    #[test]
    fn identity_resize_and_full_crop() {
        let img = stripes(8);
        assert_eq!(img.resize(8, 8, Interpolation::Bilinear), img);
        assert_eq!(img.crop(0, 0, 8, 8), img);
        assert_eq!(img.crop(6, 6, 10, 10).height, 2);
    }

    #[test]
    fn interpolation_matters_on_stripes() {
        let img = stripes(16);
        let n = img.resize(11, 11, Interpolation::Nearest);
        let b = img.resize(11, 11, Interpolation::Bilinear);
        assert!(n.mean_abs_diff(&b) > 0.0);
    }
}
