//! Image intensity fields and feature normalization.

use crate::{KinsegError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A `width x height` image with `channels in {1, 3}` real-valued
/// intensities. Values are raw (arbitrary scale) until
/// [`normalize_features`] maps each channel onto `[0,1]`.
///
/// Storage is row-major, channels interleaved: `values[(row*width + col)*channels + ch]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageField {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl ImageField {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(width * height >= 1);
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            width,
            height,
            channels,
            values: vec![0.0; width * height * channels],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.values[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let i = self.index(row, col, ch);
        self.values[i] = v;
    }

    /// Load an 8-bit grayscale or RGB PNG. Raw intensities are the 0-255
    /// byte values; alpha channels are rejected.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = (g.width() as usize, g.height() as usize);
                let mut out = ImageField::new(w, h, 1);
                for (x, y, p) in g.enumerate_pixels() {
                    out.set(y as usize, x as usize, 0, p.0[0] as f64);
                }
                Ok(out)
            }
            image::DynamicImage::ImageRgb8(rgb) => {
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let mut out = ImageField::new(w, h, 3);
                for (x, y, p) in rgb.enumerate_pixels() {
                    for ch in 0..3 {
                        out.set(y as usize, x as usize, ch, p.0[ch] as f64);
                    }
                }
                Ok(out)
            }
            other => {
                // Re-encode anything else (e.g. 16-bit, palette) through RGB8
                // unless it carries alpha.
                if other.color().has_alpha() {
                    return Err(KinsegError::Config(format!(
                        "{}: alpha channels are not supported",
                        path.display()
                    )));
                }
                let rgb = other.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let mut out = ImageField::new(w, h, 3);
                for (x, y, p) in rgb.enumerate_pixels() {
                    for ch in 0..3 {
                        out.set(y as usize, x as usize, ch, p.0[ch] as f64);
                    }
                }
                Ok(out)
            }
        }
    }

    /// Write as an 8-bit PNG, clamping values to `[0, 1]` and scaling by 255.
    /// Intended for normalized images and masks.
    pub fn save_png_normalized(&self, path: &Path) -> Result<()> {
        let w = self.width as u32;
        let h = self.height as u32;
        let to_byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        if self.channels == 1 {
            let mut img = image::GrayImage::new(w, h);
            for (x, y, p) in img.enumerate_pixels_mut() {
                p.0[0] = to_byte(self.get(y as usize, x as usize, 0));
            }
            img.save(path)?;
        } else {
            let mut img = image::RgbImage::new(w, h);
            for (x, y, p) in img.enumerate_pixels_mut() {
                for ch in 0..3 {
                    p.0[ch] = to_byte(self.get(y as usize, x as usize, ch));
                }
            }
            img.save(path)?;
        }
        Ok(())
    }
}

/// Record emitted when a channel is constant and cannot be normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantChannelWarning {
    pub channel: usize,
    pub value: f64,
}

/// Per-channel affine normalization `c = (C - min C) / (max C - min C)`.
///
/// Constant channels map to 0.5 everywhere and are reported as warnings
/// rather than aborting the run.
pub fn normalize_features(image: &ImageField) -> (ImageField, Vec<ConstantChannelWarning>) {
    let mut out = image.clone();
    let mut warnings = Vec::new();
    for ch in 0..image.channels {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in 0..image.pixel_count() {
            let v = image.values[p * image.channels + ch];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            let inv = 1.0 / (hi - lo);
            for p in 0..image.pixel_count() {
                let i = p * image.channels + ch;
                out.values[i] = (image.values[i] - lo) * inv;
            }
        } else {
            warnings.push(ConstantChannelWarning { channel: ch, value: lo });
            for p in 0..image.pixel_count() {
                out.values[p * image.channels + ch] = 0.5;
            }
        }
    }
    (out, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_from(values: &[f64]) -> ImageField {
        let mut img = ImageField::new(values.len(), 1, 1);
        img.values.copy_from_slice(values);
        img
    }

    #[test]
    fn affine_normalization() {
        let (n, w) = normalize_features(&image_from(&[10.0, 20.0, 30.0]));
        assert!(w.is_empty());
        assert_eq!(n.values, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_channel_warns_and_maps_to_half() {
        let (n, w) = normalize_features(&image_from(&[7.0, 7.0, 7.0]));
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].channel, 0);
        assert_eq!(n.values, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn ramp_preserves_order() {
        // Oracle: sort pixel indices by raw intensity; the normalized image
        // must induce the same order, with min at 0 and max at 1.
        let mut img = ImageField::new(40, 40, 1);
        for (i, v) in img.values.iter_mut().enumerate() {
            *v = (i as f64) * 0.37 + 5.0;
        }
        let (n, _) = normalize_features(&img);
        let mut order: Vec<usize> = (0..img.values.len()).collect();
        order.sort_by(|&a, &b| img.values[a].partial_cmp(&img.values[b]).unwrap());
        for pair in order.windows(2) {
            assert!(n.values[pair[0]] < n.values[pair[1]]);
        }
        assert_eq!(n.values[order[0]], 0.0);
        assert_eq!(n.values[*order.last().unwrap()], 1.0);
        assert!(n.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let mut img = ImageField::new(8, 5, 3);
        for (i, v) in img.values.iter_mut().enumerate() {
            *v = ((i * 13) % 256) as f64 / 255.0;
        }
        img.save_png_normalized(&path).unwrap();
        let back = ImageField::load_png(&path).unwrap();
        assert_eq!(back.width, 8);
        assert_eq!(back.height, 5);
        assert_eq!(back.channels, 3);
        for (a, b) in img.values.iter().zip(&back.values) {
            assert!((a * 255.0 - b).abs() < 0.51);
        }
    }
}
