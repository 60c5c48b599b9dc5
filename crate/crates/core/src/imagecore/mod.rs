//! Grayscale rasters, stroke masks and lossless 8-bit raster I/O.
//!
//! Intensities live in `[0, 1]` with `0` = black ink and `1` = white
//! background. Every loss and metric in the crate assumes this polarity;
//! light-on-dark corpora are inverted once at load time.

mod binarize;
mod io;

pub use binarize::{binarize, otsu_threshold, Binarization, BinarizeMethod};
pub use io::{decode_image, load_image, save_image, ImageFormat};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("malformed {format} data: {reason}")]
    Malformed { format: &'static str, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major grayscale raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::Invalid(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(ImageError::Invalid(format!(
                "data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(ImageError::Invalid(format!("pixel {i} = {v} outside [0,1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image, clamping every value into `[0, 1]` (NaN maps to 1).
    pub fn from_clamped(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 1.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::from_clamped(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// `1 - v` per pixel, for light-ink corpora.
    pub fn inverted(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64, ImageError> {
        if self.height != other.height || self.width != other.width {
            return Err(ImageError::Invalid(format!(
                "dimension mismatch {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }
}

/// One boolean per pixel; `true` marks foreground stroke.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, ImageError> {
        if bits.len() != height * width {
            return Err(ImageError::Invalid(format!(
                "mask length {} does not match {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_foreground(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn foreground_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn background_count(&self) -> usize {
        self.bits.len() - self.foreground_count()
    }

    /// Renders the mask back to pixels: ink 0, background 1.
    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.bits.iter().map(|b| if *b { 0.0 } else { 1.0 }).collect(),
        }
    }
}

/// Bilinear resampling with corner-aligned sampling positions.
pub fn resize(img: &Image, height: usize, width: usize) -> Result<Image, ImageError> {
    if height == 0 || width == 0 {
        return Err(ImageError::Invalid(format!("target size {height}x{width}")));
    }
    if height == img.height && width == img.width {
        return Ok(img.clone());
    }
    let scale = |n_in: usize, n_out: usize| {
        if n_out > 1 {
            (n_in - 1) as f64 / (n_out - 1) as f64
        } else {
            0.0
        }
    };
    let sy = scale(img.height, height);
    let sx = scale(img.width, width);
    let mut data = Vec::with_capacity(height * width);
    for r in 0..height {
        let fy = r as f64 * sy;
        let y0 = (fy.floor() as usize).min(img.height - 1);
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for c in 0..width {
            let fx = c as f64 * sx;
            let x0 = (fx.floor() as usize).min(img.width - 1);
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            let top = img.get(y0, x0) * (1.0 - wx) + img.get(y0, x1) * wx;
            let bottom = img.get(y1, x0) * (1.0 - wx) + img.get(y1, x1) * wx;
            data.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    Image::from_clamped(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_length() {
        assert!(Image::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Image::new(0, 2, vec![]).is_err());
        assert!(Image::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::filled(64, 64, 0.3).unwrap();
        let out = resize(&img, 32, 32).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn resize_identity_dims() {
        let img = Image::from_fn(5, 7, |r, c| ((r * 7 + c) % 11) as f64 / 10.0).unwrap();
        assert_eq!(resize(&img, 5, 7).unwrap(), img);
    }

    #[test]
    fn resize_checkerboard_center_is_corner_mean() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize(&img, 3, 3).unwrap();
        // Hand evaluation: center maps to (0.5, 0.5), weights 1/4 each.
        let expected = 0.25 * (0.0 + 1.0 + 1.0 + 0.0);
        assert!((out.get(1, 1) - expected).abs() < 1e-12);
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(2, 2), 0.0);
        assert_eq!(out.get(0, 2), 1.0);
    }

    #[test]
    fn mask_counts_partition_pixels() {
        let m = BinaryMask::new(2, 2, vec![true, false, false, true]).unwrap();
        assert_eq!(m.foreground_count(), 2);
        assert_eq!(m.background_count(), 2);
        assert_eq!(m.to_image().data(), &[0.0, 1.0, 1.0, 0.0]);
    }
}
