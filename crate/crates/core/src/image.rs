//! Floating-point RGB and grayscale images with values nominally in `[0,1]`.

use std::path::Path;

use crate::error::{Error, Result};

/// Largest accepted width or height when decoding.
pub const MAX_DECODE_SIDE: u32 = 8192;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    /// Row-major, interleaved RGB.
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

fn check_size(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Dimension(format!("image must be non-empty, got {width}x{height}")));
    }
    Ok(())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl RgbImage {
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        check_size(width, height)?;
        let mut data = Vec::with_capacity(width * height * 3);
        for row in 0..height {
            for col in 0..width {
                data.extend_from_slice(&f(col, row));
            }
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_size(width, height)?;
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, col: usize, row: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Pixel `i` in row-major order.
    pub fn pixel_at(&self, i: usize) -> [f64; 3] {
        [self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2]]
    }

    /// `0.299 R + 0.587 G + 0.114 B`.
    pub fn grayscale(&self) -> GrayImage {
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Rounds every channel to the nearest of 256 levels after clamping.
    pub fn quantized(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| quantize(v) as f64 / 255.0).collect(),
        }
    }

    /// Decodes PNG or binary PPM bytes.
    /// Decodes PNG or PNM bytes; images wider or taller than
    /// [`MAX_DECODE_SIDE`] are rejected before allocation.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut limits = image::Limits::default();
        limits.max_image_width = Some(MAX_DECODE_SIDE);
        limits.max_image_height = Some(MAX_DECODE_SIDE);
        let mut reader = image::ImageReader::new(std::io::Cursor::new(bytes))
            .with_guessed_format()
            .map_err(|e| Error::parse("image", e.to_string()))?;
        reader.limits(limits);
        let img = reader.decode()?.into_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Self::from_vec(w as usize, h as usize, data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.data.iter().map(|&v| quantize(v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer matches size")
    }

    /// Writes an 8-bit PNG, or binary PPM when the extension is `ppm`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8().save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
    }
}

impl GrayImage {
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_size(width, height)?;
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Averages non-overlapping 2×2 blocks; a trailing odd row or column is
    /// dropped.
    pub fn downsample(&self) -> Result<GrayImage> {
        let (w, h) = (self.width / 2, self.height / 2);
        check_size(w, h)?;
        let mut data = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                let s = self.get(2 * c, 2 * r)
                    + self.get(2 * c + 1, 2 * r)
                    + self.get(2 * c, 2 * r + 1)
                    + self.get(2 * c + 1, 2 * r + 1);
                data.push(0.25 * s);
            }
        }
        Ok(GrayImage { width: w, height: h, data })
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let raw = self.data.iter().map(|&v| quantize(v)).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer matches size")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_luma8().save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_ppm_round_trip() {
        let img = RgbImage::from_fn(5, 3, |c, r| [c as f64 / 4.0, r as f64 / 2.0, 0.2]).unwrap().quantized();
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            img.save(&p).unwrap();
            assert_eq!(RgbImage::load(&p).unwrap(), img);
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(RgbImage::load("/nonexistent/x.png"), Err(Error::Io { .. })));
        assert!(matches!(RgbImage::decode(b"not an image"), Err(Error::Image(_))));
    }

    #[test]
    fn grayscale_weights() {
        let img = RgbImage::from_fn(1, 1, |_, _| [1.0, 0.0, 0.0]).unwrap();
        assert!((img.grayscale().get(0, 0) - 0.299).abs() < 1e-15);
    }

    #[test]
    fn downsample_averages_blocks() {
        let g = GrayImage::from_vec(3, 2, vec![0.0, 1.0, 9.0, 2.0, 3.0, 9.0]).unwrap();
        let d = g.downsample().unwrap();
        assert_eq!((d.width(), d.height()), (1, 1));
        assert_eq!(d.get(0, 0), 1.5);
    }
}
