//! Equirectangular raster container and 8-bit PNG conversion.
//!
//! Images are stored channel-first `(C, H, W)` as `f32` in `[0, 1]`. ERP
//! images are horizontally periodic (column 0 neighbours column W-1); rows
//! run from the north pole (row 0) to the south pole.

use std::path::Path;

use ndarray::Array3;

use crate::error::{invalid, OpdnError, Result};

/// An equirectangular raster, `(C, H, W)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErpImage {
    pub data: Array3<f32>,
}

impl ErpImage {
    pub fn new(data: Array3<f32>) -> Self {
        Self { data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Convert from 8-bit samples by dividing by 255.
    pub fn from_u8(bytes: &[u8], channels: usize, height: usize, width: usize) -> Result<Self> {
        if bytes.len() != channels * height * width {
            return Err(invalid(format!(
                "byte buffer length {} does not match {}x{}x{}",
                bytes.len(),
                channels,
                height,
                width
            )));
        }
        // PNG rows are interleaved (H, W, C); store channel-first.
        let mut data = Array3::zeros((channels, height, width));
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data[[c, y, x]] = f32::from(bytes[(y * width + x) * channels + c]) / 255.0;
                }
            }
        }
        Ok(Self { data })
    }

    /// Convert to 8-bit samples: scale by 255, round half to even, clamp.
    pub fn to_u8(&self) -> Vec<u8> {
        let (c, h, w) = self.data.dim();
        let mut out = vec![0u8; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = (self.data[[ch, y, x]] * 255.0).round_ties_even();
                    out[(y * w + x) * c + ch] = v.clamp(0.0, 255.0) as u8;
                }
            }
        }
        out
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())
            .map_err(|e| OpdnError::Image(format!("{}: {e}", path.as_ref().display())))?
            .into_rgb8();
        let (w, h) = img.dimensions();
        Self::from_u8(img.as_raw(), 3, h as usize, w as usize)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        if self.channels() != 3 {
            return Err(invalid(format!(
                "PNG output expects 3 channels, got {}",
                self.channels()
            )));
        }
        let buf = self.to_u8();
        let img = image::RgbImage::from_raw(self.width() as u32, self.height() as u32, buf)
            .expect("buffer size matches dimensions");
        img.save(path.as_ref())
            .map_err(|e| OpdnError::Image(format!("{}: {e}", path.as_ref().display())))?;
        Ok(())
    }

    /// Clamp all samples into `[0, 1]`.
    pub fn clamp01(mut self) -> Self {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self
    }
}
