//! PSNR and WS-PSNR over `[0, 1]` float images (MAX = 1).
//!
//! WS-PSNR weights each row by the ERP stretching ratio so that pole pixels,
//! which oversample the sphere, count less. Infinite PSNR is reported
//! through an explicit sentinel, never capped.

use ndarray::Array2;

use crate::erp::ws_weights;
use crate::error::{invalid, shape_mismatch, Result};
use crate::image::ErpImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricResult {
    /// Decibels; `f64::INFINITY` iff the (weighted) MSE is exactly zero.
    pub value_db: f64,
    pub n_pixels: usize,
    pub weighted: bool,
}

/// Weighted mean squared error:
/// `sum_{i,j,c} w(i,j) * (ref - test)^2 / (C * sum_{i,j} w(i,j))`.
pub fn weighted_mse(reference: &ErpImage, test: &ErpImage, weights: &Array2<f64>) -> Result<f64> {
    if reference.data.dim() != test.data.dim() {
        return Err(shape_mismatch(format!(
            "reference {:?} vs test {:?}",
            reference.data.dim(),
            test.data.dim()
        )));
    }
    let (c, h, w) = reference.data.dim();
    if weights.dim() != (h, w) {
        return Err(shape_mismatch(format!(
            "weights {:?} vs image {:?}",
            weights.dim(),
            (h, w)
        )));
    }
    if weights.iter().any(|&v| v < 0.0) {
        return Err(invalid("weights must be non-negative"));
    }
    let weight_sum: f64 = weights.sum();
    if weight_sum <= 0.0 {
        return Err(invalid("weights must have a positive sum"));
    }

    let mut acc = 0.0f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let d = f64::from(reference.data[[ch, y, x]]) - f64::from(test.data[[ch, y, x]]);
                acc += weights[[y, x]] * d * d;
            }
        }
    }
    Ok(acc / (c as f64 * weight_sum))
}

fn psnr_from_mse(mse: f64, n_pixels: usize, weighted: bool) -> MetricResult {
    let value_db = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    };
    MetricResult {
        value_db,
        n_pixels,
        weighted,
    }
}

/// WS-PSNR with `cos(latitude)` row weights.
pub fn ws_psnr(reference: &ErpImage, test: &ErpImage) -> Result<MetricResult> {
    let (_, h, w) = reference.data.dim();
    let weights = ws_weights(h, w);
    let mse = weighted_mse(reference, test, &weights)?;
    Ok(psnr_from_mse(mse, h * w, true))
}

/// Plain PSNR (uniform weights).
pub fn psnr(reference: &ErpImage, test: &ErpImage) -> Result<MetricResult> {
    let (_, h, w) = reference.data.dim();
    let weights = Array2::ones((h, w));
    let mse = weighted_mse(reference, test, &weights)?;
    Ok(psnr_from_mse(mse, h * w, false))
}
