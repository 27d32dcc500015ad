//! ERP coordinate math: sinusoidal position encoding, latitude distortion
//! maps, spherical-uniform weights, and the x8 self-ensemble transform group.
//!
//! Everything here is pure: no state, safe for concurrent callers.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::ErpImage;

/// Sinusoidal encodings for a latitude/longitude grid, `(d_pe, H, W)`.
#[derive(Debug, Clone)]
pub struct PositionEncodingGrid {
    pub values: Array3<f64>,
    pub d_pe: usize,
    pub h: usize,
    pub w: usize,
}

/// Per-row ERP stretching ratio `cos(latitude)`, `(1, H, W)`.
#[derive(Debug, Clone)]
pub struct DistortionMap {
    pub values: Array3<f64>,
    pub h: usize,
    pub w: usize,
}

/// How latitude and longitude encodings are combined into one grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    /// Latitude channels `[0, d_pe/2)`, longitude channels `[d_pe/2, d_pe)`.
    #[default]
    Concat,
    /// Elementwise product of full-width latitude and longitude encodings.
    Product,
}

/// Crop context: where a patch sits inside the full ERP image, in the
/// patch's own resolution units. Origins are real-valued so that grids for
/// pixel-unshuffled feature maps stay globally correct.
#[derive(Debug, Clone, Copy)]
pub struct ErpContext {
    pub full_h: f64,
    pub row_origin: f64,
}

impl ErpContext {
    pub fn whole_image(h: usize) -> Self {
        Self {
            full_h: h as f64,
            row_origin: 0.0,
        }
    }
}

/// One member of the x8 ERP self-ensemble: optional quarter-width roll,
/// then optional horizontal flip, then optional vertical flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SelfEnsembleTransform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub roll_quarter: bool,
}

/// The 8 distinct ensemble members in a fixed enumeration order.
pub fn all_transforms() -> [SelfEnsembleTransform; 8] {
    let mut out = [SelfEnsembleTransform::default(); 8];
    for (i, t) in out.iter_mut().enumerate() {
        t.roll_quarter = i & 1 != 0;
        t.flip_h = i & 2 != 0;
        t.flip_v = i & 4 != 0;
    }
    out
}

/// Classic transformer sinusoidal encoding evaluated at arbitrary real
/// positions: column `2i` holds `sin(pos / 10000^(2i/d))`, column `2i+1`
/// the matching cosine.
pub fn sinusoidal_pe(positions: &[f64], d_model: usize) -> Result<Array2<f64>> {
    if d_model < 2 || d_model % 2 != 0 {
        return Err(invalid(format!(
            "d_model must be even and >= 2, got {d_model}"
        )));
    }
    if positions.iter().any(|p| !p.is_finite()) {
        return Err(invalid("positions must be finite"));
    }
    let mut out = Array2::zeros((positions.len(), d_model));
    for (row, &pos) in positions.iter().enumerate() {
        for i in 0..d_model / 2 {
            let freq = 10000f64.powf(-(2.0 * i as f64) / d_model as f64);
            let angle = pos * freq;
            out[[row, 2 * i]] = angle.sin();
            out[[row, 2 * i + 1]] = angle.cos();
        }
    }
    Ok(out)
}

/// Position grid for an `h x w` ERP raster with latitude and longitude
/// encoded separately (see [`PeMode`]).
pub fn erp_position_grid(h: usize, w: usize, d_pe: usize) -> Result<PositionEncodingGrid> {
    erp_position_grid_ctx(h, w, d_pe, PeMode::Concat, ErpContext::whole_image(h))
}

pub fn erp_position_grid_ctx(
    h: usize,
    w: usize,
    d_pe: usize,
    mode: PeMode,
    ctx: ErpContext,
) -> Result<PositionEncodingGrid> {
    if h < 1 || w < 1 {
        return Err(invalid("grid size must be at least 1x1"));
    }
    if d_pe % 4 != 0 || d_pe == 0 {
        return Err(invalid(format!("d_pe must be divisible by 4, got {d_pe}")));
    }
    let rows: Vec<f64> = (0..h).map(|j| ctx.row_origin + j as f64).collect();
    let cols: Vec<f64> = (0..w).map(|c| c as f64).collect();

    let mut values = Array3::zeros((d_pe, h, w));
    match mode {
        PeMode::Concat => {
            let lat = sinusoidal_pe(&rows, d_pe / 2)?;
            let lon = sinusoidal_pe(&cols, d_pe / 2)?;
            for j in 0..h {
                for c in 0..w {
                    for k in 0..d_pe / 2 {
                        values[[k, j, c]] = lat[[j, k]];
                        values[[d_pe / 2 + k, j, c]] = lon[[c, k]];
                    }
                }
            }
        }
        PeMode::Product => {
            let lat = sinusoidal_pe(&rows, d_pe)?;
            let lon = sinusoidal_pe(&cols, d_pe)?;
            for j in 0..h {
                for c in 0..w {
                    for k in 0..d_pe {
                        values[[k, j, c]] = lat[[j, k]] * lon[[c, k]];
                    }
                }
            }
        }
    }
    Ok(PositionEncodingGrid {
        values,
        d_pe,
        h,
        w,
    })
}

/// Row weights shared by the distortion map and WS-PSNR:
/// `cos((j + 0.5 - h/2) * pi / h)` at pixel centers.
fn latitude_cos(j: f64, full_h: f64) -> f64 {
    ((j + 0.5 - full_h / 2.0) * std::f64::consts::PI / full_h).cos()
}

/// ERP stretching-ratio map, constant along rows, `(1, h, w)`.
pub fn distortion_map(h: usize, w: usize) -> Result<DistortionMap> {
    distortion_map_ctx(h, w, ErpContext::whole_image(h))
}

pub fn distortion_map_ctx(h: usize, w: usize, ctx: ErpContext) -> Result<DistortionMap> {
    if h < 1 || w < 1 {
        return Err(invalid("distortion map size must be at least 1x1"));
    }
    let mut values = Array3::zeros((1, h, w));
    for j in 0..h {
        let v = latitude_cos(ctx.row_origin + j as f64, ctx.full_h);
        for c in 0..w {
            values[[0, j, c]] = v;
        }
    }
    Ok(DistortionMap { values, h, w })
}

/// Spherical-uniformity weights for WS-PSNR, `(h, w)`. Identical values to
/// [`distortion_map`].
pub fn ws_weights(h: usize, w: usize) -> Array2<f64> {
    let mut out = Array2::zeros((h, w));
    for j in 0..h {
        let v = latitude_cos(j as f64, h as f64);
        for c in 0..w {
            out[[j, c]] = v;
        }
    }
    out
}

fn roll_columns(img: &ErpImage, shift: usize) -> ErpImage {
    let (c, h, w) = img.data.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, (x + shift) % w]] = img.data[[ch, y, x]];
            }
        }
    }
    ErpImage::new(out)
}

fn flip_horizontal(img: &ErpImage) -> ErpImage {
    let (c, h, w) = img.data.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, w - 1 - x]] = img.data[[ch, y, x]];
            }
        }
    }
    ErpImage::new(out)
}

fn flip_vertical(img: &ErpImage) -> ErpImage {
    let (c, h, w) = img.data.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, h - 1 - y, x]] = img.data[[ch, y, x]];
            }
        }
    }
    ErpImage::new(out)
}

/// Apply an ensemble transform: roll by `W/4`, then flips. A pure pixel
/// permutation; the sample multiset is preserved exactly.
pub fn apply_se(image: &ErpImage, t: SelfEnsembleTransform) -> Result<ErpImage> {
    apply_se_with_divisor(image, t, 4)
}

/// Inverse of [`apply_se`]: flips undone first, then the roll. Because the
/// roll distance is taken from the image's own width, the same call inverts
/// transforms in model-output coordinates at any integer scale.
pub fn invert_se(image: &ErpImage, t: SelfEnsembleTransform) -> Result<ErpImage> {
    invert_se_with_divisor(image, t, 4)
}

pub fn apply_se_with_divisor(
    image: &ErpImage,
    t: SelfEnsembleTransform,
    divisor: usize,
) -> Result<ErpImage> {
    let mut out = if t.roll_quarter {
        roll_columns(image, roll_shift(image.width(), divisor)?)
    } else {
        image.clone()
    };
    if t.flip_h {
        out = flip_horizontal(&out);
    }
    if t.flip_v {
        out = flip_vertical(&out);
    }
    Ok(out)
}

pub fn invert_se_with_divisor(
    image: &ErpImage,
    t: SelfEnsembleTransform,
    divisor: usize,
) -> Result<ErpImage> {
    let mut out = image.clone();
    if t.flip_v {
        out = flip_vertical(&out);
    }
    if t.flip_h {
        out = flip_horizontal(&out);
    }
    if t.roll_quarter {
        let w = out.width();
        let shift = roll_shift(w, divisor)?;
        out = roll_columns(&out, w - shift);
    }
    Ok(out)
}

fn roll_shift(w: usize, divisor: usize) -> Result<usize> {
    if divisor == 0 || w % divisor != 0 {
        return Err(invalid(format!(
            "width {w} is not divisible by {divisor} for the ensemble roll"
        )));
    }
    Ok(w / divisor)
}
