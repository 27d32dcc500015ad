//! Inference orchestration: x8 ERP self-ensemble, stage-1 model averaging,
//! and the optional same-resolution stage-2 refinement.

use ndarray::{s, Array2, Array4};

use crate::erp::{all_transforms, apply_se_with_divisor, invert_se_with_divisor, ErpContext};
use crate::error::{invalid, shape_mismatch, Result};
use crate::image::ErpImage;
use crate::model::{Model, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeMode {
    None,
    #[default]
    X8,
}

#[derive(Debug, Clone)]
pub struct InferenceOptions {
    pub self_ensemble: SeMode,
    pub use_model_b: bool,
    pub use_stage2: bool,
    /// LR-space tile size; `None` runs whole images.
    pub tile: Option<usize>,
    pub tile_overlap: usize,
    /// The ensemble roll is `width / roll_divisor` columns; 4 per the
    /// method, configurable for experiments.
    pub roll_divisor: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            self_ensemble: SeMode::X8,
            use_model_b: true,
            use_stage2: true,
            tile: None,
            tile_overlap: 8,
            roll_divisor: 4,
        }
    }
}

impl InferenceOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.tile {
            if t == 0 {
                return Err(invalid("tile size must be positive"));
            }
            if self.tile_overlap >= t {
                return Err(invalid("tile_overlap must be smaller than tile"));
            }
        }
        if self.roll_divisor == 0 {
            return Err(invalid("roll_divisor must be positive"));
        }
        Ok(())
    }
}

fn image_to_batch(img: &ErpImage) -> Array4<f32> {
    let (c, h, w) = img.data.dim();
    let mut out = Array4::zeros((1, c, h, w));
    out.slice_mut(s![0, .., .., ..]).assign(&img.data);
    out
}

fn batch_to_image(batch: &Array4<f32>) -> ErpImage {
    ErpImage::new(batch.slice(s![0, .., .., ..]).to_owned())
}

/// Run a model on one image, optionally tiled with overlap blending.
/// Tiles carry their global row origin so the position grids stay correct.
pub fn run_model(model: &Model, img: &ErpImage, opts: &InferenceOptions) -> Result<ErpImage> {
    let (_, h, w) = img.data.dim();
    let scale = if model.config.variant == Variant::Stage2 {
        1
    } else {
        model.config.scale
    };
    let tile = match opts.tile {
        Some(t) if t < h || t < w => t,
        _ => {
            let out = model.forward(&image_to_batch(img), None)?;
            return Ok(batch_to_image(&out));
        }
    };

    let stride = tile - opts.tile_overlap;
    let starts = |len: usize| -> Vec<usize> {
        if len <= tile {
            return vec![0];
        }
        let mut v: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + tile < len).collect();
        v.push(len - tile);
        v
    };

    let (oh, ow) = (h * scale, w * scale);
    let mut acc = Array4::<f32>::zeros((1, 3, oh, ow));
    let mut weight = Array2::<f32>::zeros((oh, ow));
    let ramp_len = (opts.tile_overlap * scale).max(1);
    let ramp = |i: usize, n: usize| -> f32 {
        let up = (i + 1) as f32 / ramp_len as f32;
        let down = (n - i) as f32 / ramp_len as f32;
        up.min(down).min(1.0)
    };

    for &r0 in &starts(h) {
        for &c0 in &starts(w) {
            let patch = ErpImage::new(
                img.data
                    .slice(s![.., r0..r0 + tile.min(h), c0..c0 + tile.min(w)])
                    .to_owned(),
            );
            let ctx = ErpContext {
                full_h: h as f64,
                row_origin: r0 as f64,
            };
            let out = model.forward(&image_to_batch(&patch), Some(ctx))?;
            let (th, tw) = (patch.height() * scale, patch.width() * scale);
            for y in 0..th {
                let wy = ramp(y, th);
                for x in 0..tw {
                    let wv = wy * ramp(x, tw);
                    weight[[r0 * scale + y, c0 * scale + x]] += wv;
                    for ch in 0..3 {
                        acc[[0, ch, r0 * scale + y, c0 * scale + x]] += wv * out[[0, ch, y, x]];
                    }
                }
            }
        }
    }
    for y in 0..oh {
        for x in 0..ow {
            let wv = weight[[y, x]];
            for ch in 0..3 {
                acc[[0, ch, y, x]] /= wv;
            }
        }
    }
    Ok(batch_to_image(&acc))
}

/// x8 self-ensemble around an arbitrary image operator: transform the
/// input, run, invert in output coordinates, average over the 8 members in
/// a fixed order.
pub fn self_ensemble_apply(
    op: impl Fn(&ErpImage) -> Result<ErpImage>,
    lr: &ErpImage,
    roll_divisor: usize,
) -> Result<ErpImage> {
    if lr.width() % roll_divisor != 0 {
        return Err(invalid(format!(
            "width {} not divisible by {roll_divisor} for the ensemble roll",
            lr.width()
        )));
    }
    let mut mean: Option<ErpImage> = None;
    for t in all_transforms() {
        let xin = apply_se_with_divisor(lr, t, roll_divisor)?;
        let y = op(&xin)?;
        let z = invert_se_with_divisor(&y, t, roll_divisor)?;
        match &mut mean {
            None => mean = Some(z),
            Some(m) => {
                if m.data.dim() != z.data.dim() {
                    return Err(shape_mismatch("ensemble branches disagree on shape"));
                }
                m.data += &z.data;
            }
        }
    }
    let mut out = mean.expect("eight branches");
    out.data.mapv_inplace(|v| v / 8.0);
    Ok(out)
}

/// x8 self-ensemble of a model (quarter-width roll).
pub fn self_ensemble_infer(model: &Model, lr: &ErpImage) -> Result<ErpImage> {
    let opts = InferenceOptions {
        tile: None,
        ..Default::default()
    };
    self_ensemble_apply(|img| run_model(model, img, &opts), lr, 4)
}

/// Elementwise arithmetic mean of equally shaped images.
pub fn ensemble_average(outputs: &[ErpImage]) -> Result<ErpImage> {
    let first = outputs
        .first()
        .ok_or_else(|| invalid("ensemble_average needs at least one image"))?;
    let mut acc = first.data.clone();
    for img in &outputs[1..] {
        if img.data.dim() != first.data.dim() {
            return Err(shape_mismatch(format!(
                "{:?} vs {:?}",
                img.data.dim(),
                first.data.dim()
            )));
        }
        acc += &img.data;
    }
    acc.mapv_inplace(|v| v / outputs.len() as f32);
    Ok(ErpImage::new(acc))
}

/// Full two-stage path: average the available x4 stage-1 models (each with
/// optional x8 self-ensemble), then refine at the same resolution when a
/// stage-2 model is supplied.
pub fn infer_two_stage(
    lr: &ErpImage,
    model_a: Option<&Model>,
    model_b: Option<&Model>,
    stage2: Option<&Model>,
    opts: &InferenceOptions,
) -> Result<ErpImage> {
    opts.validate()?;
    let mut stage1_models: Vec<&Model> = Vec::new();
    if let Some(a) = model_a {
        stage1_models.push(a);
    }
    if opts.use_model_b {
        if let Some(b) = model_b {
            stage1_models.push(b);
        }
    }
    if stage1_models.is_empty() {
        return Err(invalid("no stage-1 model supplied"));
    }
    for m in &stage1_models {
        if m.config.variant == Variant::Stage2 {
            return Err(invalid("stage-1 slots require x4 models"));
        }
    }
    if let Some(s2) = stage2 {
        if s2.config.variant != Variant::Stage2 {
            return Err(invalid("stage-2 slot requires a stage2 model"));
        }
    }

    let mut outputs = Vec::with_capacity(stage1_models.len());
    for m in stage1_models {
        let out = match opts.self_ensemble {
            SeMode::X8 => {
                if lr.width() % opts.roll_divisor != 0 {
                    return Err(invalid(format!(
                        "LR width {} not divisible by {}",
                        lr.width(),
                        opts.roll_divisor
                    )));
                }
                self_ensemble_apply(|img| run_model(m, img, opts), lr, opts.roll_divisor)?
            }
            SeMode::None => run_model(m, lr, opts)?,
        };
        outputs.push(out);
    }
    let s1 = ensemble_average(&outputs)?;

    match (opts.use_stage2, stage2) {
        (true, Some(s2)) => run_model(s2, &s1, opts),
        _ => Ok(s1),
    }
}
