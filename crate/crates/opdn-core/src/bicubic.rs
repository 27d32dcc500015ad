//! Separable bicubic resampling (kernel a = -0.5, pixel-center alignment).
//!
//! Downsampling widens the kernel by the scale factor (anti-aliased), the
//! convention commonly used to synthesize LR training data. Columns wrap
//! (ERP is horizontally periodic); rows clamp at the poles. Weights are
//! renormalized per output sample, so constants are reproduced exactly.

use ndarray::Array3;

use crate::error::{invalid, Result};
use crate::image::ErpImage;

/// Catmull-Rom-family cubic with a = -0.5.
pub fn cubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

#[derive(Clone, Copy)]
enum Border {
    Wrap,
    Clamp,
}

/// Tap positions and normalized weights for one output sample.
/// `scale` = input length / output length.
fn taps(out_idx: usize, scale: f64, in_len: usize, border: Border) -> Vec<(usize, f64)> {
    let center = (out_idx as f64 + 0.5) * scale - 0.5;
    // Anti-alias: widen the kernel when minifying.
    let width = scale.max(1.0);
    let radius = 2.0 * width;
    let lo = (center - radius).ceil() as i64;
    let hi = (center + radius).floor() as i64;
    let mut out = Vec::with_capacity((hi - lo + 1) as usize);
    let mut sum = 0.0;
    for j in lo..=hi {
        let w = cubic_kernel((j as f64 - center) / width) / width;
        if w == 0.0 {
            continue;
        }
        let idx = match border {
            Border::Wrap => (j.rem_euclid(in_len as i64)) as usize,
            Border::Clamp => j.clamp(0, in_len as i64 - 1) as usize,
        };
        out.push((idx, w));
        sum += w;
    }
    for (_, w) in &mut out {
        *w /= sum;
    }
    out
}

fn resample(img: &ErpImage, out_h: usize, out_w: usize) -> ErpImage {
    let (c, h, w) = img.data.dim();
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;

    let row_taps: Vec<Vec<(usize, f64)>> = (0..out_h)
        .map(|o| taps(o, scale_y, h, Border::Clamp))
        .collect();
    let col_taps: Vec<Vec<(usize, f64)>> = (0..out_w)
        .map(|o| taps(o, scale_x, w, Border::Wrap))
        .collect();

    // Horizontal pass, then vertical, all in f64.
    let mut horiz = vec![0.0f64; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            for (ox, tps) in col_taps.iter().enumerate() {
                let mut acc = 0.0;
                for &(ix, wt) in tps {
                    acc += wt * f64::from(img.data[[ch, y, ix]]);
                }
                horiz[(ch * h + y) * out_w + ox] = acc;
            }
        }
    }
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, tps) in row_taps.iter().enumerate() {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for &(iy, wt) in tps {
                    acc += wt * horiz[(ch * h + iy) * out_w + ox];
                }
                out[[ch, oy, ox]] = acc as f32;
            }
        }
    }
    ErpImage::new(out)
}

/// Shrink by an integer factor (both dimensions must divide).
pub fn bicubic_downsample(img: &ErpImage, factor: usize) -> Result<ErpImage> {
    if factor == 0 {
        return Err(invalid("downsample factor must be positive"));
    }
    let (_, h, w) = img.data.dim();
    if h % factor != 0 || w % factor != 0 {
        return Err(invalid(format!(
            "image {h}x{w} not divisible by factor {factor}"
        )));
    }
    Ok(resample(img, h / factor, w / factor))
}

/// Enlarge by an integer factor.
pub fn bicubic_upsample(img: &ErpImage, factor: usize) -> Result<ErpImage> {
    if factor == 0 {
        return Err(invalid("upsample factor must be positive"));
    }
    let (_, h, w) = img.data.dim();
    Ok(resample(img, h * factor, w * factor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::erp::{apply_se, SelfEnsembleTransform};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> ErpImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ErpImage::new(Array3::from_shape_fn((c, h, w), |_| rng.gen::<f32>()))
    }

    #[test]
    fn constant_image_stays_constant() {
        let mut img = ErpImage::zeros(2, 8, 16);
        img.data.fill(0.4375);
        let down = bicubic_downsample(&img, 4).unwrap();
        assert_eq!(down.data.dim(), (2, 2, 4));
        for &v in down.data.iter() {
            assert!((v - 0.4375).abs() < 1e-6);
        }
        let up = bicubic_upsample(&img, 2).unwrap();
        for &v in up.data.iter() {
            assert!((v - 0.4375).abs() < 1e-6);
        }
    }

    #[test]
    fn four_by_four_to_one_matches_direct_convolution_oracle() {
        let img = random_image(7, 1, 4, 4);
        let down = bicubic_downsample(&img, 4).unwrap();
        assert_eq!(down.data.dim(), (1, 1, 1));

        // Direct 2-D oracle: outer product of 1-D kernels with the same
        // border conventions, normalized per dimension.
        let scale = 4.0f64;
        let center = 0.5f64 * scale - 0.5;
        let radius = 2.0 * scale;
        let lo = (center - radius).ceil() as i64;
        let hi = (center + radius).floor() as i64;
        let mut row_w = vec![0.0f64; 4];
        let mut col_w = vec![0.0f64; 4];
        let mut row_sum = 0.0;
        let mut col_sum = 0.0;
        for j in lo..=hi {
            let w = cubic_kernel((j as f64 - center) / scale) / scale;
            row_sum += w;
            col_sum += w;
            row_w[j.clamp(0, 3) as usize] += w;
            col_w[j.rem_euclid(4) as usize] += w;
        }
        let mut expect = 0.0f64;
        for y in 0..4 {
            for x in 0..4 {
                expect +=
                    (row_w[y] / row_sum) * (col_w[x] / col_sum) * f64::from(img.data[[0, y, x]]);
            }
        }
        assert!(
            (f64::from(down.data[[0, 0, 0]]) - expect).abs() < 1e-6,
            "{} vs {expect}",
            down.data[[0, 0, 0]]
        );
    }

    #[test]
    fn shape_laws_and_divisibility() {
        let img = random_image(8, 3, 8, 16);
        assert_eq!(bicubic_downsample(&img, 4).unwrap().data.dim(), (3, 2, 4));
        assert_eq!(bicubic_upsample(&img, 4).unwrap().data.dim(), (3, 32, 64));
        assert!(bicubic_downsample(&img, 3).is_err());
        assert!(bicubic_downsample(&img, 0).is_err());
    }

    #[test]
    fn upsample_is_flip_and_roll_equivariant() {
        // This equivariance is what makes bicubic a valid self-ensemble
        // oracle.
        let img = random_image(9, 3, 8, 16);
        for t in [
            SelfEnsembleTransform {
                flip_h: true,
                ..Default::default()
            },
            SelfEnsembleTransform {
                flip_v: true,
                ..Default::default()
            },
            SelfEnsembleTransform {
                roll_quarter: true,
                ..Default::default()
            },
        ] {
            let a = bicubic_upsample(&apply_se(&img, t).unwrap(), 4).unwrap();
            let b = apply_se(&bicubic_upsample(&img, 4).unwrap(), t).unwrap();
            let max_diff = a
                .data
                .iter()
                .zip(b.data.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(max_diff < 1e-6, "t = {t:?}, max diff {max_diff}");
        }
    }

    #[test]
    fn linear_ramp_is_reproduced_in_the_interior() {
        // Bicubic interpolation is exact on affine signals.
        let mut img = ErpImage::zeros(1, 4, 16);
        for y in 0..4 {
            for x in 0..16 {
                img.data[[0, y, x]] = x as f32 / 32.0;
            }
        }
        let up = bicubic_upsample(&img, 2).unwrap();
        for x in 4..28 {
            let expect = (x as f32 - 0.5) / 64.0;
            assert!(
                (up.data[[0, 4, x]] - expect).abs() < 1e-5,
                "col {x}: {} vs {expect}",
                up.data[[0, 4, x]]
            );
        }
    }
}
