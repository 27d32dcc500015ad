//! Toy ERP data: procedural HR synthesis (horizontally seamless), bicubic
//! degradation, and the on-disk paired-dataset layout
//! (`hr/<name>.png`, `lr/<name>.png`, `manifest.json`).

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bicubic::bicubic_downsample;
use crate::error::{invalid, OpdnError, Result};
use crate::image::ErpImage;

/// Procedural HR sample: smooth gradients, oriented stripes, soft
/// checkerboards, and Gaussian blobs, all periodic in longitude. Values are
/// clamped to `[0, 1]`; the same seed reproduces the image bit-exactly.
pub fn synthesize_erp_sample(seed: u64, h: usize, w: usize) -> ErpImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    let mut field = vec![0.0f64; 3 * h * w];

    // Per-channel base gradients: vertical polynomial plus low-frequency
    // horizontal harmonics (integer cycles keep the seam continuous).
    for c in 0..3 {
        let c0 = rng.gen_range(-0.5..0.5);
        let c1 = rng.gen_range(-0.8..0.8);
        let kx = rng.gen_range(1..=3) as f64;
        let phase = rng.gen_range(0.0..tau);
        let amp = rng.gen_range(0.1..0.45);
        for y in 0..h {
            let v = c0 + c1 * (y as f64 / h as f64 - 0.5);
            for x in 0..w {
                field[(c * h + y) * w + x] +=
                    v + amp * (tau * kx * x as f64 / w as f64 + phase).sin();
            }
        }
    }

    // Oriented stripes shared across channels with per-channel gains.
    let n_stripes = rng.gen_range(2..=4);
    for _ in 0..n_stripes {
        let kx = rng.gen_range(0..=5) as f64;
        let ky = rng.gen_range(if kx == 0.0 { 1 } else { 0 }..=5) as f64;
        let phase = rng.gen_range(0.0..tau);
        let amp = rng.gen_range(0.08..0.3);
        let gains = [
            rng.gen_range(0.5..1.0),
            rng.gen_range(0.5..1.0),
            rng.gen_range(0.5..1.0),
        ];
        for y in 0..h {
            for x in 0..w {
                let s = (tau * (kx * x as f64 / w as f64 + ky * y as f64 / h as f64) + phase).sin();
                for c in 0..3 {
                    field[(c * h + y) * w + x] += amp * gains[c] * s;
                }
            }
        }
    }

    // A soft checkerboard: saturated sines give edge-like content with
    // harmonics above the LR Nyquist rate.
    if rng.gen_bool(0.8) {
        let kx = rng.gen_range(2..=6) as f64;
        let ky = rng.gen_range(2..=6) as f64;
        let amp = rng.gen_range(0.1..0.28);
        let sharp = rng.gen_range(3.0..8.0);
        let gains = [
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.6..1.0),
        ];
        for y in 0..h {
            let sy = (sharp * (tau * ky * (y as f64 + 0.5) / h as f64).sin()).tanh();
            for x in 0..w {
                let sx = (sharp * (tau * kx * x as f64 / w as f64).sin()).tanh();
                for c in 0..3 {
                    field[(c * h + y) * w + x] += amp * gains[c] * sx * sy;
                }
            }
        }
    }

    // Gaussian blobs with circular horizontal distance.
    let n_blobs = rng.gen_range(3..=8);
    for _ in 0..n_blobs {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let sigma = rng.gen_range(0.02..0.12) * w as f64;
        let color = [
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        ];
        for y in 0..h {
            let dy = y as f64 - cy;
            for x in 0..w {
                let dx_lin = (x as f64 - cx).abs();
                let dx = dx_lin.min(w as f64 - dx_lin);
                let e = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                if e < 1e-6 {
                    continue;
                }
                for c in 0..3 {
                    field[(c * h + y) * w + x] += color[c] * e;
                }
            }
        }
    }

    // Put the seam at the flattest meridian: the wrap step is then the
    // smallest column-to-column step in the image.
    let mut flattest = 0usize;
    let mut best = f64::INFINITY;
    for x in 0..w {
        let next = (x + 1) % w;
        let mut total = 0.0;
        for c in 0..3 {
            for y in 0..h {
                total += (field[(c * h + y) * w + next] - field[(c * h + y) * w + x]).abs();
            }
        }
        if total < best {
            best = total;
            flattest = x;
        }
    }
    let shift = w - 1 - flattest; // move pair (flattest, flattest+1) to (w-1, 0)

    // Normalize the dynamic range into [0.03, 0.97], then clamp.
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let mut data = Array3::zeros((3, h, w));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = (field[(c * h + y) * w + x] - lo) / span;
                data[[c, y, (x + shift) % w]] = (0.03 + 0.94 * v).clamp(0.0, 1.0) as f32;
            }
        }
    }
    ErpImage::new(data)
}

/// Bicubic degradation (anti-aliased kernel, a = -0.5, pixel centers).
pub fn degrade_bicubic(hr: &ErpImage, scale: usize) -> Result<ErpImage> {
    bicubic_downsample(hr, scale)
}

#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub name: String,
    pub hr: ErpImage,
    pub lr: ErpImage,
}

#[derive(Debug, Clone, Default)]
pub struct PairedDataset {
    pub train: Vec<DatasetPair>,
    pub val: Vec<DatasetPair>,
}

impl PairedDataset {
    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.val.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    train: Vec<String>,
    val: Vec<String>,
}

/// Synthesize `count` training and `val_count` validation pairs with
/// bicubic x1/4 degradation. Per-image seeds derive from `seed`, so any
/// subset is reproducible independently.
pub fn synthesize_dataset(
    count: usize,
    val_count: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<PairedDataset> {
    synthesize_dataset_with(count, val_count, h, w, seed, |hr| degrade_bicubic(hr, 4))
}

/// Same, with a caller-supplied degradation (e.g. a learned network).
pub fn synthesize_dataset_with(
    count: usize,
    val_count: usize,
    h: usize,
    w: usize,
    seed: u64,
    mut degrade: impl FnMut(&ErpImage) -> Result<ErpImage>,
) -> Result<PairedDataset> {
    if h % 4 != 0 || w % 4 != 0 {
        return Err(invalid("dataset image size must be divisible by 4"));
    }
    let mut make = |idx: usize| -> Result<DatasetPair> {
        let hr = synthesize_erp_sample(seed.wrapping_add(idx as u64), h, w);
        let lr = degrade(&hr)?;
        Ok(DatasetPair {
            name: format!("img_{idx:04}"),
            hr,
            lr,
        })
    };
    let mut out = PairedDataset::default();
    for i in 0..count {
        out.train.push(make(i)?);
    }
    for i in count..count + val_count {
        out.val.push(make(i)?);
    }
    Ok(out)
}

/// Write `hr/`, `lr/`, and `manifest.json` under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, data: &PairedDataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("hr"))?;
    std::fs::create_dir_all(dir.join("lr"))?;
    let mut manifest = Manifest {
        train: Vec::new(),
        val: Vec::new(),
    };
    for (pairs, names) in [
        (&data.train, &mut manifest.train),
        (&data.val, &mut manifest.val),
    ] {
        for pair in pairs.iter() {
            pair.hr.save_png(dir.join("hr").join(format!("{}.png", pair.name)))?;
            pair.lr.save_png(dir.join("lr").join(format!("{}.png", pair.name)))?;
            names.push(pair.name.clone());
        }
    }
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| OpdnError::BadConfig(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<PairedDataset> {
    let dir = dir.as_ref();
    let manifest_bytes = std::fs::read(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| OpdnError::BadConfig(format!("manifest: {e}")))?;
    let load_split = |names: &[String]| -> Result<Vec<DatasetPair>> {
        names
            .iter()
            .map(|name| {
                Ok(DatasetPair {
                    name: name.clone(),
                    hr: ErpImage::load_png(dir.join("hr").join(format!("{name}.png")))?,
                    lr: ErpImage::load_png(dir.join("lr").join(format!("{name}.png")))?,
                })
            })
            .collect()
    };
    Ok(PairedDataset {
        train: load_split(&manifest.train)?,
        val: load_split(&manifest.val)?,
    })
}
