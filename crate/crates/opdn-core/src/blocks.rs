//! Differentiable building blocks composed on the tape: windowed
//! self-attention, channel attention, position-aware deformable sampling,
//! spatial-frequency fusion, spectral upsampling, and sub-pixel shuffles.
//!
//! Every block takes pre-inserted parameter [`Var`]s so the same code path
//! serves f32 training and f64 gradient verification.

use ndarray::{ArrayD, IxDyn};

use crate::erp::{DistortionMap, PositionEncodingGrid};
use crate::error::{invalid, shape_mismatch, Result};
use crate::kernels::PadMode;
use crate::tape::{fs, Graph, Scalar, Var};

/// Slope shared by the lightweight nonlinearities in the offset and
/// frequency branches.
pub const LEAKY_SLOPE: f64 = 0.1;

fn dims4<T: Scalar>(g: &Graph<T>, v: Var) -> (usize, usize, usize, usize) {
    let s = g.shape(v);
    assert_eq!(s.len(), 4, "expected a (B, C, H, W) tensor");
    (s[0], s[1], s[2], s[3])
}

// ---------------------------------------------------------------------------
// Window attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct WindowAttentionParams {
    /// `(C, 3C)` packed query/key/value projection.
    pub qkv_w: Var,
    pub qkv_b: Var,
    /// `(C, C)` output projection.
    pub proj_w: Var,
    pub proj_b: Var,
}

/// `(B, C, Hp, Wp) -> (B * nWin, win^2, C)` token windows.
fn window_partition<T: Scalar>(g: &mut Graph<T>, x: Var, win: usize) -> Var {
    let (b, c, h, w) = dims4(g, x);
    let (nh, nw) = (h / win, w / win);
    let t = g.permute(x, &[0, 2, 3, 1]); // (B, H, W, C)
    let t = g.reshape(t, &[b, nh, win, nw, win, c]);
    let t = g.permute(t, &[0, 1, 3, 2, 4, 5]); // (B, nh, nw, win, win, C)
    g.reshape(t, &[b * nh * nw, win * win, c])
}

fn window_reverse<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    win: usize,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Var {
    let (nh, nw) = (h / win, w / win);
    let t = g.reshape(tokens, &[b, nh, nw, win, win, c]);
    let t = g.permute(t, &[0, 1, 3, 2, 4, 5]); // (B, nh, win, nw, win, C)
    let t = g.reshape(t, &[b, h, w, c]);
    g.permute(t, &[0, 3, 1, 2])
}

/// Multi-head self-attention inside non-overlapping `window x window`
/// tiles, with the residual added. Inputs not divisible by the window are
/// reflect-padded and cropped back. `shift` cyclically rolls the tile grid
/// (used for the overlapping-window approximation).
pub fn window_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &WindowAttentionParams,
    window: usize,
    heads: usize,
    shift: usize,
) -> Result<Var> {
    let (b, c, h, w) = dims4(g, x);
    if c % heads != 0 {
        return Err(invalid(format!(
            "channels {c} not divisible by heads {heads}"
        )));
    }
    if g.shape(p.qkv_w) != [c, 3 * c] || g.shape(p.proj_w) != [c, c] {
        return Err(shape_mismatch("attention projection weights"));
    }
    let dh = c / heads;
    let pad_b = (window - h % window) % window;
    let pad_r = (window - w % window) % window;
    if (pad_b > 0 && pad_b >= h) || (pad_r > 0 && pad_r >= w) {
        return Err(invalid(format!(
            "input {h}x{w} too small to reflect-pad to window {window}"
        )));
    }

    let mut cur = x;
    if pad_b > 0 || pad_r > 0 {
        cur = g.reflect_pad2d(cur, [0, pad_b, 0, pad_r]);
    }
    let (hp, wp) = (h + pad_b, w + pad_r);
    if shift > 0 {
        cur = g.roll2d(cur, hp - shift % hp, wp - shift % wp);
    }

    let n_win = (hp / window) * (wp / window);
    let tokens = window_partition(g, cur, window); // (B*nWin, L, C)
    let l = window * window;

    let qkv = g.linear_last(tokens, p.qkv_w);
    let qkv = g.bias_last(qkv, p.qkv_b); // (N, L, 3C)
    let n = b * n_win;

    let split_heads = |g: &mut Graph<T>, t: Var| {
        let t = g.reshape(t, &[n, l, heads, dh]);
        let t = g.permute(t, &[0, 2, 1, 3]);
        g.reshape(t, &[n * heads, l, dh])
    };
    let q = g.slice_last(qkv, 0, c);
    let k = g.slice_last(qkv, c, 2 * c);
    let v = g.slice_last(qkv, 2 * c, 3 * c);
    let q = split_heads(g, q);
    let k = split_heads(g, k);
    let v = split_heads(g, v);

    let kt = g.permute(k, &[0, 2, 1]);
    let logits = g.batch_matmul(q, kt);
    let logits = g.scale(logits, fs::<T>(1.0 / (dh as f64).sqrt()));
    let attn = g.softmax_last(logits);
    let ctx = g.batch_matmul(attn, v); // (N*heads, L, dh)

    let merged = g.reshape(ctx, &[n, heads, l, dh]);
    let merged = g.permute(merged, &[0, 2, 1, 3]);
    let merged = g.reshape(merged, &[n, l, c]);
    let out = g.linear_last(merged, p.proj_w);
    let out = g.bias_last(out, p.proj_b);

    let mut spatial = window_reverse(g, out, window, b, c, hp, wp);
    if shift > 0 {
        spatial = g.roll2d(spatial, shift % hp, shift % wp);
    }
    if pad_b > 0 || pad_r > 0 {
        spatial = g.crop2d(spatial, 0, 0, h, w);
    }
    Ok(g.add(x, spatial))
}

// ---------------------------------------------------------------------------
// Channel attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ChannelAttentionParams {
    /// `(C, C/r)` squeeze projection.
    pub fc1_w: Var,
    pub fc1_b: Var,
    /// `(C/r, C)` excite projection.
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Squeeze-excite gate: global average pool, two projections, sigmoid,
/// channelwise rescale of `x`.
pub fn channel_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &ChannelAttentionParams,
    reduction: usize,
) -> Result<Var> {
    let (_, c, _, _) = dims4(g, x);
    if reduction == 0 || c % reduction != 0 {
        return Err(invalid(format!(
            "channels {c} not divisible by reduction {reduction}"
        )));
    }
    if g.shape(p.fc1_w) != [c, c / reduction] || g.shape(p.fc2_w) != [c / reduction, c] {
        return Err(shape_mismatch("channel attention projections"));
    }
    let pooled = g.global_avg_pool(x); // (B, C)
    let z = g.matmul(pooled, p.fc1_w);
    let z = g.bias_last(z, p.fc1_b);
    let z = g.relu(z);
    let z = g.matmul(z, p.fc2_w);
    let z = g.bias_last(z, p.fc2_b);
    let gate = g.sigmoid(z);
    Ok(g.mul_channel_gate(x, gate))
}

// ---------------------------------------------------------------------------
// Deformable sampling
// ---------------------------------------------------------------------------

/// Deformable convolution: each kernel tap samples at its regular grid
/// position plus a learned per-pixel displacement, bilinearly interpolated.
/// Offset channel `2k` is the row displacement of tap `k`, `2k+1` the
/// column displacement.
pub fn deformable_sample<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    offsets: Var,
    kernel_weights: Var,
    pad: PadMode,
) -> Result<Var> {
    let (_, c, h, w) = dims4(g, x);
    let ws = g.shape(kernel_weights).to_vec();
    if ws.len() != 4 || ws[1] != c {
        return Err(shape_mismatch(format!(
            "kernel weights {ws:?} vs {c} input channels"
        )));
    }
    let taps = ws[2] * ws[3];
    let os = g.shape(offsets).to_vec();
    if os.len() != 4 || os[1] != 2 * taps || os[2] != h || os[3] != w {
        return Err(invalid(format!(
            "offsets {os:?} do not match {taps} taps on a {h}x{w} grid"
        )));
    }
    if g.value(offsets).iter().any(|v| !v.is_finite()) {
        return Err(invalid("offsets contain non-finite values"));
    }
    Ok(g.deform_conv2d(x, offsets, kernel_weights, pad))
}

// ---------------------------------------------------------------------------
// OPDB: position-aware deformable block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct OpdbParams {
    /// First offset-net convolution, `(C_mid, C + d_pe + 1, 3, 3)`.
    pub off1_w: Var,
    pub off1_b: Var,
    /// Final offset-net convolution, `(2K, C_mid, 3, 3)`; zero-initialized
    /// so the block starts as a plain residual convolution.
    pub off2_w: Var,
    pub off2_b: Var,
    pub deform_w: Var,
    pub deform_b: Var,
}

pub struct OpdbOutput {
    pub out: Var,
    /// Clamped offset field actually used for sampling, `(B, 2K, H, W)`.
    pub offsets: Var,
}

/// Deformable block conditioned on position: offsets are predicted from the
/// features, the sinusoidal lat/long encodings, and the distortion map.
pub fn opdb_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    pe: &PositionEncodingGrid,
    dmap: &DistortionMap,
    p: &OpdbParams,
    offset_clamp: f64,
) -> Result<OpdbOutput> {
    let (b, _, h, w) = dims4(g, x);
    if (pe.h, pe.w) != (h, w) || (dmap.h, dmap.w) != (h, w) {
        return Err(shape_mismatch(format!(
            "grids {}x{} / {}x{} vs features {h}x{w}",
            pe.h, pe.w, dmap.h, dmap.w
        )));
    }

    let pe_leaf = g.leaf(broadcast_grid::<T>(&pe.values, b));
    let dm_leaf = g.leaf(broadcast_grid::<T>(&dmap.values, b));
    let cat = g.concat_channels(&[x, pe_leaf, dm_leaf]);

    let hmid = g.conv2d(cat, p.off1_w, PadMode::WrapLon, 1);
    let hmid = g.bias_channel(hmid, p.off1_b);
    let hmid = g.leaky_relu(hmid, fs::<T>(LEAKY_SLOPE));
    let off = g.conv2d(hmid, p.off2_w, PadMode::WrapLon, 1);
    let off = g.bias_channel(off, p.off2_b);
    let off = g.clamp(off, fs::<T>(-offset_clamp), fs::<T>(offset_clamp));

    let d = deformable_sample(g, x, off, p.deform_w, PadMode::WrapLon)?;
    let d = g.bias_channel(d, p.deform_b);
    Ok(OpdbOutput {
        out: g.add(x, d),
        offsets: off,
    })
}

fn broadcast_grid<T: Scalar>(values: &ndarray::Array3<f64>, batch: usize) -> ArrayD<T> {
    let (c, h, w) = values.dim();
    let mut out = ArrayD::zeros(IxDyn(&[batch, c, h, w]));
    for bi in 0..batch {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[bi, ci, y, x]] = fs::<T>(values[[ci, y, x]]);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// SFF: spatial-frequency fusion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SffParams {
    /// Amplitude branch 1x1 convolutions; the second is zero-initialized.
    pub amp1_w: Var,
    pub amp1_b: Var,
    pub amp2_w: Var,
    pub amp2_b: Var,
    /// Phase branch, same structure.
    pub ph1_w: Var,
    pub ph1_b: Var,
    pub ph2_w: Var,
    pub ph2_b: Var,
    /// Fusion of `concat(x, y)` back to `C` channels, `(C, 2C, 1, 1)`.
    pub fuse_w: Var,
    pub fuse_b: Var,
}

/// FFT the features, process amplitude and phase separately (residual 1x1
/// stacks), recombine, inverse-transform, and fuse with the spatial branch.
/// With the branch tails zero-initialized and the fusion selecting the
/// frequency output, the block is the identity up to transform round-off.
pub fn sff_forward<T: Scalar>(g: &mut Graph<T>, x: Var, p: &SffParams) -> Result<Var> {
    let spec = g.fft2_reim(x);
    let amp = g.complex_abs(spec);
    let phase = g.complex_phase(spec);

    let branch = |g: &mut Graph<T>, v: Var, w1: Var, b1: Var, w2: Var, b2: Var| {
        let t = g.conv2d(v, w1, PadMode::Zero, 1);
        let t = g.bias_channel(t, b1);
        let t = g.leaky_relu(t, fs::<T>(LEAKY_SLOPE));
        let t = g.conv2d(t, w2, PadMode::Zero, 1);
        let t = g.bias_channel(t, b2);
        g.add(v, t)
    };
    let amp2 = branch(g, amp, p.amp1_w, p.amp1_b, p.amp2_w, p.amp2_b);
    let ph2 = branch(g, phase, p.ph1_w, p.ph1_b, p.ph2_w, p.ph2_b);

    let spec2 = g.polar_to_complex(amp2, ph2);
    let y = g.ifft2_real(spec2);

    let cat = g.concat_channels(&[x, y]);
    let fused = g.conv2d(cat, p.fuse_w, PadMode::Zero, 1);
    Ok(g.bias_channel(fused, p.fuse_b))
}

/// Fusion weight that passes the frequency branch through unchanged.
pub fn fuse_select_second_half<T: Scalar>(c: usize) -> ArrayD<T> {
    let mut w = ArrayD::zeros(IxDyn(&[c, 2 * c, 1, 1]));
    for i in 0..c {
        w[[i, c + i, 0, 0]] = T::one();
    }
    w
}

// ---------------------------------------------------------------------------
// Upsampling / sub-pixel wrappers
// ---------------------------------------------------------------------------

/// Band-limited upsampling by spectral zero-padding (`(H, W) -> (sH, sW)`).
pub fn fourier_upsample<T: Scalar>(g: &mut Graph<T>, x: Var, scale: usize) -> Result<Var> {
    if scale < 1 {
        return Err(invalid("fourier upsample scale must be >= 1"));
    }
    dims4(g, x);
    Ok(g.fourier_upsample(x, scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShuffleDirection {
    Up,
    Down,
}

/// Sub-pixel rearrangement; `Down` then `Up` with the same factor is the
/// identity bit-exactly.
pub fn pixel_shuffle<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    r: usize,
    direction: ShuffleDirection,
) -> Result<Var> {
    if r == 0 {
        return Err(invalid("shuffle factor must be positive"));
    }
    let (_, c, h, w) = dims4(g, x);
    match direction {
        ShuffleDirection::Down => {
            if h % r != 0 || w % r != 0 {
                return Err(invalid(format!("spatial {h}x{w} not divisible by {r}")));
            }
            Ok(g.pixel_shuffle_down(x, r))
        }
        ShuffleDirection::Up => {
            if c % (r * r) != 0 {
                return Err(invalid(format!("channels {c} not divisible by {}", r * r)));
            }
            Ok(g.pixel_shuffle_up(x, r))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::check::{finite_diff_check, project_loss, randn};
    use ndarray::{ArrayD, IxDyn};
    use rustfft::num_complex::Complex;

    /// Real signal whose spectrum magnitudes are bounded well away from
    /// zero, so amplitude/phase gradients stay smooth under perturbation.
    fn bounded_spectrum_signal(seed: u64, c: usize, h: usize, w: usize) -> ArrayD<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut out = ArrayD::zeros(IxDyn(&[1, c, h, w]));
        for ci in 0..c {
            let mut spec = ndarray::Array2::from_elem((h, w), Complex::new(0.0f64, 0.0));
            // Fill with conjugate symmetry so the inverse transform is real.
            for u in 0..h {
                for v in 0..w {
                    let (pu, pv) = ((h - u) % h, (w - v) % w);
                    if spec[[u, v]].norm() > 0.0 {
                        continue;
                    }
                    let mag = 1.0 + rng.gen::<f64>();
                    let self_conj = (pu, pv) == (u, v);
                    let phase = if self_conj {
                        if rng.gen::<bool>() {
                            0.0
                        } else {
                            std::f64::consts::PI
                        }
                    } else {
                        rng.gen::<f64>() * std::f64::consts::TAU
                    };
                    let z = Complex::from_polar(mag, phase);
                    spec[[u, v]] = z;
                    spec[[pu, pv]] = z.conj();
                }
            }
            crate::kernels::fft2_inplace(&mut spec, true);
            let norm = 1.0 / (h as f64 * w as f64);
            for y in 0..h {
                for x in 0..w {
                    out[[0, ci, y, x]] = spec[[y, x]].re * norm;
                }
            }
        }
        out
    }

    fn attn_inputs(c: usize) -> [ArrayD<f64>; 5] {
        [
            randn(40, &[1, c, 8, 8]),
            randn(41, &[c, 3 * c]).mapv(|v| v * 0.3),
            randn(42, &[3 * c]).mapv(|v| v * 0.1),
            randn(43, &[c, c]).mapv(|v| v * 0.3),
            randn(44, &[c]).mapv(|v| v * 0.1),
        ]
    }

    fn attn_params(vars: &[crate::tape::Var]) -> WindowAttentionParams {
        WindowAttentionParams {
            qkv_w: vars[1],
            qkv_b: vars[2],
            proj_w: vars[3],
            proj_b: vars[4],
        }
    }

    #[test]
    fn attention_with_zero_value_projection_is_identity() {
        let c = 8;
        let mut inputs = attn_inputs(c);
        // zero the V third of the qkv weight and bias, and the out proj bias
        for col in 2 * c..3 * c {
            for row in 0..c {
                inputs[1][[row, col]] = 0.0;
            }
            inputs[2][[col]] = 0.0;
        }
        inputs[4].fill(0.0);

        let mut g = Graph::<f64>::new();
        let vars: Vec<_> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let p = attn_params(&vars);
        let y = window_attention(&mut g, vars[0], &p, 4, 2, 0).unwrap();
        let diff = g
            .value(y)
            .iter()
            .zip(inputs[0].iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-12, "residual identity broken: {diff}");
    }

    #[test]
    fn attention_preserves_shape_with_and_without_padding() {
        let c = 8;
        let inputs = attn_inputs(c);
        let mut g = Graph::<f64>::new();
        let vars: Vec<_> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let p = attn_params(&vars);
        // (1, 8, 16, 16) window 8
        let x = g.leaf(randn(45, &[1, c, 16, 16]));
        let y = window_attention(&mut g, x, &p, 8, 4, 0).unwrap();
        assert_eq!(g.shape(y), &[1, c, 16, 16]);

        // indivisible size: reflect-pad then crop keeps the shape
        let x = g.leaf(randn(46, &[1, c, 10, 13]));
        let y = window_attention(&mut g, x, &p, 8, 2, 0).unwrap();
        assert_eq!(g.shape(y), &[1, c, 10, 13]);

        // shifted variant
        let x = g.leaf(randn(47, &[1, c, 16, 16]));
        let y = window_attention(&mut g, x, &p, 8, 2, 4).unwrap();
        assert_eq!(g.shape(y), &[1, c, 16, 16]);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let c = 8;
        let inputs = attn_inputs(c);
        let mut g = Graph::<f64>::new();
        let vars: Vec<_> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let p = attn_params(&vars);
        assert!(window_attention(&mut g, vars[0], &p, 4, 3, 0).is_err());
    }

    #[test]
    fn attention_gradients_match_fd() {
        let inputs = attn_inputs(4);
        for idx in 0..5 {
            let rel = finite_diff_check(&inputs, idx, |g, vars| {
                let p = attn_params(vars);
                let y = window_attention(g, vars[0], &p, 4, 2, 0).unwrap();
                project_loss(g, y, 77)
            });
            assert!(rel < 1e-4, "attention arg {idx}: rel err {rel}");
        }
    }

    #[test]
    fn shifted_attention_gradient_matches_fd() {
        let inputs = attn_inputs(4);
        let rel = finite_diff_check(&inputs, 0, |g, vars| {
            let p = attn_params(vars);
            let y = window_attention(g, vars[0], &p, 4, 2, 2).unwrap();
            project_loss(g, y, 76)
        });
        assert!(rel < 1e-4, "shifted attention rel err {rel}");
    }

    fn ca_inputs(c: usize, r: usize) -> [ArrayD<f64>; 5] {
        [
            randn(50, &[2, c, 4, 4]),
            randn(51, &[c, c / r]).mapv(|v| v * 0.5),
            randn(52, &[c / r]).mapv(|v| v * 0.1),
            randn(53, &[c / r, c]).mapv(|v| v * 0.5),
            randn(54, &[c]).mapv(|v| v * 0.1),
        ]
    }

    fn ca_params(vars: &[crate::tape::Var]) -> ChannelAttentionParams {
        ChannelAttentionParams {
            fc1_w: vars[1],
            fc1_b: vars[2],
            fc2_w: vars[3],
            fc2_b: vars[4],
        }
    }

    #[test]
    fn saturated_gate_passes_input_through() {
        let mut inputs = ca_inputs(8, 4);
        inputs[3].fill(0.0);
        inputs[4].fill(30.0); // sigmoid(30) ~ 1
        let mut g = Graph::<f64>::new();
        let vars: Vec<_> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let p = ca_params(&vars);
        let y = channel_attention(&mut g, vars[0], &p, 4).unwrap();
        let diff = g
            .value(y)
            .iter()
            .zip(inputs[0].iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-9, "saturated gate should be identity: {diff}");
    }

    #[test]
    fn pooling_of_constant_channels_is_the_constant() {
        let mut g = Graph::<f64>::new();
        let mut x = ArrayD::zeros(IxDyn(&[1, 3, 4, 5]));
        for (ci, v) in [0.3, -1.2, 7.5].iter().enumerate() {
            for y in 0..4 {
                for xx in 0..5 {
                    x[[0, ci, y, xx]] = *v;
                }
            }
        }
        let xv = g.leaf(x);
        let pooled = g.global_avg_pool(xv);
        assert!((g.value(pooled)[[0, 0]] - 0.3).abs() < 1e-12);
        assert!((g.value(pooled)[[0, 1]] + 1.2).abs() < 1e-12);
        assert!((g.value(pooled)[[0, 2]] - 7.5).abs() < 1e-12);
    }

    #[test]
    fn channel_attention_rejects_bad_reduction() {
        let inputs = ca_inputs(8, 4);
        let mut g = Graph::<f64>::new();
        let vars: Vec<_> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let p = ca_params(&vars);
        assert!(channel_attention(&mut g, vars[0], &p, 3).is_err());
        assert!(channel_attention(&mut g, vars[0], &p, 0).is_err());
    }

    #[test]
    fn channel_attention_gradients_match_fd() {
        let inputs = ca_inputs(4, 2);
        for idx in 0..5 {
            let rel = finite_diff_check(&inputs, idx, |g, vars| {
                let p = ca_params(vars);
                let y = channel_attention(g, vars[0], &p, 2).unwrap();
                project_loss(g, y, 75)
            });
            assert!(rel < 1e-5, "channel attention arg {idx}: rel err {rel}");
        }
    }

    #[test]
    fn deformable_identity_kernel_shifts_a_ramp() {
        // 1x1 kernel with weight 1 and offset (0, 0.5): on a column ramp
        // the bilinear sample is exactly col + 0.5 away from the seam.
        let mut g = Graph::<f64>::new();
        let mut x = ArrayD::zeros(IxDyn(&[1, 1, 3, 8]));
        for y in 0..3 {
            for c in 0..8 {
                x[[0, 1 - 1, y, c]] = c as f64;
            }
        }
        let xv = g.leaf(x);
        let mut off = ArrayD::zeros(IxDyn(&[1, 2, 3, 8]));
        for y in 0..3 {
            for c in 0..8 {
                off[[0, 1, y, c]] = 0.5;
            }
        }
        let ov = g.leaf(off);
        let w = g.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0));
        let y = deformable_sample(&mut g, xv, ov, w, PadMode::WrapLon).unwrap();
        for row in 0..3 {
            for c in 0..7 {
                let v = g.value(y)[[0, 0, row, c]];
                assert!((v - (c as f64 + 0.5)).abs() < 1e-12, "col {c}: {v}");
            }
            // the seam wraps to (7 + 0) / 2
            let v = g.value(y)[[0, 0, row, 7]];
            assert!((v - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn deformable_sample_validates_inputs() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(randn(60, &[1, 2, 4, 4]));
        let w = g.leaf(randn(61, &[2, 2, 3, 3]));
        // wrong tap count
        let bad_off = g.leaf(randn(62, &[1, 10, 4, 4]));
        assert!(deformable_sample(&mut g, x, bad_off, w, PadMode::WrapLon).is_err());
        // NaN offsets
        let mut off = randn(63, &[1, 18, 4, 4]);
        off[[0, 0, 0, 0]] = f64::NAN;
        let off = g.leaf(off);
        assert!(deformable_sample(&mut g, x, off, w, PadMode::WrapLon).is_err());
    }

    fn opdb_inputs(c: usize, d_pe: usize, h: usize, w: usize) -> [ArrayD<f64>; 7] {
        let cin = c + d_pe + 1;
        [
            randn(70, &[1, c, h, w]),
            randn(71, &[c, cin, 3, 3]).mapv(|v| v * 0.2),
            randn(72, &[c]).mapv(|v| v * 0.05),
            randn(73, &[18, c, 3, 3]).mapv(|v| v * 0.1),
            randn(74, &[18]).mapv(|v| v * 0.2),
            randn(75, &[c, c, 3, 3]).mapv(|v| v * 0.2),
            randn(76, &[c]).mapv(|v| v * 0.05),
        ]
    }

    fn opdb_params(vars: &[crate::tape::Var]) -> OpdbParams {
        OpdbParams {
            off1_w: vars[1],
            off1_b: vars[2],
            off2_w: vars[3],
            off2_b: vars[4],
            deform_w: vars[5],
            deform_b: vars[6],
        }
    }

    #[test]
    fn zero_initialized_opdb_is_residual_plain_convolution() {
        let (c, d_pe, h, w) = (6, 8, 6, 8);
        let mut inputs = opdb_inputs(c, d_pe, h, w);
        inputs[3].fill(0.0); // final offset layer
        inputs[4].fill(0.0);

        let pe = crate::erp::erp_position_grid(h, w, d_pe).unwrap();
        let dmap = crate::erp::distortion_map(h, w).unwrap();

        let mut g = Graph::<f64>::new();
        let vars: Vec<_> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let p = opdb_params(&vars);
        let out = opdb_forward(&mut g, vars[0], &pe, &dmap, &p, 4.0).unwrap();
        assert_eq!(g.shape(out.out), &[1, c, h, w]);

        // independent route: x + conv(x) with circular-horizontal padding
        let conv = g.conv2d(vars[0], vars[5], PadMode::WrapLon, 1);
        let conv = g.bias_channel(conv, vars[6]);
        let want = g.add(vars[0], conv);
        let diff = g
            .value(out.out)
            .iter()
            .zip(g.value(want).iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-6, "zero-offset OPDB vs plain conv: {diff}");
        assert!(g.value(out.offsets).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn opdb_shape_preservation_and_grid_mismatch() {
        let (c, d_pe, h, w) = (16, 8, 8, 16);
        let inputs = opdb_inputs(c, d_pe, h, w);
        let pe = crate::erp::erp_position_grid(h, w, d_pe).unwrap();
        let dmap = crate::erp::distortion_map(h, w).unwrap();
        let mut g = Graph::<f64>::new();
        let vars: Vec<_> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let p = opdb_params(&vars);
        let out = opdb_forward(&mut g, vars[0], &pe, &dmap, &p, 8.0).unwrap();
        assert_eq!(g.shape(out.out), &[1, c, h, w]);

        let bad_pe = crate::erp::erp_position_grid(h, w + 2, d_pe).unwrap();
        assert!(opdb_forward(&mut g, vars[0], &bad_pe, &dmap, &p, 8.0).is_err());
    }

    #[test]
    fn opdb_gradients_match_fd() {
        let (c, d_pe, h, w) = (3, 4, 5, 6);
        let inputs = opdb_inputs(c, d_pe, h, w);
        let pe = crate::erp::erp_position_grid(h, w, d_pe).unwrap();
        let dmap = crate::erp::distortion_map(h, w).unwrap();
        // x, offset weights, deform weights
        for idx in [0usize, 1, 3, 5] {
            let pe = pe.clone();
            let dmap = dmap.clone();
            let rel = finite_diff_check(&inputs, idx, move |g, vars| {
                let p = opdb_params(vars);
                let out = opdb_forward(g, vars[0], &pe, &dmap, &p, 4.0).unwrap();
                project_loss(g, out.out, 74)
            });
            assert!(rel < 1e-4, "opdb arg {idx}: rel err {rel}");
        }
    }

    fn sff_inputs(c: usize, h: usize, w: usize) -> [ArrayD<f64>; 11] {
        [
            bounded_spectrum_signal(80, c, h, w),
            randn(81, &[c, c, 1, 1]).mapv(|v| v * 0.3),
            randn(82, &[c]).mapv(|v| v * 0.1),
            randn(83, &[c, c, 1, 1]).mapv(|v| v * 0.3),
            randn(84, &[c]).mapv(|v| v * 0.1),
            randn(85, &[c, c, 1, 1]).mapv(|v| v * 0.3),
            randn(86, &[c]).mapv(|v| v * 0.1),
            randn(87, &[c, c, 1, 1]).mapv(|v| v * 0.3),
            randn(88, &[c]).mapv(|v| v * 0.1),
            randn(89, &[c, 2 * c, 1, 1]).mapv(|v| v * 0.3),
            randn(90, &[c]).mapv(|v| v * 0.1),
        ]
    }

    fn sff_params(vars: &[crate::tape::Var]) -> SffParams {
        SffParams {
            amp1_w: vars[1],
            amp1_b: vars[2],
            amp2_w: vars[3],
            amp2_b: vars[4],
            ph1_w: vars[5],
            ph1_b: vars[6],
            ph2_w: vars[7],
            ph2_b: vars[8],
            fuse_w: vars[9],
            fuse_b: vars[10],
        }
    }

    #[test]
    fn sff_pass_through_init_is_identity() {
        let (c, h, w) = (4, 6, 8);
        let mut inputs = sff_inputs(c, h, w);
        inputs[0] = randn(91, &[1, c, h, w]); // any signal works here
        inputs[3].fill(0.0); // amp branch tail
        inputs[4].fill(0.0);
        inputs[7].fill(0.0); // phase branch tail
        inputs[8].fill(0.0);
        inputs[9] = fuse_select_second_half::<f64>(c);
        inputs[10].fill(0.0);

        let mut g = Graph::<f64>::new();
        let vars: Vec<_> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let p = sff_params(&vars);
        let y = sff_forward(&mut g, vars[0], &p).unwrap();
        let diff = g
            .value(y)
            .iter()
            .zip(inputs[0].iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-10, "pass-through SFF should be identity: {diff}");
    }

    #[test]
    fn constant_input_concentrates_amplitude_at_dc() {
        let (c, h, w) = (2, 4, 6);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[1, c, h, w]), 0.7));
        let spec = g.fft2_reim(x);
        let amp = g.complex_abs(spec);
        let av = g.value(amp);
        for ci in 0..c {
            assert!((av[[0, ci, 0, 0]] - 0.7 * (h * w) as f64).abs() < 1e-9);
            for y in 0..h {
                for xx in 0..w {
                    if (y, xx) != (0, 0) {
                        assert!(av[[0, ci, y, xx]].abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn sff_gradients_match_fd() {
        let inputs = sff_inputs(2, 4, 4);
        // input, one weight from each branch, and the fusion
        for idx in [0usize, 1, 3, 5, 7, 9] {
            let rel = finite_diff_check(&inputs, idx, |g, vars| {
                let p = sff_params(vars);
                let y = sff_forward(g, vars[0], &p).unwrap();
                project_loss(g, y, 73)
            });
            assert!(rel < 1e-4, "sff arg {idx}: rel err {rel}");
        }
    }

    #[test]
    fn wrapper_validation_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(randn(95, &[1, 4, 6, 6]));
        assert!(fourier_upsample(&mut g, x, 0).is_err());
        assert!(pixel_shuffle(&mut g, x, 4, ShuffleDirection::Down).is_err());
        assert!(pixel_shuffle(&mut g, x, 4, ShuffleDirection::Up).is_err());
        assert!(pixel_shuffle(&mut g, x, 0, ShuffleDirection::Up).is_err());

        // r = 1 is the identity in both directions
        let down = pixel_shuffle(&mut g, x, 1, ShuffleDirection::Down).unwrap();
        assert_eq!(g.value(down), g.value(x));
        let up = pixel_shuffle(&mut g, x, 1, ShuffleDirection::Up).unwrap();
        assert_eq!(g.value(up), g.value(x));
    }

    #[test]
    fn pixel_shuffle_shape_law() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(randn(96, &[1, 1, 4, 4]));
        let down = pixel_shuffle(&mut g, x, 2, ShuffleDirection::Down).unwrap();
        assert_eq!(g.shape(down), &[1, 4, 2, 2]);
        let up = pixel_shuffle(&mut g, down, 2, ShuffleDirection::Up).unwrap();
        assert_eq!(g.value(up), g.value(x));
    }
}
