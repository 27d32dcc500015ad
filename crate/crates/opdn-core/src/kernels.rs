//! Raw numeric kernels behind the tape ops: padded convolution via im2col,
//! deformable bilinear sampling, 2-D FFT plumbing, spectral upsampling, and
//! sub-pixel rearrangement. Forward and adjoint pairs live side by side.

use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView4, Ix4};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::tape::Scalar;

/// Border handling for spatial kernels. `WrapLon` wraps columns (ERP is
/// horizontally periodic) and zero-pads rows; `Zero` zero-pads both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    Zero,
    #[default]
    WrapLon,
}

pub(crate) fn as4<T: Scalar>(a: &ArrayD<T>) -> ArrayView4<'_, T> {
    a.view().into_dimensionality::<Ix4>().expect("4-d tensor")
}

// ---------------------------------------------------------------------------
// Plain convolution (stride >= 1, odd kernels, 'same'-style padding)
// ---------------------------------------------------------------------------

fn pad_input<T: Scalar>(x: &ArrayView4<T>, ph: usize, pw: usize, pad: PadMode) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::zeros((b, c, h + 2 * ph, w + 2 * pw));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xp in 0..w + 2 * pw {
                    let src = xp as i64 - pw as i64;
                    let v = match pad {
                        PadMode::Zero => {
                            if src < 0 || src >= w as i64 {
                                T::zero()
                            } else {
                                x[[bi, ci, y, src as usize]]
                            }
                        }
                        PadMode::WrapLon => x[[bi, ci, y, src.rem_euclid(w as i64) as usize]],
                    };
                    out[[bi, ci, y + ph, xp]] = v;
                }
            }
        }
    }
    out
}

/// Adjoint of `pad_input`: fold gradients from the padded frame back onto
/// the source pixels.
fn unpad_accumulate<T: Scalar>(
    gpad: &Array4<T>,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    pad: PadMode,
) -> Array4<T> {
    let (b, c, _, wp) = gpad.dim();
    let mut out = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xp in 0..wp {
                    let src = xp as i64 - pw as i64;
                    match pad {
                        PadMode::Zero => {
                            if src >= 0 && src < w as i64 {
                                out[[bi, ci, y, src as usize]] += gpad[[bi, ci, y + ph, xp]];
                            }
                        }
                        PadMode::WrapLon => {
                            out[[bi, ci, y, src.rem_euclid(w as i64) as usize]] +=
                                gpad[[bi, ci, y + ph, xp]];
                        }
                    }
                }
            }
        }
    }
    out
}

fn im2col<T: Scalar>(
    padded: &ArrayView4<T>,
    batch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Array2<T> {
    let c = padded.dim().1;
    let mut cols = Array2::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let sy = oy * stride + ky;
                    for ox in 0..ow {
                        cols[[row, oy * ow + ox]] = padded[[batch, ci, sy, ox * stride + kx]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_accumulate<T: Scalar>(
    cols: &Array2<T>,
    gpad: &mut Array4<T>,
    batch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let c = gpad.dim().1;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let sy = oy * stride + ky;
                    for ox in 0..ow {
                        gpad[[batch, ci, sy, ox * stride + kx]] += cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
}

pub fn conv2d_out_size(h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> (usize, usize) {
    let ph = (kh - 1) / 2;
    let pw = (kw - 1) / 2;
    ((h + 2 * ph - kh) / stride + 1, (w + 2 * pw - kw) / stride + 1)
}

pub fn conv2d_forward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    pad: PadMode,
    stride: usize,
) -> ArrayD<T> {
    let xv = as4(x);
    let wv = as4(w);
    let (b, cin, h, wd) = xv.dim();
    let (cout, cin_w, kh, kw) = wv.dim();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d expects odd kernels");
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let (oh, ow) = conv2d_out_size(h, wd, kh, kw, stride);

    let padded = pad_input(&xv, ph, pw, pad);
    let wmat = wv
        .to_shape((cout, cin * kh * kw))
        .expect("weights are contiguous")
        .to_owned();

    let mut out = Array4::<T>::zeros((b, cout, oh, ow));
    for bi in 0..b {
        let cols = im2col(&padded.view(), bi, kh, kw, stride, oh, ow);
        let res = wmat.dot(&cols); // (cout, oh*ow)
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[[bi, co, oy, ox]] = res[[co, oy * ow + ox]];
                }
            }
        }
    }
    out.into_dyn()
}

pub fn conv2d_backward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    g: &ArrayD<T>,
    pad: PadMode,
    stride: usize,
) -> (ArrayD<T>, ArrayD<T>) {
    let xv = as4(x);
    let wv = as4(w);
    let gv = as4(g);
    let (b, cin, h, wd) = xv.dim();
    let (cout, _, kh, kw) = wv.dim();
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let (_, _, oh, ow) = gv.dim();

    let padded = pad_input(&xv, ph, pw, pad);
    let wmat = wv
        .to_shape((cout, cin * kh * kw))
        .expect("weights are contiguous")
        .to_owned();

    let mut gw = Array2::<T>::zeros((cout, cin * kh * kw));
    let mut gpad = Array4::<T>::zeros(padded.dim());
    for bi in 0..b {
        let cols = im2col(&padded.view(), bi, kh, kw, stride, oh, ow);
        let mut gmat = Array2::<T>::zeros((cout, oh * ow));
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    gmat[[co, oy * ow + ox]] = gv[[bi, co, oy, ox]];
                }
            }
        }
        gw = gw + gmat.dot(&cols.t());
        let gcols = wmat.t().dot(&gmat);
        col2im_accumulate(&gcols, &mut gpad, bi, kh, kw, stride, oh, ow);
    }
    let gx = unpad_accumulate(&gpad, h, wd, ph, pw, pad);
    (
        gx.into_dyn(),
        gw.into_shape_with_order((cout, cin, kh, kw))
            .expect("shape")
            .into_dyn(),
    )
}

// ---------------------------------------------------------------------------
// Deformable convolution (stride 1, per-tap offsets shared across channels)
// ---------------------------------------------------------------------------

/// Bilinear sample of one channel plane at real coordinates `(py, px)`.
/// Columns wrap (or read zero), rows outside the image read zero.
/// Returns (value, d/dpy, d/dpx).
fn bilinear_with_grad<T: Scalar>(
    plane: &ArrayView2<T>,
    py: f64,
    px: f64,
    pad: PadMode,
) -> (T, T, T) {
    let (h, w) = plane.dim();
    let y0 = py.floor();
    let x0 = px.floor();
    let fy = T::from_f64(py - y0).unwrap();
    let fx = T::from_f64(px - x0).unwrap();
    let y0 = y0 as i64;
    let x0 = x0 as i64;

    let fetch = |y: i64, x: i64| -> T {
        if y < 0 || y >= h as i64 {
            return T::zero();
        }
        let xi = match pad {
            PadMode::WrapLon => x.rem_euclid(w as i64) as usize,
            PadMode::Zero => {
                if x < 0 || x >= w as i64 {
                    return T::zero();
                }
                x as usize
            }
        };
        plane[[y as usize, xi]]
    };

    let v00 = fetch(y0, x0);
    let v01 = fetch(y0, x0 + 1);
    let v10 = fetch(y0 + 1, x0);
    let v11 = fetch(y0 + 1, x0 + 1);

    let one = T::one();
    let value = v00 * (one - fy) * (one - fx)
        + v01 * (one - fy) * fx
        + v10 * fy * (one - fx)
        + v11 * fy * fx;
    let d_dy = (v10 - v00) * (one - fx) + (v11 - v01) * fx;
    let d_dx = (v01 - v00) * (one - fy) + (v11 - v10) * fy;
    (value, d_dy, d_dx)
}

/// Scatter a gradient to the four bilinear corners of `(py, px)`.
fn bilinear_scatter<T: Scalar>(
    gplane: &mut ndarray::ArrayViewMut2<T>,
    py: f64,
    px: f64,
    g: T,
    pad: PadMode,
) {
    let (h, w) = gplane.dim();
    let y0f = py.floor();
    let x0f = px.floor();
    let fy = T::from_f64(py - y0f).unwrap();
    let fx = T::from_f64(px - x0f).unwrap();
    let y0 = y0f as i64;
    let x0 = x0f as i64;
    let one = T::one();
    let corners = [
        (y0, x0, (one - fy) * (one - fx)),
        (y0, x0 + 1, (one - fy) * fx),
        (y0 + 1, x0, fy * (one - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ];
    for (y, x, wgt) in corners {
        if y < 0 || y >= h as i64 {
            continue;
        }
        let xi = match pad {
            PadMode::WrapLon => x.rem_euclid(w as i64) as usize,
            PadMode::Zero => {
                if x < 0 || x >= w as i64 {
                    continue;
                }
                x as usize
            }
        };
        gplane[[y as usize, xi]] += g * wgt;
    }
}

/// Deformed im2col: `cols[ci*K + k, y*W + x]` holds the bilinear sample for
/// tap `k` at output pixel `(y, x)`.
fn deform_cols<T: Scalar>(
    xv: &ArrayView4<T>,
    off: &ArrayView4<T>,
    batch: usize,
    kh: usize,
    kw: usize,
    pad: PadMode,
) -> Array2<T> {
    let (_, cin, h, w) = xv.dim();
    let taps = kh * kw;
    let (ph, pw) = ((kh - 1) as i64 / 2, (kw - 1) as i64 / 2);
    let mut cols = Array2::zeros((cin * taps, h * w));
    for k in 0..taps {
        let (ky, kx) = (k / kw, k % kw);
        for y in 0..h {
            for x in 0..w {
                let dy = off[[batch, 2 * k, y, x]].to_f64().unwrap();
                let dx = off[[batch, 2 * k + 1, y, x]].to_f64().unwrap();
                let py = y as f64 + (ky as i64 - ph) as f64 + dy;
                let px = x as f64 + (kx as i64 - pw) as f64 + dx;
                for ci in 0..cin {
                    let plane = xv.index_axis(ndarray::Axis(0), batch);
                    let plane = plane.index_axis(ndarray::Axis(0), ci);
                    let (v, _, _) = bilinear_with_grad(&plane, py, px, pad);
                    cols[[ci * taps + k, y * w + x]] = v;
                }
            }
        }
    }
    cols
}

pub fn deform_conv_forward<T: Scalar>(
    x: &ArrayD<T>,
    offsets: &ArrayD<T>,
    w: &ArrayD<T>,
    pad: PadMode,
) -> ArrayD<T> {
    let xv = as4(x);
    let ov = as4(offsets);
    let wv = as4(w);
    let (b, cin, h, wd) = xv.dim();
    let (cout, cin_w, kh, kw) = wv.dim();
    assert_eq!(cin, cin_w, "deform_conv channel mismatch");
    assert_eq!(ov.dim().1, 2 * kh * kw, "offset channels must be 2K");
    assert_eq!((ov.dim().2, ov.dim().3), (h, wd), "offset spatial mismatch");

    let wmat = wv
        .to_shape((cout, cin * kh * kw))
        .expect("weights are contiguous")
        .to_owned();
    let mut out = Array4::<T>::zeros((b, cout, h, wd));
    for bi in 0..b {
        let cols = deform_cols(&xv, &ov, bi, kh, kw, pad);
        let res = wmat.dot(&cols);
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    out[[bi, co, y, xx]] = res[[co, y * wd + xx]];
                }
            }
        }
    }
    out.into_dyn()
}

pub fn deform_conv_backward<T: Scalar>(
    x: &ArrayD<T>,
    offsets: &ArrayD<T>,
    w: &ArrayD<T>,
    g: &ArrayD<T>,
    pad: PadMode,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>) {
    let xv = as4(x);
    let ov = as4(offsets);
    let wv = as4(w);
    let gv = as4(g);
    let (b, cin, h, wd) = xv.dim();
    let (cout, _, kh, kw) = wv.dim();
    let taps = kh * kw;
    let (ph, pw) = ((kh - 1) as i64 / 2, (kw - 1) as i64 / 2);

    let wmat = wv
        .to_shape((cout, cin * taps))
        .expect("weights are contiguous")
        .to_owned();

    let mut gx = Array4::<T>::zeros((b, cin, h, wd));
    let mut goff = Array4::<T>::zeros(ov.dim());
    let mut gw = Array2::<T>::zeros((cout, cin * taps));

    for bi in 0..b {
        let cols = deform_cols(&xv, &ov, bi, kh, kw, pad);
        let mut gmat = Array2::<T>::zeros((cout, h * wd));
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    gmat[[co, y * wd + xx]] = gv[[bi, co, y, xx]];
                }
            }
        }
        gw = gw + gmat.dot(&cols.t());
        let gcols = wmat.t().dot(&gmat); // (cin*taps, h*wd)

        for k in 0..taps {
            let (ky, kx) = (k / kw, k % kw);
            for y in 0..h {
                for xx in 0..wd {
                    let dy = ov[[bi, 2 * k, y, xx]].to_f64().unwrap();
                    let dx = ov[[bi, 2 * k + 1, y, xx]].to_f64().unwrap();
                    let py = y as f64 + (ky as i64 - ph) as f64 + dy;
                    let px = xx as f64 + (kx as i64 - pw) as f64 + dx;
                    let mut acc_dy = T::zero();
                    let mut acc_dx = T::zero();
                    for ci in 0..cin {
                        let gs = gcols[[ci * taps + k, y * wd + xx]];
                        let plane = xv.index_axis(ndarray::Axis(0), bi);
                        let plane = plane.index_axis(ndarray::Axis(0), ci);
                        let (_, d_dy, d_dx) = bilinear_with_grad(&plane, py, px, pad);
                        acc_dy += gs * d_dy;
                        acc_dx += gs * d_dx;
                        let mut gplane = gx.index_axis_mut(ndarray::Axis(0), bi);
                        let mut gplane = gplane.index_axis_mut(ndarray::Axis(0), ci);
                        bilinear_scatter(&mut gplane, py, px, gs, pad);
                    }
                    goff[[bi, 2 * k, y, xx]] += acc_dy;
                    goff[[bi, 2 * k + 1, y, xx]] += acc_dx;
                }
            }
        }
    }
    (
        gx.into_dyn(),
        goff.into_dyn(),
        gw.into_shape_with_order((cout, cin, kh, kw))
            .expect("shape")
            .into_dyn(),
    )
}

// ---------------------------------------------------------------------------
// 2-D FFT plumbing (unnormalized, rustfft conventions)
// ---------------------------------------------------------------------------

pub fn fft2_inplace<T: Scalar>(data: &mut Array2<Complex<T>>, inverse: bool) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::<T>::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for mut row in data.rows_mut() {
        let slice = row.as_slice_mut().expect("rows are contiguous");
        row_fft.process(slice);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); h];
    for x in 0..w {
        for y in 0..h {
            scratch[y] = data[[y, x]];
        }
        col_fft.process(&mut scratch);
        for y in 0..h {
            data[[y, x]] = scratch[y];
        }
    }
}

fn plane_to_complex<T: Scalar>(plane: &ArrayView2<T>) -> Array2<Complex<T>> {
    plane.mapv(|v| Complex::new(v, T::zero()))
}

/// Per-channel forward FFT, packed `(B, 2C, H, W)`: real parts first.
pub fn fft2_reim_forward<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    let xv = as4(x);
    let (b, c, h, w) = xv.dim();
    let mut out = Array4::<T>::zeros((b, 2 * c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let plane = xv.index_axis(ndarray::Axis(0), bi);
            let plane = plane.index_axis(ndarray::Axis(0), ci);
            let mut buf = plane_to_complex(&plane);
            fft2_inplace(&mut buf, false);
            for y in 0..h {
                for xx in 0..w {
                    out[[bi, ci, y, xx]] = buf[[y, xx]].re;
                    out[[bi, c + ci, y, xx]] = buf[[y, xx]].im;
                }
            }
        }
    }
    out.into_dyn()
}

/// Adjoint of `fft2_reim_forward`: `gx = Re(IFFT_u(gRe + i gIm))`.
pub fn fft2_reim_backward<T: Scalar>(g: &ArrayD<T>) -> ArrayD<T> {
    let gv = as4(g);
    let (b, c2, h, w) = gv.dim();
    let c = c2 / 2;
    let mut out = Array4::<T>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let mut buf = Array2::from_shape_fn((h, w), |(y, xx)| {
                Complex::new(gv[[bi, ci, y, xx]], gv[[bi, c + ci, y, xx]])
            });
            fft2_inplace(&mut buf, true);
            for y in 0..h {
                for xx in 0..w {
                    out[[bi, ci, y, xx]] = buf[[y, xx]].re;
                }
            }
        }
    }
    out.into_dyn()
}

/// Normalized inverse transform of a packed spectrum, real part only.
pub fn ifft2_real_forward<T: Scalar>(z: &ArrayD<T>) -> ArrayD<T> {
    let zv = as4(z);
    let (b, c2, h, w) = zv.dim();
    let c = c2 / 2;
    let norm = T::from_f64(1.0 / (h as f64 * w as f64)).unwrap();
    let mut out = Array4::<T>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let mut buf = Array2::from_shape_fn((h, w), |(y, xx)| {
                Complex::new(zv[[bi, ci, y, xx]], zv[[bi, c + ci, y, xx]])
            });
            fft2_inplace(&mut buf, true);
            for y in 0..h {
                for xx in 0..w {
                    out[[bi, ci, y, xx]] = buf[[y, xx]].re * norm;
                }
            }
        }
    }
    out.into_dyn()
}

/// Adjoint of `ifft2_real_forward`: packed `FFT_u(g) / (H*W)`.
pub fn ifft2_real_backward<T: Scalar>(g: &ArrayD<T>) -> ArrayD<T> {
    let gv = as4(g);
    let (b, c, h, w) = gv.dim();
    let norm = T::from_f64(1.0 / (h as f64 * w as f64)).unwrap();
    let mut out = Array4::<T>::zeros((b, 2 * c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let plane = gv.index_axis(ndarray::Axis(0), bi);
            let plane = plane.index_axis(ndarray::Axis(0), ci);
            let mut buf = plane_to_complex(&plane);
            fft2_inplace(&mut buf, false);
            for y in 0..h {
                for xx in 0..w {
                    out[[bi, ci, y, xx]] = buf[[y, xx]].re * norm;
                    out[[bi, c + ci, y, xx]] = buf[[y, xx]].im * norm;
                }
            }
        }
    }
    out.into_dyn()
}

// ---------------------------------------------------------------------------
// Fourier upsampling: spectral zero-padding with Nyquist-bin splitting
// ---------------------------------------------------------------------------

/// Where input frequency bin `a` of an `n`-point transform lands in an
/// `s*n`-point spectrum. The shared Nyquist bin of even `n` splits in half.
fn freq_targets(a: usize, n: usize, s: usize) -> Vec<(usize, f64)> {
    let half = n / 2;
    if n % 2 == 0 && a == half {
        if s == 1 {
            vec![(half, 1.0)]
        } else {
            vec![(half, 0.5), (s * n - half, 0.5)]
        }
    } else if a <= half {
        vec![(a, 1.0)]
    } else {
        vec![(s * n - (n - a), 1.0)]
    }
}

/// Band-limited (sinc) upsampling by an integer factor, per channel.
pub fn fourier_upsample_forward<T: Scalar>(x: &ArrayD<T>, scale: usize) -> ArrayD<T> {
    let xv = as4(x);
    let (b, c, h, w) = xv.dim();
    let (oh, ow) = (h * scale, w * scale);
    let amp = T::from_f64((scale * scale) as f64).unwrap();
    let norm = T::from_f64(1.0 / (oh as f64 * ow as f64)).unwrap();

    let row_map: Vec<Vec<(usize, f64)>> = (0..h).map(|a| freq_targets(a, h, scale)).collect();
    let col_map: Vec<Vec<(usize, f64)>> = (0..w).map(|a| freq_targets(a, w, scale)).collect();

    let mut out = Array4::<T>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            let plane = xv.index_axis(ndarray::Axis(0), bi);
            let plane = plane.index_axis(ndarray::Axis(0), ci);
            let mut spec = plane_to_complex(&plane);
            fft2_inplace(&mut spec, false);

            let mut big = Array2::from_elem((oh, ow), Complex::new(T::zero(), T::zero()));
            for u in 0..h {
                for v in 0..w {
                    let f = spec[[u, v]] * amp;
                    for &(uo, wu) in &row_map[u] {
                        for &(vo, wv) in &col_map[v] {
                            big[[uo, vo]] = big[[uo, vo]] + f * T::from_f64(wu * wv).unwrap();
                        }
                    }
                }
            }
            fft2_inplace(&mut big, true);
            for y in 0..oh {
                for xx in 0..ow {
                    out[[bi, ci, y, xx]] = big[[y, xx]].re * norm;
                }
            }
        }
    }
    out.into_dyn()
}

/// Adjoint of `fourier_upsample_forward`.
pub fn fourier_upsample_backward<T: Scalar>(
    g: &ArrayD<T>,
    in_h: usize,
    in_w: usize,
    scale: usize,
) -> ArrayD<T> {
    let gv = as4(g);
    let (b, c, oh, ow) = gv.dim();
    let amp = T::from_f64((scale * scale) as f64).unwrap();
    let norm = T::from_f64(1.0 / (oh as f64 * ow as f64)).unwrap();

    let row_map: Vec<Vec<(usize, f64)>> = (0..in_h).map(|a| freq_targets(a, in_h, scale)).collect();
    let col_map: Vec<Vec<(usize, f64)>> = (0..in_w).map(|a| freq_targets(a, in_w, scale)).collect();

    let mut out = Array4::<T>::zeros((b, c, in_h, in_w));
    for bi in 0..b {
        for ci in 0..c {
            let plane = gv.index_axis(ndarray::Axis(0), bi);
            let plane = plane.index_axis(ndarray::Axis(0), ci);
            let mut gbig = plane_to_complex(&plane);
            fft2_inplace(&mut gbig, false);

            let mut gspec = Array2::from_elem((in_h, in_w), Complex::new(T::zero(), T::zero()));
            for u in 0..in_h {
                for v in 0..in_w {
                    let mut acc = Complex::new(T::zero(), T::zero());
                    for &(uo, wu) in &row_map[u] {
                        for &(vo, wv) in &col_map[v] {
                            acc = acc + gbig[[uo, vo]] * T::from_f64(wu * wv).unwrap();
                        }
                    }
                    gspec[[u, v]] = acc * amp * norm;
                }
            }
            fft2_inplace(&mut gspec, true);
            for y in 0..in_h {
                for xx in 0..in_w {
                    out[[bi, ci, y, xx]] = gspec[[y, xx]].re;
                }
            }
        }
    }
    out.into_dyn()
}

/// The periodic-padding variant: tiles the spectrum instead of zero-padding,
/// which realizes zero-insertion upsampling (non-zero samples only on the
/// original stride-`s` lattice).
pub fn fourier_upsample_periodic<T: Scalar>(x: &ArrayD<T>, scale: usize) -> ArrayD<T> {
    let xv = as4(x);
    let (b, c, h, w) = xv.dim();
    let (oh, ow) = (h * scale, w * scale);
    let norm = T::from_f64(1.0 / (oh as f64 * ow as f64)).unwrap();
    let mut out = Array4::<T>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            let plane = xv.index_axis(ndarray::Axis(0), bi);
            let plane = plane.index_axis(ndarray::Axis(0), ci);
            let mut spec = plane_to_complex(&plane);
            fft2_inplace(&mut spec, false);
            let mut big = Array2::from_shape_fn((oh, ow), |(u, v)| spec[[u % h, v % w]]);
            fft2_inplace(&mut big, true);
            for y in 0..oh {
                for xx in 0..ow {
                    out[[bi, ci, y, xx]] = big[[y, xx]].re * norm;
                }
            }
        }
    }
    out.into_dyn()
}

// ---------------------------------------------------------------------------
// Sub-pixel rearrangement
// ---------------------------------------------------------------------------

pub fn pixel_shuffle_down<T: Scalar>(x: &ArrayD<T>, r: usize) -> ArrayD<T> {
    let xv = as4(x);
    let (b, c, h, w) = xv.dim();
    assert!(h % r == 0 && w % r == 0, "pixel_shuffle_down divisibility");
    let mut out = Array4::<T>::zeros((b, c * r * r, h / r, w / r));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h / r {
                for xx in 0..w / r {
                    for iy in 0..r {
                        for ix in 0..r {
                            out[[bi, ci * r * r + iy * r + ix, y, xx]] =
                                xv[[bi, ci, y * r + iy, xx * r + ix]];
                        }
                    }
                }
            }
        }
    }
    out.into_dyn()
}

pub fn pixel_shuffle_up<T: Scalar>(x: &ArrayD<T>, r: usize) -> ArrayD<T> {
    let xv = as4(x);
    let (b, c, h, w) = xv.dim();
    assert!(c % (r * r) == 0, "pixel_shuffle_up channel divisibility");
    let co = c / (r * r);
    let mut out = Array4::<T>::zeros((b, co, h * r, w * r));
    for bi in 0..b {
        for ci in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    for iy in 0..r {
                        for ix in 0..r {
                            out[[bi, ci, y * r + iy, xx * r + ix]] =
                                xv[[bi, ci * r * r + iy * r + ix, y, xx]];
                        }
                    }
                }
            }
        }
    }
    out.into_dyn()
}
