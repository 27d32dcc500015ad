//! A small reverse-mode tape over `ndarray`, just large enough for the
//! blocks in this crate. Nodes are appended in topological order; backward
//! walks the tape once in reverse and accumulates gradients into every
//! reachable leaf.
//!
//! Values are generic over `f32`/`f64`: training runs in `f32`, the
//! finite-difference gradient suite instantiates the same code in `f64`.

use ndarray::{concatenate, Array1, Array2, ArrayD, Axis, IxDyn, Slice};
use num_traits::{Float, FromPrimitive, NumAssignOps};

use crate::kernels::{self, PadMode};

/// Element type usable on the tape.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + rustfft::FftNum
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lossy conversion from `f64` literals.
pub fn fs<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 convertible")
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    LinearLast { x: usize, w: usize },
    BiasLast { x: usize, b: usize },
    BiasChannel { x: usize, b: usize },
    Conv2d { x: usize, w: usize, pad: PadMode, stride: usize },
    DeformConv2d { x: usize, offsets: usize, w: usize, pad: PadMode },
    Relu(usize),
    LeakyRelu(usize, T),
    Gelu(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Abs(usize),
    SoftmaxLast(usize),
    LayerNormChw { x: usize, gamma: usize, beta: usize, eps: T },
    GlobalAvgPool(usize),
    MulChannelGate { x: usize, gate: usize },
    Reshape(usize),
    Permute { x: usize, axes: Vec<usize> },
    Roll2d { x: usize, dy: usize, dx: usize },
    ConcatChannels(Vec<usize>),
    SliceLast { x: usize, start: usize },
    ReflectPad2d { x: usize, pad: [usize; 4] },
    Crop2d { x: usize, top: usize, left: usize },
    Fft2ReIm(usize),
    Ifft2Real(usize),
    ComplexAbs(usize),
    ComplexPhase(usize),
    PolarToComplex { amp: usize, phase: usize },
    FourierUpsample { x: usize, scale: usize },
    PixelShuffleDown { x: usize, r: usize },
    PixelShuffleUp { x: usize, r: usize },
    MeanAll(usize),
    Clamp { x: usize, lo: T, hi: T },
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op<T>,
}

/// Gradients indexed by [`Var`]; only leaves retain gradients after
/// `backward` returns.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

fn reshape_owned<T: Scalar>(a: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    let flat: Vec<T> = a.iter().cloned().collect();
    ArrayD::from_shape_vec(IxDyn(shape), flat).expect("element count preserved")
}

fn as2<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d tensor")
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: T) -> Var {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > T::zero() { x } else { x * alpha });
        self.push(v, Op::LeakyRelu(a.0, alpha))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu_tanh);
        self.push(v, Op::Gelu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = T::one();
        let v = self.nodes[a.0].value.mapv(|x| one / (one + (-x).exp()));
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.sqrt());
        self.push(v, Op::Sqrt(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.abs());
        self.push(v, Op::Abs(a.0))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.min(hi).max(lo));
        self.push(v, Op::Clamp { x: a.0, lo, hi })
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        assert_eq!(av.dim().1, bv.dim().0, "matmul inner dim mismatch");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.ndim(), 3, "batch_matmul lhs must be 3-d");
        assert_eq!(vb.ndim(), 3, "batch_matmul rhs must be 3-d");
        let (n, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (n2, k2, p) = (vb.shape()[0], vb.shape()[1], vb.shape()[2]);
        assert_eq!(n, n2, "batch size mismatch");
        assert_eq!(k, k2, "inner dim mismatch");
        let mut out = ArrayD::zeros(IxDyn(&[n, m, p]));
        for i in 0..n {
            let ai = va
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            let bi = vb
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            let r = ai.dot(&bi);
            out.index_axis_mut(Axis(0), i).assign(&r);
        }
        self.push(out, Op::BatchMatMul(a.0, b.0))
    }

    /// `x (..., k) @ w (k, n) -> (..., n)`.
    pub fn linear_last(&mut self, x: Var, w: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = as2(&self.nodes[w.0].value);
        let k = *xv.shape().last().expect("non-scalar");
        assert_eq!(k, wv.dim().0, "linear_last inner dim mismatch");
        let rows: usize = xv.len() / k;
        let x2 = reshape_owned(xv, &[rows, k]);
        let out2 = as2(&x2).dot(&wv);
        let mut shape: Vec<usize> = xv.shape().to_vec();
        *shape.last_mut().unwrap() = wv.dim().1;
        let out = reshape_owned(&out2.into_dyn(), &shape);
        self.push(out, Op::LinearLast { x: x.0, w: w.0 })
    }

    /// Add a bias vector along the last axis.
    pub fn bias_last(&mut self, x: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(bv.ndim(), 1);
        let n = bv.shape()[0];
        assert_eq!(*xv.shape().last().unwrap(), n, "bias_last width mismatch");
        let mut out = xv.clone();
        for mut lane in out.rows_mut() {
            for (i, v) in lane.iter_mut().enumerate() {
                *v += bv[[i]];
            }
        }
        self.push(out, Op::BiasLast { x: x.0, b: b.0 })
    }

    /// Add a per-channel bias to a `(B, C, H, W)` tensor.
    pub fn bias_channel(&mut self, x: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(xv.ndim(), 4);
        assert_eq!(bv.ndim(), 1);
        assert_eq!(xv.shape()[1], bv.shape()[0], "bias_channel width mismatch");
        let mut out = xv.clone();
        let (bsz, c, h, w) = kernels::as4(xv).dim();
        for bi in 0..bsz {
            for ci in 0..c {
                let bias = bv[[ci]];
                for y in 0..h {
                    for xx in 0..w {
                        out[[bi, ci, y, xx]] += bias;
                    }
                }
            }
        }
        self.push(out, Op::BiasChannel { x: x.0, b: b.0 })
    }

    // -- convolution -------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, pad: PadMode, stride: usize) -> Var {
        let v = kernels::conv2d_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, pad, stride);
        self.push(
            v,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                pad,
                stride,
            },
        )
    }

    pub fn deform_conv2d(&mut self, x: Var, offsets: Var, w: Var, pad: PadMode) -> Var {
        let v = kernels::deform_conv_forward(
            &self.nodes[x.0].value,
            &self.nodes[offsets.0].value,
            &self.nodes[w.0].value,
            pad,
        );
        self.push(
            v,
            Op::DeformConv2d {
                x: x.0,
                offsets: offsets.0,
                w: w.0,
                pad,
            },
        )
    }

    // -- normalization / attention helpers ----------------------------------

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let xv = &self.nodes[a.0].value;
        let mut out = xv.clone();
        for mut lane in out.rows_mut() {
            let max = lane.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in lane.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in lane.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push(out, Op::SoftmaxLast(a.0))
    }

    /// Layer normalization across the channel axis of `(B, C, H, W)` with
    /// per-channel affine parameters.
    pub fn layer_norm_chw(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = kernels::as4(&self.nodes[x.0].value);
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let (b, c, h, w) = xv.dim();
        assert_eq!(gv.shape(), &[c]);
        assert_eq!(bv.shape(), &[c]);
        let cn = fs::<T>(c as f64);
        let mut out = ArrayD::zeros(IxDyn(&[b, c, h, w]));
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let mut mean = T::zero();
                    for ci in 0..c {
                        mean += xv[[bi, ci, y, xx]];
                    }
                    mean = mean / cn;
                    let mut var = T::zero();
                    for ci in 0..c {
                        let d = xv[[bi, ci, y, xx]] - mean;
                        var += d * d;
                    }
                    var = var / cn;
                    let istd = T::one() / (var + eps).sqrt();
                    for ci in 0..c {
                        let xhat = (xv[[bi, ci, y, xx]] - mean) * istd;
                        out[[bi, ci, y, xx]] = gv[[ci]] * xhat + bv[[ci]];
                    }
                }
            }
        }
        self.push(
            out,
            Op::LayerNormChw {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        )
    }

    /// `(B, C, H, W) -> (B, C)` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let xv = kernels::as4(&self.nodes[a.0].value);
        let (b, c, h, w) = xv.dim();
        let norm = fs::<T>(1.0 / (h as f64 * w as f64));
        let mut out = Array2::<T>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let mut acc = T::zero();
                for y in 0..h {
                    for xx in 0..w {
                        acc += xv[[bi, ci, y, xx]];
                    }
                }
                out[[bi, ci]] = acc * norm;
            }
        }
        self.push(out.into_dyn(), Op::GlobalAvgPool(a.0))
    }

    /// Per-channel gate: `x (B, C, H, W) * gate (B, C)`.
    pub fn mul_channel_gate(&mut self, x: Var, gate: Var) -> Var {
        let xv = kernels::as4(&self.nodes[x.0].value);
        let gv = as2(&self.nodes[gate.0].value);
        let (b, c, h, w) = xv.dim();
        assert_eq!(gv.dim(), (b, c), "gate shape mismatch");
        let mut out = ArrayD::zeros(IxDyn(&[b, c, h, w]));
        for bi in 0..b {
            for ci in 0..c {
                let g = gv[[bi, ci]];
                for y in 0..h {
                    for xx in 0..w {
                        out[[bi, ci, y, xx]] = xv[[bi, ci, y, xx]] * g;
                    }
                }
            }
        }
        self.push(
            out,
            Op::MulChannelGate {
                x: x.0,
                gate: gate.0,
            },
        )
    }

    // -- shape plumbing ------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let len: usize = shape.iter().product();
        assert_eq!(len, self.nodes[a.0].value.len(), "reshape element count");
        let v = reshape_owned(&self.nodes[a.0].value, shape);
        self.push(v, Op::Reshape(a.0))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .view()
            .permuted_axes(IxDyn(axes))
            .to_owned();
        let v = reshape_owned(&v, v.shape());
        self.push(
            v,
            Op::Permute {
                x: a.0,
                axes: axes.to_vec(),
            },
        )
    }

    /// Circular shift of the two trailing spatial axes of `(B, C, H, W)`.
    pub fn roll2d(&mut self, a: Var, dy: usize, dx: usize) -> Var {
        let xv = kernels::as4(&self.nodes[a.0].value);
        let (b, c, h, w) = xv.dim();
        let mut out = ArrayD::zeros(IxDyn(&[b, c, h, w]));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        out[[bi, ci, (y + dy) % h, (xx + dx) % w]] = xv[[bi, ci, y, xx]];
                    }
                }
            }
        }
        self.push(out, Op::Roll2d { x: a.0, dy, dx })
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat shapes");
        self.push(v, Op::ConcatChannels(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Var {
        let xv = &self.nodes[a.0].value;
        let last = xv.ndim() - 1;
        let v = xv
            .slice_axis(Axis(last), Slice::from(start..end))
            .to_owned();
        let v = reshape_owned(&v, v.shape());
        self.push(v, Op::SliceLast { x: a.0, start })
    }

    /// Reflect-101 padding of `(B, C, H, W)`: `pad = [top, bottom, left,
    /// right]`, each strictly smaller than the padded dimension.
    pub fn reflect_pad2d(&mut self, a: Var, pad: [usize; 4]) -> Var {
        let xv = kernels::as4(&self.nodes[a.0].value);
        let (b, c, h, w) = xv.dim();
        let [top, bottom, left, right] = pad;
        assert!(top < h && bottom < h && left < w && right < w, "reflect pad too large");
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut out = ArrayD::zeros(IxDyn(&[b, c, oh, ow]));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..oh {
                    let sy = reflect_index(y as i64 - top as i64, h);
                    for xx in 0..ow {
                        let sx = reflect_index(xx as i64 - left as i64, w);
                        out[[bi, ci, y, xx]] = xv[[bi, ci, sy, sx]];
                    }
                }
            }
        }
        self.push(out, Op::ReflectPad2d { x: a.0, pad })
    }

    pub fn crop2d(&mut self, a: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let xv = kernels::as4(&self.nodes[a.0].value);
        let (b, c, ih, iw) = xv.dim();
        assert!(top + h <= ih && left + w <= iw, "crop outside input");
        let mut out = ArrayD::zeros(IxDyn(&[b, c, h, w]));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        out[[bi, ci, y, xx]] = xv[[bi, ci, top + y, left + xx]];
                    }
                }
            }
        }
        self.push(out, Op::Crop2d { x: a.0, top, left })
    }

    // -- spectral ------------------------------------------------------------

    pub fn fft2_reim(&mut self, a: Var) -> Var {
        let v = kernels::fft2_reim_forward(&self.nodes[a.0].value);
        self.push(v, Op::Fft2ReIm(a.0))
    }

    pub fn ifft2_real(&mut self, a: Var) -> Var {
        let v = kernels::ifft2_real_forward(&self.nodes[a.0].value);
        self.push(v, Op::Ifft2Real(a.0))
    }

    /// `(B, 2C, H, W)` packed spectrum -> per-bin magnitude `(B, C, H, W)`.
    pub fn complex_abs(&mut self, a: Var) -> Var {
        let zv = kernels::as4(&self.nodes[a.0].value);
        let (b, c2, h, w) = zv.dim();
        let c = c2 / 2;
        let mut out = ArrayD::zeros(IxDyn(&[b, c, h, w]));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let re = zv[[bi, ci, y, xx]];
                        let im = zv[[bi, c + ci, y, xx]];
                        out[[bi, ci, y, xx]] = (re * re + im * im).sqrt();
                    }
                }
            }
        }
        self.push(out, Op::ComplexAbs(a.0))
    }

    /// `(B, 2C, H, W)` packed spectrum -> per-bin phase `atan2(im, re)`.
    pub fn complex_phase(&mut self, a: Var) -> Var {
        let zv = kernels::as4(&self.nodes[a.0].value);
        let (b, c2, h, w) = zv.dim();
        let c = c2 / 2;
        let mut out = ArrayD::zeros(IxDyn(&[b, c, h, w]));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let re = zv[[bi, ci, y, xx]];
                        let im = zv[[bi, c + ci, y, xx]];
                        out[[bi, ci, y, xx]] = im.atan2(re);
                    }
                }
            }
        }
        self.push(out, Op::ComplexPhase(a.0))
    }

    /// Rebuild a packed spectrum from magnitude and phase.
    pub fn polar_to_complex(&mut self, amp: Var, phase: Var) -> Var {
        let av = kernels::as4(&self.nodes[amp.0].value);
        let pv = kernels::as4(&self.nodes[phase.0].value);
        assert_eq!(av.dim(), pv.dim(), "polar shape mismatch");
        let (b, c, h, w) = av.dim();
        let mut out = ArrayD::zeros(IxDyn(&[b, 2 * c, h, w]));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let a = av[[bi, ci, y, xx]];
                        let p = pv[[bi, ci, y, xx]];
                        out[[bi, ci, y, xx]] = a * p.cos();
                        out[[bi, c + ci, y, xx]] = a * p.sin();
                    }
                }
            }
        }
        self.push(
            out,
            Op::PolarToComplex {
                amp: amp.0,
                phase: phase.0,
            },
        )
    }

    pub fn fourier_upsample(&mut self, a: Var, scale: usize) -> Var {
        assert!(scale >= 1, "scale must be >= 1");
        let v = kernels::fourier_upsample_forward(&self.nodes[a.0].value, scale);
        self.push(v, Op::FourierUpsample { x: a.0, scale })
    }

    pub fn pixel_shuffle_down(&mut self, a: Var, r: usize) -> Var {
        let v = kernels::pixel_shuffle_down(&self.nodes[a.0].value, r);
        self.push(v, Op::PixelShuffleDown { x: a.0, r })
    }

    pub fn pixel_shuffle_up(&mut self, a: Var, r: usize) -> Var {
        let v = kernels::pixel_shuffle_up(&self.nodes[a.0].value, r);
        self.push(v, Op::PixelShuffleUp { x: a.0, r })
    }

    // -- reductions ----------------------------------------------------------

    pub fn mean_all(&mut self, a: Var) -> Var {
        let xv = &self.nodes[a.0].value;
        let mean = xv.iter().cloned().sum::<T>() / fs::<T>(xv.len() as f64);
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![mean]).unwrap(),
            Op::MeanAll(a.0),
        )
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar node. Gradients flow into every reachable
    /// node; only leaves keep theirs in the returned table.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let acc = |grads: &mut [Option<ArrayD<T>>], idx: usize, delta: ArrayD<T>| {
            match &mut grads[idx] {
                Some(a) => *a += &delta,
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * &self.nodes[*b].value);
                acc(grads, *b, g * &self.nodes[*a].value);
            }
            Op::Scale(a, c) => acc(grads, *a, g.mapv(|v| v * *c)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let av = as2(&self.nodes[*a].value);
                let bv = as2(&self.nodes[*b].value);
                let gv = as2(g);
                acc(grads, *a, gv.dot(&bv.t()).into_dyn());
                acc(grads, *b, av.t().dot(&gv).into_dyn());
            }
            Op::BatchMatMul(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let n = va.shape()[0];
                let mut ga = ArrayD::zeros(va.raw_dim());
                let mut gb = ArrayD::zeros(vb.raw_dim());
                for bi in 0..n {
                    let ai = va
                        .index_axis(Axis(0), bi)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned();
                    let bi_ = vb
                        .index_axis(Axis(0), bi)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned();
                    let gi = g
                        .index_axis(Axis(0), bi)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned();
                    ga.index_axis_mut(Axis(0), bi).assign(&gi.dot(&bi_.t()));
                    gb.index_axis_mut(Axis(0), bi).assign(&ai.t().dot(&gi));
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::LinearLast { x, w } => {
                let xv = &self.nodes[*x].value;
                let wv = as2(&self.nodes[*w].value);
                let k = wv.dim().0;
                let rows = xv.len() / k;
                let x2 = reshape_owned(xv, &[rows, k]);
                let g2 = reshape_owned(g, &[rows, wv.dim().1]);
                let gx2 = as2(&g2).dot(&wv.t());
                acc(grads, *x, reshape_owned(&gx2.into_dyn(), xv.shape()));
                acc(grads, *w, as2(&x2).t().dot(&as2(&g2)).into_dyn());
            }
            Op::BiasLast { x, b } => {
                acc(grads, *x, g.clone());
                let n = self.nodes[*b].value.shape()[0];
                let mut gb = Array1::<T>::zeros(n);
                for lane in g.rows() {
                    for (i, v) in lane.iter().enumerate() {
                        gb[i] += *v;
                    }
                }
                acc(grads, *b, gb.into_dyn());
            }
            Op::BiasChannel { x, b } => {
                acc(grads, *x, g.clone());
                let gv = kernels::as4(g);
                let (bsz, c, h, w) = gv.dim();
                let mut gb = Array1::<T>::zeros(c);
                for bi in 0..bsz {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gb[ci] += gv[[bi, ci, y, xx]];
                            }
                        }
                    }
                }
                acc(grads, *b, gb.into_dyn());
            }
            Op::Conv2d { x, w, pad, stride } => {
                let (gx, gw) = kernels::conv2d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    g,
                    *pad,
                    *stride,
                );
                acc(grads, *x, gx);
                acc(grads, *w, gw);
            }
            Op::DeformConv2d { x, offsets, w, pad } => {
                let (gx, goff, gw) = kernels::deform_conv_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*offsets].value,
                    &self.nodes[*w].value,
                    g,
                    *pad,
                );
                acc(grads, *x, gx);
                acc(grads, *offsets, goff);
                acc(grads, *w, gw);
            }
            Op::Relu(a) => {
                let xv = &self.nodes[*a].value;
                let mut gx = g.clone();
                gx.zip_mut_with(xv, |gv, &x| {
                    if x <= T::zero() {
                        *gv = T::zero();
                    }
                });
                acc(grads, *a, gx);
            }
            Op::LeakyRelu(a, alpha) => {
                let xv = &self.nodes[*a].value;
                let mut gx = g.clone();
                gx.zip_mut_with(xv, |gv, &x| {
                    if x <= T::zero() {
                        *gv = *gv * *alpha;
                    }
                });
                acc(grads, *a, gx);
            }
            Op::Gelu(a) => {
                let xv = &self.nodes[*a].value;
                let mut gx = g.clone();
                gx.zip_mut_with(xv, |gv, &x| *gv = *gv * gelu_tanh_grad(x));
                acc(grads, *a, gx);
            }
            Op::Sigmoid(a) => {
                let sv = &self.nodes[i].value;
                let mut gx = g.clone();
                gx.zip_mut_with(sv, |gv, &s| *gv = *gv * s * (T::one() - s));
                acc(grads, *a, gx);
            }
            Op::Sqrt(a) => {
                let sv = &self.nodes[i].value;
                let half = fs::<T>(0.5);
                let mut gx = g.clone();
                gx.zip_mut_with(sv, |gv, &s| *gv = *gv * half / s);
                acc(grads, *a, gx);
            }
            Op::Abs(a) => {
                let xv = &self.nodes[*a].value;
                let mut gx = g.clone();
                gx.zip_mut_with(xv, |gv, &x| {
                    *gv = if x > T::zero() {
                        *gv
                    } else if x < T::zero() {
                        -*gv
                    } else {
                        T::zero()
                    }
                });
                acc(grads, *a, gx);
            }
            Op::SoftmaxLast(a) => {
                let sv = &self.nodes[i].value;
                let mut gx = sv.clone();
                let last = sv.ndim() - 1;
                let lanes = sv.len() / sv.shape()[last];
                let width = sv.shape()[last];
                let s_flat = reshape_owned(sv, &[lanes, width]);
                let g_flat = reshape_owned(g, &[lanes, width]);
                let mut out = Array2::<T>::zeros((lanes, width));
                for r in 0..lanes {
                    let mut dot = T::zero();
                    for c in 0..width {
                        dot += g_flat[[r, c]] * s_flat[[r, c]];
                    }
                    for c in 0..width {
                        out[[r, c]] = s_flat[[r, c]] * (g_flat[[r, c]] - dot);
                    }
                }
                gx.assign(&reshape_owned(&out.into_dyn(), sv.shape()));
                acc(grads, *a, gx);
            }
            Op::LayerNormChw {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = kernels::as4(&self.nodes[*x].value);
                let gam = &self.nodes[*gamma].value;
                let gv = kernels::as4(g);
                let (b, c, h, w) = xv.dim();
                let cn = fs::<T>(c as f64);
                let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                let mut ggamma = Array1::<T>::zeros(c);
                let mut gbeta = Array1::<T>::zeros(c);
                for bi in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            let mut mean = T::zero();
                            for ci in 0..c {
                                mean += xv[[bi, ci, y, xx]];
                            }
                            mean = mean / cn;
                            let mut var = T::zero();
                            for ci in 0..c {
                                let d = xv[[bi, ci, y, xx]] - mean;
                                var += d * d;
                            }
                            var = var / cn;
                            let istd = T::one() / (var + *eps).sqrt();
                            let mut mean_dxhat = T::zero();
                            let mut mean_dxhat_xhat = T::zero();
                            for ci in 0..c {
                                let xhat = (xv[[bi, ci, y, xx]] - mean) * istd;
                                let dxhat = gv[[bi, ci, y, xx]] * gam[[ci]];
                                mean_dxhat += dxhat;
                                mean_dxhat_xhat += dxhat * xhat;
                                ggamma[ci] += gv[[bi, ci, y, xx]] * xhat;
                                gbeta[ci] += gv[[bi, ci, y, xx]];
                            }
                            mean_dxhat = mean_dxhat / cn;
                            mean_dxhat_xhat = mean_dxhat_xhat / cn;
                            for ci in 0..c {
                                let xhat = (xv[[bi, ci, y, xx]] - mean) * istd;
                                let dxhat = gv[[bi, ci, y, xx]] * gam[[ci]];
                                gx[[bi, ci, y, xx]] =
                                    istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                            }
                        }
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, ggamma.into_dyn());
                acc(grads, *beta, gbeta.into_dyn());
            }
            Op::GlobalAvgPool(a) => {
                let xv = kernels::as4(&self.nodes[*a].value);
                let (b, c, h, w) = xv.dim();
                let gv = as2(g);
                let norm = fs::<T>(1.0 / (h as f64 * w as f64));
                let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                for bi in 0..b {
                    for ci in 0..c {
                        let val = gv[[bi, ci]] * norm;
                        for y in 0..h {
                            for xx in 0..w {
                                gx[[bi, ci, y, xx]] = val;
                            }
                        }
                    }
                }
                acc(grads, *a, gx);
            }
            Op::MulChannelGate { x, gate } => {
                let xv = kernels::as4(&self.nodes[*x].value);
                let gtv = as2(&self.nodes[*gate].value);
                let gv = kernels::as4(g);
                let (b, c, h, w) = xv.dim();
                let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                let mut ggate = Array2::<T>::zeros((b, c));
                for bi in 0..b {
                    for ci in 0..c {
                        let gt = gtv[[bi, ci]];
                        let mut acc_g = T::zero();
                        for y in 0..h {
                            for xx in 0..w {
                                gx[[bi, ci, y, xx]] = gv[[bi, ci, y, xx]] * gt;
                                acc_g += gv[[bi, ci, y, xx]] * xv[[bi, ci, y, xx]];
                            }
                        }
                        ggate[[bi, ci]] = acc_g;
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gate, ggate.into_dyn());
            }
            Op::Reshape(a) => {
                acc(grads, *a, reshape_owned(g, self.nodes[*a].value.shape()));
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let gp = g.view().permuted_axes(IxDyn(&inv)).to_owned();
                acc(grads, *x, reshape_owned(&gp, gp.shape()));
            }
            Op::Roll2d { x, dy, dx } => {
                let gv = kernels::as4(g);
                let (b, c, h, w) = gv.dim();
                let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[[bi, ci, y, xx]] = gv[[bi, ci, (y + dy) % h, (xx + dx) % w]];
                            }
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::ConcatChannels(parts) => {
                let mut start = 0usize;
                for &p in parts {
                    let width = self.nodes[p].value.shape()[1];
                    let gp = g
                        .slice_axis(Axis(1), Slice::from(start..start + width))
                        .to_owned();
                    acc(grads, p, reshape_owned(&gp, gp.shape()));
                    start += width;
                }
            }
            Op::SliceLast { x, start } => {
                let xv = &self.nodes[*x].value;
                let last = xv.ndim() - 1;
                let mut gx = ArrayD::zeros(xv.raw_dim());
                let width = g.shape()[last];
                gx.slice_axis_mut(Axis(last), Slice::from(*start..*start + width))
                    .assign(g);
                acc(grads, *x, gx);
            }
            Op::ReflectPad2d { x, pad } => {
                let xv = kernels::as4(&self.nodes[*x].value);
                let (b, c, h, w) = xv.dim();
                let [top, _, left, _] = *pad;
                let gv = kernels::as4(g);
                let (_, _, oh, ow) = gv.dim();
                let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..oh {
                            let sy = reflect_index(y as i64 - top as i64, h);
                            for xx in 0..ow {
                                let sx = reflect_index(xx as i64 - left as i64, w);
                                gx[[bi, ci, sy, sx]] += gv[[bi, ci, y, xx]];
                            }
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Crop2d { x, top, left } => {
                let xv = &self.nodes[*x].value;
                let gv = kernels::as4(g);
                let (b, c, h, w) = gv.dim();
                let mut gx = ArrayD::zeros(xv.raw_dim());
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[[bi, ci, top + y, left + xx]] = gv[[bi, ci, y, xx]];
                            }
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Fft2ReIm(a) => acc(grads, *a, kernels::fft2_reim_backward(g)),
            Op::Ifft2Real(a) => acc(grads, *a, kernels::ifft2_real_backward(g)),
            Op::ComplexAbs(a) => {
                let zv = kernels::as4(&self.nodes[*a].value);
                let av = kernels::as4(&self.nodes[i].value);
                let gv = kernels::as4(g);
                let (b, c, h, w) = av.dim();
                // Bins at (numerically) zero magnitude get no gradient.
                let tiny = T::epsilon() * fs::<T>(10.0);
                let mut gz = ArrayD::zeros(IxDyn(&[b, 2 * c, h, w]));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let mag = av[[bi, ci, y, xx]];
                                if mag <= tiny {
                                    continue;
                                }
                                let gval = gv[[bi, ci, y, xx]] / mag;
                                gz[[bi, ci, y, xx]] = gval * zv[[bi, ci, y, xx]];
                                gz[[bi, c + ci, y, xx]] = gval * zv[[bi, c + ci, y, xx]];
                            }
                        }
                    }
                }
                acc(grads, *a, gz);
            }
            Op::ComplexPhase(a) => {
                let zv = kernels::as4(&self.nodes[*a].value);
                let gv = kernels::as4(g);
                let (b, c2, h, w) = zv.dim();
                let c = c2 / 2;
                let tiny = T::epsilon() * T::epsilon() * fs::<T>(100.0);
                let mut gz = ArrayD::zeros(IxDyn(&[b, 2 * c, h, w]));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let re = zv[[bi, ci, y, xx]];
                                let im = zv[[bi, c + ci, y, xx]];
                                let r2 = re * re + im * im;
                                if r2 <= tiny {
                                    continue;
                                }
                                let gval = gv[[bi, ci, y, xx]] / r2;
                                gz[[bi, ci, y, xx]] = -gval * im;
                                gz[[bi, c + ci, y, xx]] = gval * re;
                            }
                        }
                    }
                }
                acc(grads, *a, gz);
            }
            Op::PolarToComplex { amp, phase } => {
                let av = kernels::as4(&self.nodes[*amp].value);
                let pv = kernels::as4(&self.nodes[*phase].value);
                let gv = kernels::as4(g);
                let (b, c, h, w) = av.dim();
                let mut ga = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                let mut gp = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let a = av[[bi, ci, y, xx]];
                                let p = pv[[bi, ci, y, xx]];
                                let gre = gv[[bi, ci, y, xx]];
                                let gim = gv[[bi, c + ci, y, xx]];
                                ga[[bi, ci, y, xx]] = gre * p.cos() + gim * p.sin();
                                gp[[bi, ci, y, xx]] = a * (gim * p.cos() - gre * p.sin());
                            }
                        }
                    }
                }
                acc(grads, *amp, ga);
                acc(grads, *phase, gp);
            }
            Op::FourierUpsample { x, scale } => {
                let shape = self.nodes[*x].value.shape();
                let (h, w) = (shape[2], shape[3]);
                acc(grads, *x, kernels::fourier_upsample_backward(g, h, w, *scale));
            }
            Op::PixelShuffleDown { x, r } => {
                acc(grads, *x, kernels::pixel_shuffle_up(g, *r));
            }
            Op::PixelShuffleUp { x, r } => {
                acc(grads, *x, kernels::pixel_shuffle_down(g, *r));
            }
            Op::MeanAll(a) => {
                let xv = &self.nodes[*a].value;
                let v = g[[0]] / fs::<T>(xv.len() as f64);
                acc(grads, *a, ArrayD::from_elem(xv.raw_dim(), v));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.nodes[*x].value;
                let mut gx = g.clone();
                gx.zip_mut_with(xv, |gv, &x| {
                    if x < *lo || x > *hi {
                        *gv = T::zero();
                    }
                });
                acc(grads, *x, gx);
            }
        }
    }
}

fn reflect_index(i: i64, len: usize) -> usize {
    // reflect-101: ... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...
    let n = len as i64;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
    }
    i as usize
}

fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = fs::<T>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = fs::<T>(0.044_715);
    let half = fs::<T>(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_tanh_grad<T: Scalar>(x: T) -> T {
    let c = fs::<T>(0.797_884_560_802_865_4);
    let a = fs::<T>(0.044_715);
    let half = fs::<T>(0.5);
    let three = fs::<T>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

/// Finite-difference verification helpers, shared by unit tests and the
/// acceptance suite.
pub mod check {
    use super::{Graph, Var};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn randn(seed: u64, shape: &[usize]) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen::<f64>() - 0.5)
    }

    /// Central finite differences on a scalar-valued builder. `build` maps
    /// leaf values to the loss node; returns max relative error between the
    /// analytic gradient and finite differences for the chosen leaf.
    pub fn finite_diff_check(
        inputs: &[ArrayD<f64>],
        check_idx: usize,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let analytic = grads.get(vars[check_idx]).expect("gradient").clone();

        let eps = 1e-5;
        let mut max_rel = 0.0f64;
        let probe = inputs[check_idx].len();
        for flat in 0..probe {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[check_idx].as_slice_mut().unwrap()[flat] += eps;
            minus[check_idx].as_slice_mut().unwrap()[flat] -= eps;

            let eval = |vals: &[ArrayD<f64>]| -> f64 {
                let mut g = Graph::<f64>::new();
                let vars: Vec<Var> = vals.iter().map(|x| g.leaf(x.clone())).collect();
                let loss = build(&mut g, &vars);
                g.value(loss)[[0]]
            };
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[flat];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
        max_rel
    }

    /// Weighted sum against a fixed random projection makes a scalar loss
    /// that exercises every output element.
    pub fn project_loss(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
        let w = randn(seed, g.shape(y));
        let wv = g.leaf(w);
        let p = g.mul(y, wv);
        g.mean_all(p)
    }
}

#[cfg(test)]
mod tests {
    use super::check::{finite_diff_check, project_loss, randn};
    use super::*;

    #[test]
    fn elementwise_grads_match_fd() {
        let x = randn(1, &[2, 3]).mapv(|v| v * 2.0 + 0.7);
        for (name, f) in [
            ("relu", 0usize),
            ("leaky", 1),
            ("gelu", 2),
            ("sigmoid", 3),
            ("sqrt", 4),
            ("abs", 5),
            ("clamp", 6),
        ] {
            let rel = finite_diff_check(&[x.clone()], 0, |g, vars| {
                let y = match f {
                    0 => g.relu(vars[0]),
                    1 => g.leaky_relu(vars[0], 0.2),
                    2 => g.gelu(vars[0]),
                    3 => g.sigmoid(vars[0]),
                    4 => {
                        let s = g.add_scalar(vars[0], 3.0);
                        g.sqrt(s)
                    }
                    5 => g.abs(vars[0]),
                    _ => g.clamp(vars[0], -0.9, 0.9),
                };
                project_loss(g, y, 99)
            });
            assert!(rel < 1e-6, "{name}: rel err {rel}");
        }
    }

    #[test]
    fn matmul_grads_match_fd() {
        let a = randn(2, &[3, 4]);
        let b = randn(3, &[4, 5]);
        for idx in 0..2 {
            let rel = finite_diff_check(&[a.clone(), b.clone()], idx, |g, vars| {
                let y = g.matmul(vars[0], vars[1]);
                project_loss(g, y, 98)
            });
            assert!(rel < 1e-7, "matmul arg {idx}: rel err {rel}");
        }
    }

    #[test]
    fn batch_matmul_and_linear_grads_match_fd() {
        let a = randn(4, &[2, 3, 4]);
        let b = randn(5, &[2, 4, 5]);
        for idx in 0..2 {
            let rel = finite_diff_check(&[a.clone(), b.clone()], idx, |g, vars| {
                let y = g.batch_matmul(vars[0], vars[1]);
                project_loss(g, y, 97)
            });
            assert!(rel < 1e-7, "batch_matmul arg {idx}: rel err {rel}");
        }

        let x = randn(6, &[2, 3, 4]);
        let w = randn(7, &[4, 6]);
        let bias = randn(8, &[6]);
        for idx in 0..3 {
            let rel = finite_diff_check(&[x.clone(), w.clone(), bias.clone()], idx, |g, vars| {
                let y = g.linear_last(vars[0], vars[1]);
                let y = g.bias_last(y, vars[2]);
                project_loss(g, y, 96)
            });
            assert!(rel < 1e-7, "linear arg {idx}: rel err {rel}");
        }
    }

    #[test]
    fn softmax_and_layernorm_grads_match_fd() {
        let x = randn(9, &[2, 2, 5]);
        let rel = finite_diff_check(&[x], 0, |g, vars| {
            let y = g.softmax_last(vars[0]);
            project_loss(g, y, 95)
        });
        assert!(rel < 1e-6, "softmax rel err {rel}");

        let x = randn(10, &[1, 4, 3, 2]);
        let gamma = randn(11, &[4]).mapv(|v| v + 1.0);
        let beta = randn(12, &[4]);
        for idx in 0..3 {
            let rel =
                finite_diff_check(&[x.clone(), gamma.clone(), beta.clone()], idx, |g, vars| {
                    let y = g.layer_norm_chw(vars[0], vars[1], vars[2], 1e-5);
                    project_loss(g, y, 94)
                });
            assert!(rel < 1e-5, "layernorm arg {idx}: rel err {rel}");
        }
    }

    #[test]
    fn conv_grads_match_fd() {
        let x = randn(13, &[1, 2, 5, 6]);
        let w = randn(14, &[3, 2, 3, 3]);
        for pad in [PadMode::Zero, PadMode::WrapLon] {
            for idx in 0..2 {
                let rel = finite_diff_check(&[x.clone(), w.clone()], idx, |g, vars| {
                    let y = g.conv2d(vars[0], vars[1], pad, 1);
                    project_loss(g, y, 93)
                });
                assert!(rel < 1e-6, "conv pad {pad:?} arg {idx}: rel err {rel}");
            }
        }
        // stride 2
        let rel = finite_diff_check(&[x.clone(), w.clone()], 0, |g, vars| {
            let y = g.conv2d(vars[0], vars[1], PadMode::WrapLon, 2);
            project_loss(g, y, 92)
        });
        assert!(rel < 1e-6, "strided conv rel err {rel}");
    }

    #[test]
    fn shape_ops_grads_match_fd() {
        let x = randn(15, &[2, 3, 4, 4]);
        let rel = finite_diff_check(&[x.clone()], 0, |g, vars| {
            let y = g.reshape(vars[0], &[2, 3, 16]);
            let y = g.permute(y, &[1, 0, 2]);
            let y = g.reshape(y, &[3, 2, 4, 4]);
            let y = g.roll2d(y, 1, 3);
            project_loss(g, y, 91)
        });
        assert!(rel < 1e-8, "shape ops rel err {rel}");

        let rel = finite_diff_check(&[x.clone()], 0, |g, vars| {
            let y = g.reflect_pad2d(vars[0], [1, 2, 3, 1]);
            project_loss(g, y, 90)
        });
        assert!(rel < 1e-8, "reflect pad rel err {rel}");

        let rel = finite_diff_check(&[x.clone()], 0, |g, vars| {
            let y = g.crop2d(vars[0], 1, 0, 2, 3);
            project_loss(g, y, 89)
        });
        assert!(rel < 1e-8, "crop rel err {rel}");

        let parts = [randn(16, &[1, 2, 3, 3]), randn(17, &[1, 4, 3, 3])];
        for idx in 0..2 {
            let rel = finite_diff_check(&parts, idx, |g, vars| {
                let y = g.concat_channels(&[vars[0], vars[1]]);
                project_loss(g, y, 88)
            });
            assert!(rel < 1e-8, "concat arg {idx}: rel err {rel}");
        }

        let x = randn(18, &[2, 3, 7]);
        let rel = finite_diff_check(&[x], 0, |g, vars| {
            let y = g.slice_last(vars[0], 2, 6);
            project_loss(g, y, 87)
        });
        assert!(rel < 1e-8, "slice rel err {rel}");
    }

    #[test]
    fn spectral_op_grads_match_fd() {
        let x = randn(19, &[1, 2, 4, 4]);
        let rel = finite_diff_check(&[x.clone()], 0, |g, vars| {
            let z = g.fft2_reim(vars[0]);
            project_loss(g, z, 86)
        });
        assert!(rel < 1e-7, "fft rel err {rel}");

        let z = randn(20, &[1, 4, 4, 4]);
        let rel = finite_diff_check(&[z.clone()], 0, |g, vars| {
            let y = g.ifft2_real(vars[0]);
            project_loss(g, y, 85)
        });
        assert!(rel < 1e-7, "ifft rel err {rel}");

        // abs/phase/polar chain on a spectrum safely away from zero bins
        let z = randn(21, &[1, 4, 3, 3]).mapv(|v| v + 2.0);
        for (name, which) in [("abs", 0usize), ("phase", 1)] {
            let rel = finite_diff_check(&[z.clone()], 0, |g, vars| {
                let y = if which == 0 {
                    g.complex_abs(vars[0])
                } else {
                    g.complex_phase(vars[0])
                };
                project_loss(g, y, 84)
            });
            assert!(rel < 1e-6, "{name} rel err {rel}");
        }

        let amp = randn(22, &[1, 2, 3, 3]).mapv(|v| v + 2.0);
        let phase = randn(23, &[1, 2, 3, 3]);
        for idx in 0..2 {
            let rel = finite_diff_check(&[amp.clone(), phase.clone()], idx, |g, vars| {
                let z = g.polar_to_complex(vars[0], vars[1]);
                project_loss(g, z, 83)
            });
            assert!(rel < 1e-7, "polar arg {idx}: rel err {rel}");
        }
    }

    #[test]
    fn fourier_upsample_grad_matches_fd() {
        let x = randn(24, &[1, 2, 4, 4]);
        let rel = finite_diff_check(&[x], 0, |g, vars| {
            let y = g.fourier_upsample(vars[0], 2);
            project_loss(g, y, 82)
        });
        assert!(rel < 1e-7, "fourier upsample rel err {rel}");
    }

    #[test]
    fn pixel_shuffle_and_pool_grads_match_fd() {
        let x = randn(25, &[1, 4, 4, 4]);
        let rel = finite_diff_check(&[x.clone()], 0, |g, vars| {
            let y = g.pixel_shuffle_down(vars[0], 2);
            let y = g.pixel_shuffle_up(y, 2);
            project_loss(g, y, 81)
        });
        assert!(rel < 1e-9, "pixel shuffle rel err {rel}");

        let rel = finite_diff_check(&[x.clone()], 0, |g, vars| {
            let y = g.global_avg_pool(vars[0]);
            project_loss(g, y, 80)
        });
        assert!(rel < 1e-8, "pool rel err {rel}");

        let gate = randn(26, &[1, 4]);
        for idx in 0..2 {
            let rel = finite_diff_check(&[x.clone(), gate.clone()], idx, |g, vars| {
                let y = g.mul_channel_gate(vars[0], vars[1]);
                project_loss(g, y, 79)
            });
            assert!(rel < 1e-8, "gate arg {idx}: rel err {rel}");
        }
    }

    #[test]
    fn deform_conv_grads_match_fd() {
        // Offsets away from integer lattice points keep bilinear smooth.
        let x = randn(27, &[1, 2, 5, 6]);
        let w = randn(28, &[2, 2, 3, 3]);
        let off = randn(29, &[1, 18, 5, 6]).mapv(|v| v * 0.8 + 0.27);
        for idx in 0..3 {
            let rel = finite_diff_check(&[x.clone(), off.clone(), w.clone()], idx, |g, vars| {
                let y = g.deform_conv2d(vars[0], vars[1], vars[2], PadMode::WrapLon);
                project_loss(g, y, 78)
            });
            assert!(rel < 1e-5, "deform arg {idx}: rel err {rel}");
        }
    }

    #[test]
    fn gradients_accumulate_over_shared_inputs() {
        // y = x * x has gradient 2x through the Mul fan-in.
        let x = randn(30, &[3, 3]);
        let mut g = Graph::<f64>::new();
        let v = g.leaf(x.clone());
        let y = g.mul(v, v);
        let loss = g.mean_all(y);
        let grads = g.backward(loss);
        let gx = grads.get(v).unwrap();
        for (got, want) in gx.iter().zip(x.iter().map(|v| 2.0 * v / 9.0)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn reflect_index_reference_values() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(0, 5), 0);
        assert_eq!(reflect_index(4, 5), 4);
    }
}
