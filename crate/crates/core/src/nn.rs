//! Minimal neural-network building blocks with explicit backward passes.
//!
//! Everything here works on single samples in channel-first `(C, H, W)`
//! layout — the training batch is "one tile of patches", so no batch axis is
//! needed. Convolutions are im2col + GEMM; each layer's `forward_t` returns a
//! cache that its `backward` consumes, and every backward pass is verified
//! against central finite differences in the tests. Layers are generic over
//! `f32`/`f64`: training runs in `f32`, gradient checks in `f64`.

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};

/// Float scalar the layers can compute with.
pub trait Scalar:
    ndarray::LinalgScalar
    + num_traits::Float
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    /// Shorthand for construction from an `f64` constant.
    fn from_const(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("constant fits the scalar type")
    }

    /// Widens to `f64` (lossless for both supported precisions).
    fn to_const(self) -> f64 {
        <Self as num_traits::ToPrimitive>::to_f64(&self).expect("scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Output side of an unpadded/padded strided convolution:
/// `floor((input + 2*pad - kernel) / stride) + 1`, or `None` when the kernel
/// does not fit.
pub fn conv_out_side(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < kernel || stride == 0 {
        return None;
    }
    Some((span - kernel) / stride + 1)
}

/// Output side of a strided transposed convolution:
/// `(input - 1) * stride - 2*pad + kernel + out_pad`.
pub fn conv_transpose_out_side(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> usize {
    (input - 1) * stride + kernel + out_pad - 2 * pad
}

/// Unfolds `(C, H, W)` into a `(C*k*k, out_h*out_w)` matrix where column
/// `oy*out_w + ox` holds the receptive field of output position `(oy, ox)`.
/// Out-of-bounds taps (from padding) stay zero.
pub fn im2col<T: Scalar>(
    x: &ArrayView3<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Array2<T> {
    let (c_in, h, w) = x.dim();
    let l = out_h * out_w;
    let mut cols = Array2::<T>::zeros((c_in * kernel * kernel, l));
    let xs = x.as_standard_layout();
    let xsl = xs.as_slice().expect("standard layout");
    let csl = cols.as_slice_mut().expect("freshly allocated");
    for c in 0..c_in {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row_base = ((c * kernel + ky) * kernel + kx) * l;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_base = (c * h + iy as usize) * w;
                    let o_base = row_base + oy * out_w;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            csl[o_base + ox] = xsl[x_base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back onto a
/// `(C, H, W)` canvas.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &Array2<T>,
    c_in: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Array3<T> {
    let l = out_h * out_w;
    debug_assert_eq!(cols.dim(), (c_in * kernel * kernel, l));
    let mut x = Array3::<T>::zeros((c_in, h, w));
    let cols = cols.as_standard_layout();
    let csl = cols.as_slice().expect("standard layout");
    let xsl = x.as_slice_mut().expect("freshly allocated");
    for c in 0..c_in {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row_base = ((c * kernel + ky) * kernel + kx) * l;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_base = (c * h + iy as usize) * w;
                    let o_base = row_base + oy * out_w;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xsl[x_base + ix as usize] =
                                xsl[x_base + ix as usize] + csl[o_base + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Strided 2-D convolution. The weight is stored pre-flattened as
/// `(c_out, c_in*k*k)` so the forward pass is a single GEMM.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Array2<T>,
    /// `None` when the layer feeds a normalization (a bias would be erased).
    pub bias: Option<Array1<T>>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Forward cache for [`Conv2d::forward_t`].
pub struct Conv2dCache<T> {
    cols: Array2<T>,
    in_dim: (usize, usize, usize),
    out_hw: (usize, usize),
}

/// Parameter gradients of one conv layer.
pub struct Conv2dGrads<T> {
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
    ) -> Self {
        Conv2d {
            weight: Array2::zeros((c_out, c_in * kernel * kernel)),
            bias: with_bias.then(|| Array1::zeros(c_out)),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = conv_out_side(h, self.kernel, self.stride, self.pad)
            .expect("input smaller than kernel");
        let ow = conv_out_side(w, self.kernel, self.stride, self.pad)
            .expect("input smaller than kernel");
        (oh, ow)
    }

    pub fn forward(&self, x: &ArrayView3<T>) -> Array3<T> {
        self.forward_t(x).0
    }

    pub fn forward_t(&self, x: &ArrayView3<T>) -> (Array3<T>, Conv2dCache<T>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.c_in, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col(x, self.kernel, self.stride, self.pad, oh, ow);
        let mut y = self.weight.dot(&cols);
        if let Some(bias) = &self.bias {
            for (mut row, &b) in y.outer_iter_mut().zip(bias.iter()) {
                row.mapv_inplace(|v| v + b);
            }
        }
        let y = y
            .into_shape_with_order((self.c_out, oh, ow))
            .expect("shape product matches");
        (
            y,
            Conv2dCache {
                cols,
                in_dim: (c, h, w),
                out_hw: (oh, ow),
            },
        )
    }

    /// Backward pass; returns the input gradient and parameter gradients.
    pub fn backward(
        &self,
        cache: &Conv2dCache<T>,
        grad_y: &ArrayView3<T>,
    ) -> (Array3<T>, Conv2dGrads<T>) {
        let (oh, ow) = cache.out_hw;
        let l = oh * ow;
        let gy = grad_y
            .to_owned()
            .into_shape_with_order((self.c_out, l))
            .expect("grad shape");
        let grad_w = gy.dot(&cache.cols.t());
        let grad_b = self.bias.as_ref().map(|_| gy.sum_axis(Axis(1)));
        let grad_cols = self.weight.t().dot(&gy);
        let (c, h, w) = cache.in_dim;
        let grad_x = col2im(&grad_cols, c, h, w, self.kernel, self.stride, self.pad, oh, ow);
        (
            grad_x,
            Conv2dGrads {
                weight: grad_w,
                bias: grad_b,
            },
        )
    }
}

/// Strided 2-D transposed convolution (fractionally strided upsampling).
/// Weight layout `(c_in, c_out*k*k)`; `out_pad` disambiguates the output side
/// the way the planner requires (0 or 1 extra row/column).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Array2<T>,
    /// `None` when the layer feeds a normalization (a bias would be erased).
    pub bias: Option<Array1<T>>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

/// Forward cache for [`ConvTranspose2d::forward_t`].
pub struct ConvTranspose2dCache<T> {
    x_flat: Array2<T>,
    in_dim: (usize, usize, usize),
    out_hw: (usize, usize),
}

/// Parameter gradients of one transposed-conv layer.
pub struct ConvTranspose2dGrads<T> {
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        with_bias: bool,
    ) -> Self {
        assert!(out_pad < stride, "out_pad must be smaller than stride");
        ConvTranspose2d {
            weight: Array2::zeros((c_in, c_out * kernel * kernel)),
            bias: with_bias.then(|| Array1::zeros(c_out)),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            out_pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_transpose_out_side(h, self.kernel, self.stride, self.pad, self.out_pad),
            conv_transpose_out_side(w, self.kernel, self.stride, self.pad, self.out_pad),
        )
    }

    pub fn forward(&self, x: &ArrayView3<T>) -> Array3<T> {
        self.forward_t(x).0
    }

    pub fn forward_t(&self, x: &ArrayView3<T>) -> (Array3<T>, ConvTranspose2dCache<T>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.c_in, "transposed-conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let x_flat = x
            .to_owned()
            .into_shape_with_order((c, h * w))
            .expect("shape product matches");
        // cols[(co,ky,kx), (iy,ix)] = sum_ci w[ci, (co,ky,kx)] * x[ci, iy, ix]
        let cols = self.weight.t().dot(&x_flat);
        let mut y = col2im(&cols, self.c_out, oh, ow, self.kernel, self.stride, self.pad, h, w);
        if let Some(bias) = &self.bias {
            for (mut plane, &b) in y.outer_iter_mut().zip(bias.iter()) {
                plane.mapv_inplace(|v| v + b);
            }
        }
        (
            y,
            ConvTranspose2dCache {
                x_flat,
                in_dim: (c, h, w),
                out_hw: (oh, ow),
            },
        )
    }

    pub fn backward(
        &self,
        cache: &ConvTranspose2dCache<T>,
        grad_y: &ArrayView3<T>,
    ) -> (Array3<T>, ConvTranspose2dGrads<T>) {
        let (_, h, w) = cache.in_dim;
        let (oh, ow) = cache.out_hw;
        debug_assert_eq!(grad_y.dim(), (self.c_out, oh, ow));
        // Gathering grad_y back into column layout is exactly im2col with the
        // same kernel/stride/pad, enumerated over the *input* grid.
        let grad_cols = im2col(grad_y, self.kernel, self.stride, self.pad, h, w);
        let grad_x = self
            .weight
            .dot(&grad_cols)
            .into_shape_with_order(cache.in_dim)
            .expect("shape product matches");
        let grad_w = cache.x_flat.dot(&grad_cols.t());
        let grad_b = self
            .bias
            .as_ref()
            .map(|_| grad_y.sum_axis(Axis(2)).sum_axis(Axis(1)));
        (
            grad_x,
            ConvTranspose2dGrads {
                weight: grad_w,
                bias: grad_b,
            },
        )
    }
}

/// Per-channel batch normalization over the spatial axes of a single sample.
///
/// Statistics are always the current sample's (no running averages): every
/// patch forward is self-contained, which keeps inference independent of
/// patch order and identical to training behaviour.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub eps: T,
}

/// Forward cache for [`BatchNorm2d::forward_t`].
pub struct BatchNorm2dCache<T> {
    xhat: Array3<T>,
    inv_std: Array1<T>,
}

/// Parameter gradients of one batch-norm layer.
pub struct BatchNorm2dGrads<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::from_elem(channels, T::one()),
            beta: Array1::zeros(channels),
            eps: T::from_const(1e-5),
        }
    }

    pub fn forward(&self, x: &ArrayView3<T>) -> Array3<T> {
        self.forward_t(x).0
    }

    pub fn forward_t(&self, x: &ArrayView3<T>) -> (Array3<T>, BatchNorm2dCache<T>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.gamma.len(), "batch-norm channels");
        let n = T::from_const((h * w) as f64);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::<T>::zeros(c);
        for (ch, mut plane) in xhat.outer_iter_mut().enumerate() {
            let mean = plane.sum() / n;
            plane.mapv_inplace(|v| v - mean);
            let var = plane.fold(T::zero(), |acc, &v| acc + v * v) / n;
            let is = T::one() / (var + self.eps).sqrt();
            plane.mapv_inplace(|v| v * is);
            inv_std[ch] = is;
        }
        let mut y = xhat.clone();
        for (ch, mut plane) in y.outer_iter_mut().enumerate() {
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            plane.mapv_inplace(|v| v * g + b);
        }
        (y, BatchNorm2dCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &BatchNorm2dCache<T>,
        grad_y: &ArrayView3<T>,
    ) -> (Array3<T>, BatchNorm2dGrads<T>) {
        let (c, h, w) = grad_y.dim();
        let n = T::from_const((h * w) as f64);
        let mut grad_x = Array3::<T>::zeros((c, h, w));
        let mut grad_gamma = Array1::<T>::zeros(c);
        let mut grad_beta = Array1::<T>::zeros(c);
        for ch in 0..c {
            let gy = grad_y.index_axis(Axis(0), ch);
            let xhat = cache.xhat.index_axis(Axis(0), ch);
            let sum_gy = gy.sum();
            let sum_gy_xhat = gy
                .iter()
                .zip(xhat.iter())
                .fold(T::zero(), |acc, (&g, &xh)| acc + g * xh);
            grad_gamma[ch] = sum_gy_xhat;
            grad_beta[ch] = sum_gy;
            let scale = self.gamma[ch] * cache.inv_std[ch] / n;
            let mut gx = grad_x.index_axis_mut(Axis(0), ch);
            for ((g, &gyv), &xh) in gx.iter_mut().zip(gy.iter()).zip(xhat.iter()) {
                *g = scale * (n * gyv - sum_gy - xh * sum_gy_xhat);
            }
        }
        (
            grad_x,
            BatchNorm2dGrads {
                gamma: grad_gamma,
                beta: grad_beta,
            },
        )
    }
}

/// Leaky rectifier with fixed negative slope.
#[derive(Clone, Copy, Debug)]
pub struct LeakyRelu<T> {
    pub slope: T,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: f64) -> Self {
        LeakyRelu {
            slope: T::from_const(slope),
        }
    }

    pub fn forward(&self, x: &ArrayView3<T>) -> Array3<T> {
        x.mapv(|v| if v > T::zero() { v } else { v * self.slope })
    }

    /// Backward needs only the input's sign pattern, so the pre-activation
    /// input doubles as the cache.
    pub fn backward(&self, x: &ArrayView3<T>, grad_y: &ArrayView3<T>) -> Array3<T> {
        let mut gx = grad_y.to_owned();
        gx.zip_mut_with(x, |g, &v| {
            if v <= T::zero() {
                *g = *g * self.slope;
            }
        });
        gx
    }
}

/// Elementwise tanh saturation.
pub fn tanh_forward<T: Scalar>(x: &ArrayView3<T>) -> Array3<T> {
    x.mapv(|v| v.tanh())
}

/// Backward of tanh given its *output* `y`.
pub fn tanh_backward<T: Scalar>(y: &ArrayView3<T>, grad_y: &ArrayView3<T>) -> Array3<T> {
    let mut gx = grad_y.to_owned();
    gx.zip_mut_with(y, |g, &yv| *g = *g * (T::one() - yv * yv));
    gx
}

/// Numerically stable elementwise logistic sigmoid.
pub fn sigmoid_forward<T: Scalar>(x: &ArrayView3<T>) -> Array3<T> {
    x.mapv(sigmoid_scalar)
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Backward of sigmoid given its *output* `y`.
pub fn sigmoid_backward<T: Scalar>(y: &ArrayView3<T>, grad_y: &ArrayView3<T>) -> Array3<T> {
    let mut gx = grad_y.to_owned();
    gx.zip_mut_with(y, |g, &yv| *g = *g * yv * (T::one() - yv));
    gx
}
