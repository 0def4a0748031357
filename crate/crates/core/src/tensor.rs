//! Rank-4 tensors and the layer primitives of the segmentation network.
//!
//! Every layer has an explicit forward and backward function. Layouts are
//! n-major, then channel, then row, then column (column fastest).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, validation_err, Error, Result};
use crate::scalar::Scalar;

/// Lower clamp applied to probabilities before taking the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Dims4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<(usize, usize, usize, usize)> for Dims4 {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Self { n, c, h, w }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: Dims4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(dims: impl Into<Dims4>) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: impl Into<Dims4>, value: T) -> Self {
        let dims = dims.into();
        Self { dims, data: vec![value; dims.len()] }
    }

    pub fn from_vec(dims: impl Into<Dims4>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        if data.len() != dims.len() {
            return shape_err(format!("{} elements cannot fill a tensor of shape {dims}", data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: impl Into<Dims4>, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let dims = dims.into();
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let d = self.dims;
        ((n * d.c + c) * d.h + y) * d.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        same_dims(self.dims, other.dims)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts the element type, e.g. `f32` activations to `f64` for checking.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 { dims: self.dims, data: self.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect() }
    }

    fn plane_slice(&self, n: usize) -> &[T] {
        let stride = self.dims.c * self.dims.plane();
        &self.data[n * stride..(n + 1) * stride]
    }

    fn plane_slice_mut(&mut self, n: usize) -> &mut [T] {
        let stride = self.dims.c * self.dims.plane();
        &mut self.data[n * stride..(n + 1) * stride]
    }
}

fn same_dims(a: Dims4, b: Dims4) -> Result<()> {
    if a != b {
        return shape_err(format!("shapes differ: {a} vs {b}"));
    }
    Ok(())
}

/// Convolution (or 2×2 transposed convolution) parameters.
///
/// `weights` is always laid out `(out_c, in_c, kh, kw)`, also for the
/// transposed case.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor4<T>, bias: Vec<T>, stride: usize, pad: usize) -> Result<Self> {
        if bias.len() != weights.dims().n {
            return shape_err(format!(
                "bias of length {} does not match weights {}",
                bias.len(),
                weights.dims()
            ));
        }
        if stride == 0 {
            return validation_err("convolution stride must be positive");
        }
        Ok(Self { weights, bias, stride, pad })
    }

    pub fn zeros(out_c: usize, in_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self { weights: Tensor4::zeros((out_c, in_c, k, k)), bias: vec![T::zero(); out_c], stride, pad }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims().n
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.dims().h, self.weights.dims().w)
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Gradients of one parameterized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<T> {
    pub input_grad: Tensor4<T>,
    pub weights_grad: Tensor4<T>,
    pub bias_grad: Vec<T>,
}

fn conv_output_dims<T: Scalar>(x: Dims4, p: &ConvParams<T>) -> Result<Dims4> {
    let (kh, kw) = p.kernel();
    if x.c != p.in_channels() {
        return shape_err(format!("input {x} does not match kernel {}", p.weights.dims()));
    }
    let span_h = x.h + 2 * p.pad;
    let span_w = x.w + 2 * p.pad;
    if span_h < kh || span_w < kw || (span_h - kh) % p.stride != 0 || (span_w - kw) % p.stride != 0 {
        return shape_err(format!(
            "input {x} with kernel {} (stride {}, pad {}) gives non-integral output",
            p.weights.dims(),
            p.stride,
            p.pad
        ));
    }
    Ok(Dims4::new(x.n, p.out_channels(), (span_h - kh) / p.stride + 1, (span_w - kw) / p.stride + 1))
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source coordinate along one axis, `None` when it falls into the zero padding.
    #[inline]
    fn source(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col<T: Scalar>(image: &[T], g: &Geometry, cols: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.c {
        let plane = &image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.source(oy, ki, g.h) {
                        None => line.fill(T::zero()),
                        Some(sy) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.source(ox, kj, g.w) {
                                    Some(sx) => plane[sy * g.w + sx],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &Geometry, image: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(sy) = g.source(oy, ki, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(sx) = g.source(ox, kj, g.w) {
                            image[(ci * g.h + sy) * g.w + sx] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Scalar>(x: Dims4, p: &ConvParams<T>, out: Dims4) -> Geometry {
    let (kh, kw) = p.kernel();
    Geometry { c: x.c, h: x.h, w: x.w, kh, kw, stride: p.stride, pad: p.pad, oh: out.h, ow: out.w }
}

/// Zero-padded cross-correlation.
pub fn conv2d_forward<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    let out_dims = conv_output_dims(x.dims(), p)?;
    let g = geometry(x.dims(), p, out_dims);
    let (k, np, oc) = (g.rows(), g.cols(), p.out_channels());
    let mut out = Tensor4::zeros(out_dims);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * np] };
    for n in 0..x.dims().n {
        let image = x.plane_slice(n);
        let lhs: &[T] = if g.is_pointwise() {
            image
        } else {
            im2col(image, &g, &mut cols);
            &cols
        };
        let dst = out.plane_slice_mut(n);
        for (o, chunk) in dst.chunks_mut(np).enumerate() {
            chunk.fill(p.bias[o]);
        }
        T::gemm(oc, k, np, T::one(), p.weights.data(), (k as isize, 1), lhs, (np as isize, 1), T::one(), dst, (np as isize, 1));
    }
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>, out_grad: &Tensor4<T>) -> Result<LayerGrad<T>> {
    let out_dims = conv_output_dims(x.dims(), p)?;
    if out_grad.dims() != out_dims {
        return shape_err(format!("output gradient {} does not match conv output {out_dims}", out_grad.dims()));
    }
    let g = geometry(x.dims(), p, out_dims);
    let (k, np, oc) = (g.rows(), g.cols(), p.out_channels());
    let mut input_grad = Tensor4::zeros(x.dims());
    let mut weights_grad = Tensor4::zeros(p.weights.dims());
    let mut bias_grad = vec![T::zero(); oc];
    let mut cols = vec![T::zero(); k * np];
    let mut dcols = vec![T::zero(); k * np];
    for n in 0..x.dims().n {
        let dy = out_grad.plane_slice(n);
        for (o, chunk) in dy.chunks(np).enumerate() {
            bias_grad[o] += chunk.iter().copied().sum();
        }
        let image = x.plane_slice(n);
        let lhs: &[T] = if g.is_pointwise() {
            image
        } else {
            im2col(image, &g, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        T::gemm(oc, np, k, T::one(), dy, (np as isize, 1), lhs, (1, np as isize), T::one(), weights_grad.data_mut(), (k as isize, 1));
        // dcols = Wᵀ · dY
        if g.is_pointwise() {
            let dx = input_grad.plane_slice_mut(n);
            T::gemm(k, oc, np, T::one(), p.weights.data(), (1, k as isize), dy, (np as isize, 1), T::zero(), dx, (np as isize, 1));
        } else {
            T::gemm(k, oc, np, T::one(), p.weights.data(), (1, k as isize), dy, (np as isize, 1), T::zero(), &mut dcols, (np as isize, 1));
            col2im_add(&dcols, &g, input_grad.plane_slice_mut(n));
        }
    }
    Ok(LayerGrad { input_grad, weights_grad, bias_grad })
}

/// Winning input positions of a 2×2 max-pool, kept for the backward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArgmaxMap {
    input_dims: Dims4,
    output_dims: Dims4,
    /// Flat input index per output element.
    winners: Vec<usize>,
}

impl ArgmaxMap {
    pub fn input_dims(&self) -> Dims4 {
        self.input_dims
    }

    pub fn output_dims(&self) -> Dims4 {
        self.output_dims
    }

    /// Flat input index of the winner of every output element.
    pub fn winners(&self) -> &[usize] {
        &self.winners
    }

    /// Winning (row, column) within the input plane for output element `(n, c, y, x)`.
    pub fn position(&self, n: usize, c: usize, y: usize, x: usize) -> (usize, usize) {
        let d = self.output_dims;
        let flat = self.winners[((n * d.c + c) * d.h + y) * d.w + x];
        let in_plane = flat % self.input_dims.plane();
        (in_plane / self.input_dims.w, in_plane % self.input_dims.w)
    }
}

/// 2×2 max-pool with stride 2; ties go to the first element in row-major order.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, ArgmaxMap)> {
    let d = x.dims();
    if d.h % 2 != 0 || d.w % 2 != 0 {
        return shape_err(format!("max-pool needs even height and width, got {d}"));
    }
    let od = Dims4::new(d.n, d.c, d.h / 2, d.w / 2);
    let mut out = Vec::with_capacity(od.len());
    let mut winners = Vec::with_capacity(od.len());
    for n in 0..d.n {
        for c in 0..d.c {
            for y in 0..od.h {
                for xo in 0..od.w {
                    let mut best = x.index(n, c, 2 * y, 2 * xo);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = x.index(n, c, 2 * y + dy, 2 * xo + dx);
                        if x.data[i] > x.data[best] {
                            best = i;
                        }
                    }
                    out.push(x.data[best]);
                    winners.push(best);
                }
            }
        }
    }
    Ok((Tensor4 { dims: od, data: out }, ArgmaxMap { input_dims: d, output_dims: od, winners }))
}

pub fn maxpool2_backward<T: Scalar>(map: &ArgmaxMap, out_grad: &Tensor4<T>) -> Result<Tensor4<T>> {
    if out_grad.dims() != map.output_dims {
        return shape_err(format!(
            "output gradient {} does not match pooled shape {}",
            out_grad.dims(),
            map.output_dims
        ));
    }
    let mut grad = Tensor4::zeros(map.input_dims);
    for (&src, &g) in map.winners.iter().zip(out_grad.data()) {
        grad.data[src] += g;
    }
    Ok(grad)
}

fn check_deconv<T: Scalar>(x: Dims4, p: &ConvParams<T>) -> Result<()> {
    if p.kernel() != (2, 2) || p.stride != 2 || p.pad != 0 {
        return shape_err(format!(
            "transposed convolution needs a 2×2 kernel with stride 2 and no padding, got {} stride {} pad {}",
            p.weights.dims(),
            p.stride,
            p.pad
        ));
    }
    if x.c != p.in_channels() {
        return shape_err(format!("input {x} does not match kernel {}", p.weights.dims()));
    }
    Ok(())
}

/// Weights reordered to `((o·2 + dy)·2 + dx) × in_c` rows for the GEMM.
fn deconv_matrix<T: Scalar>(p: &ConvParams<T>) -> Vec<T> {
    let (oc, ic) = (p.out_channels(), p.in_channels());
    let mut wr = vec![T::zero(); oc * 4 * ic];
    for o in 0..oc {
        for c in 0..ic {
            for d in 0..4 {
                wr[(o * 4 + d) * ic + c] = p.weights.data()[(o * ic + c) * 4 + d];
            }
        }
    }
    wr
}

/// 2×2, stride-2 transposed convolution: the adjoint of a stride-2 2×2 convolution.
pub fn deconv2_forward<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    let d = x.dims();
    check_deconv(d, p)?;
    let (oc, ic, hw) = (p.out_channels(), p.in_channels(), d.plane());
    let wr = deconv_matrix(p);
    let mut z = vec![T::zero(); oc * 4 * hw];
    let mut out = Tensor4::zeros((d.n, oc, 2 * d.h, 2 * d.w));
    let ow = 2 * d.w;
    for n in 0..d.n {
        T::gemm(oc * 4, ic, hw, T::one(), &wr, (ic as isize, 1), x.plane_slice(n), (hw as isize, 1), T::zero(), &mut z, (hw as isize, 1));
        let dst = out.plane_slice_mut(n);
        for o in 0..oc {
            let plane = &mut dst[o * 4 * hw..(o + 1) * 4 * hw];
            for dd in 0..4 {
                let (dy, dx) = (dd / 2, dd % 2);
                let row = &z[(o * 4 + dd) * hw..(o * 4 + dd + 1) * hw];
                for i in 0..d.h {
                    for j in 0..d.w {
                        plane[(2 * i + dy) * ow + 2 * j + dx] = row[i * d.w + j] + p.bias[o];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn deconv2_backward<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>, out_grad: &Tensor4<T>) -> Result<LayerGrad<T>> {
    let d = x.dims();
    check_deconv(d, p)?;
    let (oc, ic, hw) = (p.out_channels(), p.in_channels(), d.plane());
    let expected = Dims4::new(d.n, oc, 2 * d.h, 2 * d.w);
    if out_grad.dims() != expected {
        return shape_err(format!("output gradient {} does not match deconv output {expected}", out_grad.dims()));
    }
    let wr = deconv_matrix(p);
    let mut dz = vec![T::zero(); oc * 4 * hw];
    let mut dwr = vec![T::zero(); oc * 4 * ic];
    let mut input_grad = Tensor4::zeros(d);
    let mut bias_grad = vec![T::zero(); oc];
    let ow = 2 * d.w;
    for n in 0..d.n {
        let g = out_grad.plane_slice(n);
        for o in 0..oc {
            let plane = &g[o * 4 * hw..(o + 1) * 4 * hw];
            bias_grad[o] += plane.iter().copied().sum();
            for dd in 0..4 {
                let (dy, dx) = (dd / 2, dd % 2);
                let row = &mut dz[(o * 4 + dd) * hw..(o * 4 + dd + 1) * hw];
                for i in 0..d.h {
                    for j in 0..d.w {
                        row[i * d.w + j] = plane[(2 * i + dy) * ow + 2 * j + dx];
                    }
                }
            }
        }
        // dX = Wrᵀ · dZ ; dWr += dZ · Xᵀ
        T::gemm(ic, oc * 4, hw, T::one(), &wr, (1, ic as isize), &dz, (hw as isize, 1), T::zero(), input_grad.plane_slice_mut(n), (hw as isize, 1));
        T::gemm(oc * 4, hw, ic, T::one(), &dz, (hw as isize, 1), x.plane_slice(n), (1, hw as isize), T::one(), &mut dwr, (ic as isize, 1));
    }
    let mut weights_grad = Tensor4::zeros(p.weights.dims());
    for o in 0..oc {
        for c in 0..ic {
            for dd in 0..4 {
                weights_grad.data[(o * ic + c) * 4 + dd] = dwr[(o * 4 + dd) * ic + c];
            }
        }
    }
    Ok(LayerGrad { input_grad, weights_grad, bias_grad })
}

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `out_grad` where `x > 0`; the gradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, out_grad: &Tensor4<T>) -> Result<Tensor4<T>> {
    same_dims(x.dims(), out_grad.dims())?;
    let data = x
        .data
        .iter()
        .zip(&out_grad.data)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor4 { dims: x.dims, data })
}

/// Per-pixel softmax across the channel axis, stabilized by max subtraction.
pub fn softmax_channels<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let d = x.dims();
    let plane = d.plane();
    let mut out = Tensor4::zeros(d);
    for n in 0..d.n {
        let base = n * d.c * plane;
        for px in 0..plane {
            let at = |c: usize| base + c * plane + px;
            let max = (0..d.c).map(|c| x.data[at(c)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for c in 0..d.c {
                let e = (x.data[at(c)] - max).exp();
                out.data[at(c)] = e;
                total += e;
            }
            for c in 0..d.c {
                out.data[at(c)] /= total;
            }
        }
    }
    out
}

/// Summed pixel-wise cross-entropy `−Σ G·log(max(P, 1e-12))` over every
/// pixel and channel, together with the combined softmax + cross-entropy
/// gradient with respect to the logits, `P − G`.
pub fn cross_entropy_loss<T: Scalar>(p: &Tensor4<T>, g: &Tensor4<T>) -> Result<(T, Tensor4<T>)> {
    same_dims(p.dims(), g.dims())?;
    let d = g.dims();
    let plane = d.plane();
    for n in 0..d.n {
        for px in 0..plane {
            let mut total = T::zero();
            for c in 0..d.c {
                let v = g.data[(n * d.c + c) * plane + px];
                if v != T::zero() && v != T::one() {
                    return Err(Error::Validation(format!("ground truth value {v} is not 0 or 1")));
                }
                total += v;
            }
            if total != T::one() {
                return Err(Error::Validation(format!(
                    "ground truth is not one-hot at sample {n}, pixel ({}, {})",
                    px / d.w,
                    px % d.w
                )));
            }
        }
    }
    let clamp = T::from_f64_lossy(LOG_CLAMP);
    let loss = p
        .data
        .iter()
        .zip(&g.data)
        .filter(|(_, &gv)| gv != T::zero())
        .map(|(&pv, &gv)| -gv * pv.max(clamp).ln())
        .sum();
    let grad = Tensor4 { dims: d, data: p.data.iter().zip(&g.data).map(|(&pv, &gv)| pv - gv).collect() };
    Ok((loss, grad))
}

/// Concatenates along the channel axis, `a` first.
pub fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (da, db) = (a.dims(), b.dims());
    if da.n != db.n || da.h != db.h || da.w != db.w {
        return shape_err(format!("cannot concatenate {da} and {db} along channels"));
    }
    let dims = Dims4::new(da.n, da.c + db.c, da.h, da.w);
    let mut data = Vec::with_capacity(dims.len());
    for n in 0..da.n {
        data.extend_from_slice(a.plane_slice(n));
        data.extend_from_slice(b.plane_slice(n));
    }
    Ok(Tensor4 { dims, data })
}

/// Inverse of [`concat_channels`]: splits off the first `first_c` channels.
pub fn split_channels<T: Scalar>(t: &Tensor4<T>, first_c: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let d = t.dims();
    if first_c > d.c {
        return shape_err(format!("cannot split {first_c} channels off {d}"));
    }
    let da = Dims4::new(d.n, first_c, d.h, d.w);
    let db = Dims4::new(d.n, d.c - first_c, d.h, d.w);
    let (mut a, mut b) = (Vec::with_capacity(da.len()), Vec::with_capacity(db.len()));
    let cut = first_c * d.plane();
    for n in 0..d.n {
        let s = t.plane_slice(n);
        a.extend_from_slice(&s[..cut]);
        b.extend_from_slice(&s[cut..]);
    }
    Ok((Tensor4 { dims: da, data: a }, Tensor4 { dims: db, data: b }))
}
