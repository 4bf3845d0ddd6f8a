//! Forward and backward kernels for the fixed layer kinds the encoder and
//! decoder are built from.
//!
//! Images are `[C, H, W]` tensors. Convolution is cross-correlation with zero
//! padding, lowered to a GEMM over an im2col buffer that is kept in the cache
//! for the backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
}

/// A layer with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv {
        /// `[C_out, C_in, k, k]`
        kernels: Tensor<T>,
        /// `[C_out]`
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        window: usize,
    },
    Upsample {
        factor: usize,
    },
    Dense {
        /// `[m, n]`
        weight: Tensor<T>,
        /// `[m]`
        bias: Tensor<T>,
    },
    Activation(ActivationKind),
    Reshape {
        to: Vec<usize>,
    },
}

/// Forward-pass state needed by [`backward`].
///
/// Shapes are the full tensor shapes seen by the forward pass, including a
/// leading batch extent when there was one.
#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    Conv {
        input_shape: Vec<usize>,
        output_shape: Vec<usize>,
        saved: ConvSaved<T>,
    },
    MaxPool {
        input_shape: Vec<usize>,
        output_shape: Vec<usize>,
        /// Flat offset into the forward input of each output cell's maximum.
        argmax: Vec<usize>,
    },
    Upsample {
        input_shape: Vec<usize>,
        factor: usize,
    },
    Dense {
        /// `[N, n]` row-major
        input: Vec<T>,
        batch: usize,
        batched: bool,
    },
    Activation {
        kind: ActivationKind,
        output: Tensor<T>,
    },
    Reshape {
        input_shape: Vec<usize>,
        output_shape: Vec<usize>,
    },
}

/// What a convolution keeps for its backward pass, depending on the
/// lowering used for the forward pass.
#[derive(Clone, Debug)]
pub enum ConvSaved<T> {
    /// im2col matrix `[C_in*k*k, N*H'*W']`
    Columns(Vec<T>),
    /// Zero-padded input `[N, C_in, H+2p, W+2p]`
    Padded(Vec<T>),
}

/// Convolutions with at most this many output channels use the direct loop
/// instead of im2col + GEMM.
const DIRECT_CONV_MAX_OUT: usize = 4;

impl<T> LayerCache<T> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerCache::Conv { .. } => "conv",
            LayerCache::MaxPool { .. } => "maxpool",
            LayerCache::Upsample { .. } => "upsample",
            LayerCache::Dense { .. } => "dense",
            LayerCache::Activation { .. } => "activation",
            LayerCache::Reshape { .. } => "reshape",
        }
    }
}

impl<T> Layer<T> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Upsample { .. } => "upsample",
            Layer::Dense { .. } => "dense",
            Layer::Activation(_) => "activation",
            Layer::Reshape { .. } => "reshape",
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv { kernels, bias, .. } => vec![kernels, bias],
            Layer::Dense { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv { kernels, bias, .. } => vec![kernels, bias],
            Layer::Dense { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }
}

/// Output extent of a convolution along one axis, or `None` when the kernel
/// does not fit.
pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Valid output columns `[lo, hi)` for kernel offset `kj` along an axis of
/// input extent `w`.
fn valid_range(w: usize, wo: usize, kj: usize, stride: usize, padding: usize) -> (usize, usize) {
    // ix = ox*stride + kj - padding must lie in [0, w)
    let lo = if padding > kj {
        (padding - kj).div_ceil(stride)
    } else {
        0
    };
    let hi = if w + padding > kj {
        ((w + padding - kj - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Geometry of a convolution over a batch.
#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Writes `[C_in*k*k, N*H'*W']` columns.
fn im2col<T: Scalar>(input: &[T], g: ConvGeom) -> Vec<T> {
    let plane = g.plane();
    let row_len = g.n * plane;
    let mut cols = vec![T::zero(); g.c_in * g.k * g.k * row_len];
    for b in 0..g.n {
        for c in 0..g.c_in {
            let src = &input[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.k {
                let (ylo, yhi) = valid_range(g.h, g.ho, ki, g.stride, g.padding);
                for kj in 0..g.k {
                    let (xlo, xhi) = valid_range(g.w, g.wo, kj, g.stride, g.padding);
                    let row = (c * g.k + ki) * g.k + kj;
                    let dst = &mut cols[row * row_len + b * plane..][..plane];
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ki - g.padding;
                        let src_row = &src[iy * g.w..][..g.w];
                        let dst_row = &mut dst[oy * g.wo..][..g.wo];
                        if g.stride == 1 {
                            let ix0 = xlo + kj - g.padding;
                            dst_row[xlo..xhi].copy_from_slice(&src_row[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                dst_row[ox] = src_row[ox * g.stride + kj - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto an `[N,C_in,H,W]` buffer.
fn col2im<T: Scalar>(cols: &[T], g: ConvGeom) -> Vec<T> {
    let plane = g.plane();
    let row_len = g.n * plane;
    let mut out = vec![T::zero(); g.n * g.c_in * g.h * g.w];
    for b in 0..g.n {
        for c in 0..g.c_in {
            let dst = &mut out[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.k {
                let (ylo, yhi) = valid_range(g.h, g.ho, ki, g.stride, g.padding);
                for kj in 0..g.k {
                    let (xlo, xhi) = valid_range(g.w, g.wo, kj, g.stride, g.padding);
                    let row = (c * g.k + ki) * g.k + kj;
                    let src = &cols[row * row_len + b * plane..][..plane];
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ki - g.padding;
                        let dst_row = &mut dst[iy * g.w..][..g.w];
                        let src_row = &src[oy * g.wo..][..g.wo];
                        for ox in xlo..xhi {
                            dst_row[ox * g.stride + kj - g.padding] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `(N, C, H, W)` for a `[C,H,W]` or `[N,C,H,W]` tensor.
fn image_dims<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Dimension(format!(
            "{what} expects a [C,H,W] or [N,C,H,W] tensor, got {:?}",
            t.shape()
        ))),
    }
}

/// Replaces the trailing three extents of `shape` with `(c, h, w)`.
fn with_chw(shape: &[usize], c: usize, h: usize, w: usize) -> Vec<usize> {
    let mut out = shape[..shape.len() - 3].to_vec();
    out.extend([c, h, w]);
    out
}

fn conv_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    let (n, c_in, h, w) = image_dims(input, "conv2d")?;
    let &[c_out, k_in, k, k2] = kernels.shape() else {
        return Err(Error::Dimension(format!(
            "kernels must be [C_out,C_in,k,k], got {:?}",
            kernels.shape()
        )));
    };
    if k != k2 {
        return Err(Error::Dimension(format!("kernels must be square, got {k}x{k2}")));
    }
    if k_in != c_in {
        return Err(Error::Dimension(format!(
            "input has {c_in} channels but kernels expect {k_in}"
        )));
    }
    bias.ensure_shape(&[c_out], "conv bias")?;
    let (Some(ho), Some(wo)) = (
        conv_output_extent(h, k, stride, padding),
        conv_output_extent(w, k, stride, padding),
    ) else {
        return Err(Error::Dimension(format!(
            "kernel {k} with stride {stride} and padding {padding} does not fit a {h}x{w} input"
        )));
    };
    let g = ConvGeom {
        n,
        c_in,
        h,
        w,
        k,
        stride,
        padding,
        ho,
        wo,
    };
    let (out, saved) = if c_out <= DIRECT_CONV_MAX_OUT {
        let padded = pad_input(input.data(), g);
        (direct_conv(&padded, kernels.data(), bias.data(), c_out, g), ConvSaved::Padded(padded))
    } else {
        let columns = im2col(input.data(), g);
        (gemm_conv(&columns, kernels.data(), bias.data(), c_out, g), ConvSaved::Columns(columns))
    };
    let output_shape = with_chw(input.shape(), c_out, ho, wo);
    Ok((
        Tensor::from_parts(output_shape.clone(), out),
        LayerCache::Conv {
            input_shape: input.shape().to_vec(),
            output_shape,
            saved,
        },
    ))
}

fn gemm_conv<T: Scalar>(columns: &[T], kernels: &[T], bias: &[T], c_out: usize, g: ConvGeom) -> Vec<T> {
    let (n, plane) = (g.n, g.plane());
    // channel-major result [C_out, N*plane]
    let mut cm = vec![T::zero(); c_out * n * plane];
    T::gemm(
        c_out,
        g.c_in * g.k * g.k,
        n * plane,
        T::one(),
        kernels,
        false,
        columns,
        false,
        T::zero(),
        &mut cm,
    );
    let mut out = vec![T::zero(); n * c_out * plane];
    for b in 0..n {
        for (o, &bv) in bias.iter().enumerate() {
            let src = &cm[o * n * plane + b * plane..][..plane];
            let dst = &mut out[(b * c_out + o) * plane..][..plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        }
    }
    out
}

fn padded_dims(g: ConvGeom) -> (usize, usize) {
    (g.h + 2 * g.padding, g.w + 2 * g.padding)
}

fn pad_input<T: Scalar>(input: &[T], g: ConvGeom) -> Vec<T> {
    let (hp, wp) = padded_dims(g);
    let mut out = vec![T::zero(); g.n * g.c_in * hp * wp];
    for p in 0..g.n * g.c_in {
        for y in 0..g.h {
            out[(p * hp + y + g.padding) * wp + g.padding..][..g.w]
                .copy_from_slice(&input[(p * g.h + y) * g.w..][..g.w]);
        }
    }
    out
}

fn direct_conv<T: Scalar>(padded: &[T], kernels: &[T], bias: &[T], c_out: usize, g: ConvGeom) -> Vec<T> {
    let (hp, wp) = padded_dims(g);
    let plane = g.plane();
    let mut out = vec![T::zero(); g.n * c_out * plane];
    for b in 0..g.n {
        for o in 0..c_out {
            let dst = &mut out[(b * c_out + o) * plane..][..plane];
            dst.fill(bias[o]);
            for c in 0..g.c_in {
                let src = &padded[(b * g.c_in + c) * hp * wp..][..hp * wp];
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let kv = kernels[((o * g.c_in + c) * g.k + ki) * g.k + kj];
                        for y in 0..g.ho {
                            let row = &src[(y * g.stride + ki) * wp + kj..];
                            let out_row = &mut dst[y * g.wo..][..g.wo];
                            if g.stride == 1 {
                                for (d, &v) in out_row.iter_mut().zip(&row[..g.wo]) {
                                    *d += kv * v;
                                }
                            } else {
                                for (x, d) in out_row.iter_mut().enumerate() {
                                    *d += kv * row[x * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Kernel and (optionally) padded-input gradients of [`direct_conv`].
fn direct_conv_backward<T: Scalar>(
    padded: &[T],
    kernels: &[T],
    grad_out: &[T],
    c_out: usize,
    g: ConvGeom,
    need_input_grad: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let (hp, wp) = padded_dims(g);
    let plane = g.plane();
    let mut grad_k = vec![T::zero(); c_out * g.c_in * g.k * g.k];
    let mut grad_p = need_input_grad.then(|| vec![T::zero(); g.n * g.c_in * hp * wp]);
    for b in 0..g.n {
        for o in 0..c_out {
            let go = &grad_out[(b * c_out + o) * plane..][..plane];
            for c in 0..g.c_in {
                let base = (b * g.c_in + c) * hp * wp;
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let kidx = ((o * g.c_in + c) * g.k + ki) * g.k + kj;
                        let kv = kernels[kidx];
                        let mut acc = T::zero();
                        for y in 0..g.ho {
                            let start = base + (y * g.stride + ki) * wp + kj;
                            let go_row = &go[y * g.wo..][..g.wo];
                            if g.stride == 1 {
                                acc += dot(go_row, &padded[start..start + g.wo]);
                                if let Some(gp) = grad_p.as_mut() {
                                    for (d, &a) in gp[start..start + g.wo].iter_mut().zip(go_row) {
                                        *d += kv * a;
                                    }
                                }
                            } else {
                                for (x, &a) in go_row.iter().enumerate() {
                                    acc += a * padded[start + x * g.stride];
                                    if let Some(gp) = grad_p.as_mut() {
                                        gp[start + x * g.stride] += kv * a;
                                    }
                                }
                            }
                        }
                        grad_k[kidx] += acc;
                    }
                }
            }
        }
    }
    (grad_k, grad_p)
}

/// Dot product with eight independent accumulators so the loop vectorizes.
/// The summation order is fixed, so results are reproducible.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for i in 0..8 {
            lanes[i] += ca[i] * cb[i];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    lanes.iter().copied().sum::<T>() + tail
}

fn unpad<T: Scalar>(padded: &[T], g: ConvGeom) -> Vec<T> {
    let (hp, wp) = padded_dims(g);
    let mut out = Vec::with_capacity(g.n * g.c_in * g.h * g.w);
    for p in 0..g.n * g.c_in {
        for y in 0..g.h {
            out.extend_from_slice(&padded[(p * hp + y + g.padding) * wp + g.padding..][..g.w]);
        }
    }
    out
}

/// Cross-correlation of a `[C_in,H,W]` input (or an `[N,C_in,H,W]` batch)
/// with `[C_out,C_in,k,k]` kernels plus a per-channel bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv_forward(input, kernels, bias, stride, padding).map(|(out, _)| out)
}

/// Non-overlapping max-pool over `[C,H,W]` or `[N,C,H,W]`. Ties resolve to
/// the first position in row-major order inside each window.
pub fn maxpool<T: Scalar>(input: &Tensor<T>, window: usize) -> Result<(Tensor<T>, LayerCache<T>)> {
    let (n, c, h, w) = image_dims(input, "maxpool")?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} input is not divisible by pool window {window}"
        )));
    }
    let (ho, wo) = (h / window, w / window);
    let data = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for ch in 0..n * c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * window * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * window + dy) * w + ox * window + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let output_shape = with_chw(input.shape(), c, ho, wo);
    Ok((
        Tensor::from_parts(output_shape.clone(), out),
        LayerCache::MaxPool {
            input_shape: input.shape().to_vec(),
            output_shape,
            argmax,
        },
    ))
}

/// Nearest-neighbour upsampling: every cell becomes a `factor x factor` block.
pub fn upsample_nn<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = image_dims(input, "upsample")?;
    if factor == 0 {
        return Err(Error::Dimension("upsample factor must be at least 1".into()));
    }
    let (ho, wo) = (h * factor, w * factor);
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for ch in 0..n * c {
        for oy in 0..ho {
            let row = &src[ch * h * w + (oy / factor) * w..][..w];
            for &v in row {
                for _ in 0..factor {
                    out.push(v);
                }
            }
        }
    }
    Ok(Tensor::from_parts(with_chw(input.shape(), c, ho, wo), out))
}

/// `(N, n, batched)` for a `[n]` vector or an `[N, n]` batch.
fn vector_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, bool)> {
    match *t.shape() {
        [n] => Ok((1, n, false)),
        [b, n] => Ok((b, n, true)),
        _ => Err(Error::Dimension(format!(
            "dense expects a [n] or [N,n] input, got {:?}",
            t.shape()
        ))),
    }
}

/// `weight * input + bias` for a `[m, n]` weight; `[N, n]` inputs are
/// processed row by row.
pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let &[m, n] = weight.shape() else {
        return Err(Error::Dimension(format!(
            "dense weight must be [m,n], got {:?}",
            weight.shape()
        )));
    };
    let (batch, len, batched) = vector_dims(input)?;
    if len != n {
        return Err(Error::Dimension(format!(
            "dense weight expects {n} inputs, got {len}"
        )));
    }
    bias.ensure_shape(&[m], "dense bias")?;
    let mut out = Vec::with_capacity(batch * m);
    for _ in 0..batch {
        out.extend_from_slice(bias.data());
    }
    // [N, n] x [m, n]^T
    T::gemm(batch, n, m, T::one(), input.data(), false, weight.data(), true, T::one(), &mut out);
    let shape = if batched { vec![batch, m] } else { vec![m] };
    Ok(Tensor::from_parts(shape, out))
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: ActivationKind) -> Tensor<T> {
    match kind {
        ActivationKind::Relu => input.map(|v| v.max(T::zero())),
        ActivationKind::Sigmoid => input.map(sigmoid),
    }
}

/// Runs one layer and returns its output together with the backward cache.
///
/// Every kernel accepts a leading batch extent. `Reshape` always treats the
/// first extent as the batch and maps the rest to `to`.
pub fn forward<T: Scalar>(layer: &Layer<T>, input: &Tensor<T>) -> Result<(Tensor<T>, LayerCache<T>)> {
    match layer {
        Layer::Conv {
            kernels,
            bias,
            stride,
            padding,
        } => conv_forward(input, kernels, bias, *stride, *padding),
        Layer::MaxPool { window } => maxpool(input, *window),
        Layer::Upsample { factor } => {
            let out = upsample_nn(input, *factor)?;
            Ok((
                out,
                LayerCache::Upsample {
                    input_shape: input.shape().to_vec(),
                    factor: *factor,
                },
            ))
        }
        Layer::Dense { weight, bias } => {
            let out = dense(input, weight, bias)?;
            let (batch, _, batched) = vector_dims(input)?;
            Ok((
                out,
                LayerCache::Dense {
                    input: input.data().to_vec(),
                    batch,
                    batched,
                },
            ))
        }
        Layer::Activation(kind) => {
            let out = activation(input, *kind);
            Ok((
                out.clone(),
                LayerCache::Activation {
                    kind: *kind,
                    output: out,
                },
            ))
        }
        Layer::Reshape { to } => {
            let input_shape = input.shape().to_vec();
            let mut shape = vec![input_shape[0]];
            shape.extend(to);
            let out = input.clone().reshape(&shape)?;
            Ok((
                out,
                LayerCache::Reshape {
                    input_shape,
                    output_shape: shape,
                },
            ))
        }
    }
}

fn mismatch<T>(layer: &Layer<T>, cache: &LayerCache<T>) -> Error {
    Error::Contract(format!(
        "{} cache passed to the backward pass of a {} layer",
        cache.kind_name(),
        layer.kind_name()
    ))
}

/// Gradients of one layer: `grad_input` is `None` when it was not requested.
#[derive(Clone, Debug)]
pub struct LayerGrads<T> {
    pub grad_input: Option<Tensor<T>>,
    /// Same order as [`Layer::params`], summed over the batch.
    pub grad_params: Vec<Tensor<T>>,
}

/// Exact gradients of a layer's forward map: `(grad_input, grad_params)`.
pub fn backward<T: Scalar>(
    layer: &Layer<T>,
    cache: &LayerCache<T>,
    grad_output: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let g = backward_with(layer, cache, grad_output, true)?;
    Ok((g.grad_input.expect("requested input gradient"), g.grad_params))
}

/// Like [`backward`], optionally skipping the input gradient (first layer).
pub fn backward_with<T: Scalar>(
    layer: &Layer<T>,
    cache: &LayerCache<T>,
    grad_output: &Tensor<T>,
    need_input_grad: bool,
) -> Result<LayerGrads<T>> {
    match (layer, cache) {
        (
            Layer::Conv {
                kernels,
                stride,
                padding,
                ..
            },
            LayerCache::Conv {
                input_shape,
                output_shape,
                saved,
            },
        ) => {
            grad_output.ensure_shape(output_shape, "conv grad_output")?;
            let r = input_shape.len();
            let (c_in, h, w) = (input_shape[r - 3], input_shape[r - 2], input_shape[r - 1]);
            let n = if r == 4 { input_shape[0] } else { 1 };
            let (c_out, ho, wo) = (output_shape[r - 3], output_shape[r - 2], output_shape[r - 1]);
            let k = kernels.shape()[2];
            let g = ConvGeom {
                n,
                c_in,
                h,
                w,
                k,
                stride: *stride,
                padding: *padding,
                ho,
                wo,
            };
            let plane = ho * wo;
            let ck = c_in * k * k;
            let go = grad_output.data();
            let grad_b: Vec<T> = (0..c_out)
                .map(|o| (0..n).map(|b| go[(b * c_out + o) * plane..][..plane].iter().copied().sum::<T>()).sum())
                .collect();

            let (grad_k, grad_input) = match saved {
                ConvSaved::Padded(padded) => {
                    let (gk, gp) = direct_conv_backward(padded, kernels.data(), go, c_out, g, need_input_grad);
                    (gk, gp.map(|gp| unpad(&gp, g)))
                }
                ConvSaved::Columns(columns) => {
                    // channel-major view [C_out, N*plane]
                    let mut gcm = vec![T::zero(); c_out * n * plane];
                    for b in 0..n {
                        for o in 0..c_out {
                            gcm[o * n * plane + b * plane..][..plane]
                                .copy_from_slice(&go[(b * c_out + o) * plane..][..plane]);
                        }
                    }
                    let mut gk = vec![T::zero(); c_out * ck];
                    T::gemm(c_out, n * plane, ck, T::one(), &gcm, false, columns, true, T::zero(), &mut gk);
                    let gi = need_input_grad.then(|| {
                        let mut grad_cols = vec![T::zero(); ck * n * plane];
                        T::gemm(ck, c_out, n * plane, T::one(), kernels.data(), true, &gcm, false, T::zero(), &mut grad_cols);
                        col2im(&grad_cols, g)
                    });
                    (gk, gi)
                }
            };
            Ok(LayerGrads {
                grad_input: grad_input.map(|gi| Tensor::from_parts(input_shape.clone(), gi)),
                grad_params: vec![
                    Tensor::from_parts(kernels.shape().to_vec(), grad_k),
                    Tensor::from_parts(vec![c_out], grad_b),
                ],
            })
        }
        (
            Layer::MaxPool { .. },
            LayerCache::MaxPool {
                input_shape,
                output_shape,
                argmax,
            },
        ) => {
            grad_output.ensure_shape(output_shape, "maxpool grad_output")?;
            let mut gi = vec![T::zero(); input_shape.iter().product()];
            for (&idx, &g) in argmax.iter().zip(grad_output.data()) {
                gi[idx] += g;
            }
            Ok(LayerGrads {
                grad_input: Some(Tensor::from_parts(input_shape.clone(), gi)),
                grad_params: Vec::new(),
            })
        }
        (Layer::Upsample { .. }, LayerCache::Upsample { input_shape, factor }) => {
            let r = input_shape.len();
            let (h, w) = (input_shape[r - 2], input_shape[r - 1]);
            let planes: usize = input_shape[..r - 2].iter().product();
            let (ho, wo) = (h * factor, w * factor);
            let mut expect = input_shape.clone();
            expect[r - 2] = ho;
            expect[r - 1] = wo;
            grad_output.ensure_shape(&expect, "upsample grad_output")?;
            let go = grad_output.data();
            let mut gi = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                for oy in 0..ho {
                    let dst = &mut gi[p * h * w + (oy / factor) * w..][..w];
                    let src = &go[(p * ho + oy) * wo..][..wo];
                    for (ox, &v) in src.iter().enumerate() {
                        dst[ox / factor] += v;
                    }
                }
            }
            Ok(LayerGrads {
                grad_input: Some(Tensor::from_parts(input_shape.clone(), gi)),
                grad_params: Vec::new(),
            })
        }
        (
            Layer::Dense { weight, .. },
            LayerCache::Dense {
                input,
                batch,
                batched,
            },
        ) => {
            let (m, n) = (weight.shape()[0], weight.shape()[1]);
            let expect = if *batched { vec![*batch, m] } else { vec![m] };
            grad_output.ensure_shape(&expect, "dense grad_output")?;
            let go = grad_output.data();
            // [m, N] x [N, n]
            let mut grad_w = vec![T::zero(); m * n];
            T::gemm(m, *batch, n, T::one(), go, true, input, false, T::zero(), &mut grad_w);
            let mut grad_b = vec![T::zero(); m];
            for row in go.chunks_exact(m) {
                for (d, &v) in grad_b.iter_mut().zip(row) {
                    *d += v;
                }
            }
            let grad_input = if need_input_grad {
                let mut gi = vec![T::zero(); batch * n];
                T::gemm(*batch, m, n, T::one(), go, false, weight.data(), false, T::zero(), &mut gi);
                let shape = if *batched { vec![*batch, n] } else { vec![n] };
                Some(Tensor::from_parts(shape, gi))
            } else {
                None
            };
            Ok(LayerGrads {
                grad_input,
                grad_params: vec![
                    Tensor::from_parts(vec![m, n], grad_w),
                    Tensor::from_parts(vec![m], grad_b),
                ],
            })
        }
        (Layer::Activation(kind), LayerCache::Activation { kind: cached, output }) => {
            if kind != cached {
                return Err(Error::Contract(format!(
                    "{cached:?} activation cache passed to a {kind:?} activation"
                )));
            }
            grad_output.ensure_shape(output.shape(), "activation grad_output")?;
            let gi: Vec<T> = output
                .data()
                .iter()
                .zip(grad_output.data())
                .map(|(&y, &g)| match kind {
                    ActivationKind::Relu => {
                        if y > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    }
                    ActivationKind::Sigmoid => g * y * (T::one() - y),
                })
                .collect();
            Ok(LayerGrads {
                grad_input: Some(Tensor::from_parts(output.shape().to_vec(), gi)),
                grad_params: Vec::new(),
            })
        }
        (
            Layer::Reshape { .. },
            LayerCache::Reshape {
                input_shape,
                output_shape,
            },
        ) => {
            grad_output.ensure_shape(output_shape, "reshape grad_output")?;
            Ok(LayerGrads {
                grad_input: Some(grad_output.clone().reshape(input_shape)?),
                grad_params: Vec::new(),
            })
        }
        _ => Err(mismatch(layer, cache)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_zero_input_gives_zero_output() {
        let input = Tensor::<f64>::zeros(&[1, 4, 4]);
        let kernels = t(&[2, 1, 3, 3], &[0.3; 18]);
        let out = conv2d(&input, &kernels, &Tensor::zeros(&[2]), 1, 1).unwrap();
        assert_eq!(out.shape(), &[2, 4, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let input = t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let out = conv2d(&input, &t(&[1, 1, 1, 1], &[1.0]), &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_sums_window() {
        let input = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let out = conv2d(&input, &t(&[1, 1, 2, 2], &[1.0; 4]), &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(out, t(&[1, 1, 1], &[10.0]));
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_oversized_kernel() {
        let input = Tensor::<f64>::zeros(&[2, 4, 4]);
        let err = conv2d(&input, &Tensor::zeros(&[1, 1, 3, 3]), &Tensor::zeros(&[1]), 1, 0);
        assert!(matches!(err, Err(Error::Dimension(_))));
        let err = conv2d(&input, &Tensor::zeros(&[1, 2, 5, 5]), &Tensor::zeros(&[1]), 1, 0);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_stride_two_shape() {
        let input = Tensor::<f64>::full(&[1, 5, 5], 1.0);
        let out = conv2d(&input, &Tensor::full(&[1, 1, 3, 3], 1.0), &Tensor::zeros(&[1]), 2, 1).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        // corner window sees 4 in-bounds cells, center sees 9
        assert_eq!(out.at(&[0, 0, 0]), 4.0);
        assert_eq!(out.at(&[0, 1, 1]), 9.0);
    }

    #[test]
    fn maxpool_picks_max_and_records_argmax() {
        let (out, cache) = maxpool(&t(&[1, 2, 2], &[1., 2., 3., 4.]), 2).unwrap();
        assert_eq!(out, t(&[1, 1, 1], &[4.0]));
        let LayerCache::MaxPool { argmax, .. } = cache else { panic!() };
        assert_eq!(argmax, vec![3]);
    }

    #[test]
    fn maxpool_ties_take_first_position() {
        let (out, cache) = maxpool(&Tensor::<f64>::full(&[1, 4, 4], 0.7), 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.7));
        let LayerCache::MaxPool { argmax, .. } = cache else { panic!() };
        // top-left of each window
        assert_eq!(argmax, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_ramp() {
        let ramp: Vec<f64> = (0..16).map(f64::from).collect();
        let (out, _) = maxpool(&t(&[1, 4, 4], &ramp), 2).unwrap();
        assert_eq!(out, t(&[1, 2, 2], &[5., 7., 13., 15.]));
    }

    #[test]
    fn maxpool_rejects_indivisible() {
        assert!(matches!(
            maxpool(&Tensor::<f64>::zeros(&[1, 3, 4]), 2),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn upsample_replicates_blocks() {
        let out = upsample_nn(&t(&[1, 1, 1], &[2.5]), 2).unwrap();
        assert_eq!(out, t(&[1, 2, 2], &[2.5; 4]));
        let out = upsample_nn(&t(&[1, 2, 2], &[1., 2., 3., 4.]), 2).unwrap();
        let expect = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
        assert_eq!(out, t(&[1, 4, 4], &expect));
        let x = t(&[2, 2, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]);
        assert_eq!(upsample_nn(&x, 1).unwrap(), x);
    }

    #[test]
    fn dense_cases() {
        let x = Tensor::from_vec(vec![1.0, 1.0]);
        let out = dense(&x, &t(&[2, 2], &[1., 2., 3., 4.]), &Tensor::from_vec(vec![0.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[3.0, 8.0]);
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let x = Tensor::from_vec(vec![-0.5, 2.0]);
        assert_eq!(dense(&x, &eye, &Tensor::zeros(&[2])).unwrap().data(), x.data());
        let zero = Tensor::from_vec(vec![0.0, 0.0]);
        let b = Tensor::from_vec(vec![0.25, -3.0]);
        assert_eq!(dense(&zero, &eye, &b).unwrap().data(), b.data());
        assert!(dense(&Tensor::from_vec(vec![1.0; 3]), &eye, &b).is_err());
    }

    #[test]
    fn activations() {
        let r = activation(&Tensor::from_vec(vec![-1.0f64, 0.0, 2.0]), ActivationKind::Relu);
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(3.0f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let layer = Layer::<f64>::Upsample { factor: 2 };
        let (_, cache) = forward(&layer, &t(&[1, 1, 1], &[3.0])).unwrap();
        let (gi, gp) = backward(&layer, &cache, &Tensor::full(&[1, 2, 2], 1.0)).unwrap();
        assert_eq!(gi, t(&[1, 1, 1], &[4.0]));
        assert!(gp.is_empty());
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let layer = Layer::<f64>::MaxPool { window: 2 };
        let (_, cache) = forward(&layer, &t(&[1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        let (gi, _) = backward(&layer, &cache, &t(&[1, 1, 1], &[0.37])).unwrap();
        assert_eq!(gi, t(&[1, 2, 2], &[0., 0., 0., 0.37]));
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let pool = Layer::<f64>::MaxPool { window: 2 };
        let up = Layer::<f64>::Upsample { factor: 2 };
        let (_, cache) = forward(&up, &t(&[1, 1, 1], &[1.0])).unwrap();
        assert!(matches!(
            backward(&pool, &cache, &Tensor::zeros(&[1, 2, 2])),
            Err(Error::Contract(_))
        ));
        let relu = Layer::<f64>::Activation(ActivationKind::Relu);
        let (_, cache) = forward(&Layer::Activation(ActivationKind::Sigmoid), &t(&[1], &[1.0])).unwrap();
        assert!(matches!(backward(&relu, &cache, &t(&[1], &[1.0])), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_wrong_grad_shape() {
        let pool = Layer::<f64>::MaxPool { window: 2 };
        let (_, cache) = forward(&pool, &Tensor::zeros(&[1, 4, 4])).unwrap();
        assert!(matches!(
            backward(&pool, &cache, &Tensor::zeros(&[1, 4, 4])),
            Err(Error::Dimension(_))
        ));
    }
}
