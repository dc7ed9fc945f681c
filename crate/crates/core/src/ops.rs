//! Forward and backward kernels for the primitive operator set.
//!
//! Every reduction runs in a fixed left-to-right order per output element, so
//! results are bit-identical regardless of how rayon splits the outer loops.

mod attn;
mod deform;

pub use attn::AttnBias;
pub(crate) use attn::{attn_backward, attn_forward, AttnGeom};
pub use deform::DCN_POINTS;
pub(crate) use deform::{deform_backward, deform_forward, DeformGeom};

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Work size (in multiply-adds) below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 15;

/// `c[m×n] = a[m×k] · b[k×n]`, accumulating each row of `c` over `k` in
/// ascending order.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f32; m * n];
    let row = |(i, c_row): (usize, &mut [f32])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

pub(crate) fn transpose(rows: usize, cols: usize, a: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2()?;
    let [k2, n] = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{k}, _]"), format!("{:?}", b.shape())));
    }
    Ok(Tensor::from_parts(vec![m, n], gemm(m, k, n, a.data(), b.data())))
}

/// Splits `shape` around `axis` into `(outer, len, inner)` strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    ensure!(axis < x.rank(), "softmax axis {axis} out of range for rank {}", x.rank());
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax"));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let base = o * len * inner + j;
            let mut max = f32::NEG_INFINITY;
            for i in 0..len {
                max = max.max(src[base + i * inner]);
            }
            let mut denom = 0.0f32;
            for i in 0..len {
                let e = (src[base + i * inner] - max).exp();
                out[base + i * inner] = e;
                denom += e;
            }
            for i in 0..len {
                out[base + i * inner] /= denom;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Softmax over contiguous rows of length `len`, in place.
pub(crate) fn softmax_rows_inplace(data: &mut [f32], len: usize) {
    for row in data.chunks_mut(len) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
}

/// `dx = y ⊙ (g − Σ y·g)` along `axis`, given the softmax output `y`.
pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let y_shape = y.shape();
    let (outer, len, inner) = axis_split(y_shape, axis);
    let (y, g) = (y.data(), g.data());
    let mut out = vec![0.0f32; y.len()];
    for o in 0..outer {
        for j in 0..inner {
            let base = o * len * inner + j;
            let mut dot = 0.0f32;
            for i in 0..len {
                dot += y[base + i * inner] * g[base + i * inner];
            }
            for i in 0..len {
                let at = base + i * inner;
                out[at] = y[at] * (g[at] - dot);
            }
        }
    }
    Tensor::from_parts(y_shape.to_vec(), out)
}

pub const LAYER_NORM_EPS: f32 = 1e-6;

/// Layer normalization over the last axis (the channel axis of a
/// channels-last token tensor), followed by the affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let c = x.last_dim();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma/beta of shape [{c}]"),
            format!("{:?} / {:?}", gamma.shape(), beta.shape()),
        ));
    }
    ensure!(eps > 0.0, "layer_norm eps must be positive, got {eps}");
    let (gamma, beta) = (gamma.data(), beta.data());
    let mut out = vec![0.0f32; x.numel()];
    let row = |(src, dst): (&[f32], &mut [f32])| {
        let (mean, inv_std) = row_stats(src, eps);
        for ((d, &s), (&g, &b)) in dst.iter_mut().zip(src).zip(gamma.iter().zip(beta)) {
            *d = (s - mean) * inv_std * g + b;
        }
    };
    if x.numel() >= PAR_THRESHOLD {
        x.data().par_chunks(c).zip(out.par_chunks_mut(c)).for_each(row);
    } else {
        x.data().chunks(c).zip(out.chunks_mut(c)).for_each(row);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Two-pass mean and inverse standard deviation of one token.
fn row_stats(row: &[f32], eps: f32) -> (f32, f32) {
    let n = row.len() as f32;
    let mean = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn layer_norm_backward(x: &Tensor, gamma: &Tensor, eps: f32, g: &Tensor) -> Tensor {
    let c = x.last_dim();
    let gamma = gamma.data();
    let mut out = vec![0.0f32; x.numel()];
    let row = |((src, gr), dst): ((&[f32], &[f32]), &mut [f32])| {
        let (mean, inv_std) = row_stats(src, eps);
        let n = c as f32;
        let mut mean_gh = 0.0f32;
        let mut mean_gh_xh = 0.0f32;
        for i in 0..c {
            let xh = (src[i] - mean) * inv_std;
            let gh = gr[i] * gamma[i];
            mean_gh += gh;
            mean_gh_xh += gh * xh;
        }
        mean_gh /= n;
        mean_gh_xh /= n;
        for i in 0..c {
            let xh = (src[i] - mean) * inv_std;
            let gh = gr[i] * gamma[i];
            dst[i] = inv_std * (gh - mean_gh - xh * mean_gh_xh);
        }
    };
    x.data()
        .par_chunks(c)
        .zip(g.data().par_chunks(c))
        .zip(out.par_chunks_mut(c))
        .for_each(row);
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Exact GELU, `x·Φ(x)` with `Φ` written through `erf`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

#[inline]
pub(crate) fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

#[inline]
pub(crate) fn gelu_grad_scalar(x: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f32::consts::PI).sqrt();
    cdf + x * pdf
}

/// How a convolution reads pixels outside the input map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PadMode {
    #[default]
    Zero,
    /// Wrap around (torus topology); makes the conv exactly equivariant to
    /// cyclic shifts.
    Cyclic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    /// Defaults to `(k - 1) / 2` when `None`.
    pub pad: Option<usize>,
    pub mode: PadMode,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            pad: None,
            mode: PadMode::Zero,
        }
    }
}

/// Resolved geometry of a depthwise convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct DwGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
    pub ho: usize,
    pub wo: usize,
}

impl DwGeom {
    pub(crate) fn new(x: &Tensor, kernel: &Tensor, opts: ConvOpts) -> Result<Self> {
        let [n, c, h, w] = x.dims4()?;
        let k = match kernel.shape() {
            &[kc, kh, kw] if kc == c && kh == kw => kh,
            other => {
                return Err(Error::shape(
                    "depthwise_conv2d",
                    format!("kernel [{c}, k, k]"),
                    format!("{other:?}"),
                ))
            }
        };
        ensure!(k % 2 == 1, "depthwise_conv2d: kernel size must be odd, got {k}");
        ensure!(opts.stride >= 1, "depthwise_conv2d: stride must be >= 1");
        let pad = opts.pad.unwrap_or((k - 1) / 2);
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::invalid(format!(
                "depthwise_conv2d: kernel {k} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if opts.mode == PadMode::Cyclic {
            ensure!(pad <= h && pad <= w, "cyclic padding wider than the map");
        }
        let ho = (h + 2 * pad - k) / opts.stride + 1;
        let wo = (w + 2 * pad - k) / opts.stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            stride: opts.stride,
            pad,
            mode: opts.mode,
            ho,
            wo,
        })
    }

    /// Maps an output coordinate plus kernel tap to an input coordinate along
    /// one axis, or `None` when it lands in zero padding.
    #[inline]
    fn src(&self, o: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + tap) as isize - self.pad as isize;
        match self.mode {
            PadMode::Zero => (pos >= 0 && pos < extent as isize).then_some(pos as usize),
            PadMode::Cyclic => Some(pos.rem_euclid(extent as isize) as usize),
        }
    }
}

/// Per-channel spatial correlation (no kernel flip) on an NCHW map.
pub fn depthwise_conv2d(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    opts: ConvOpts,
) -> Result<Tensor> {
    let g = DwGeom::new(x, kernel, opts)?;
    if let Some(b) = bias {
        if b.shape() != [g.c] {
            return Err(Error::shape("depthwise_conv2d", format!("bias [{}]", g.c), format!("{:?}", b.shape())));
        }
    }
    Ok(dw_forward(&g, x.data(), kernel.data(), bias.map(|b| b.data())))
}

pub(crate) fn dw_forward(g: &DwGeom, x: &[f32], kernel: &[f32], bias: Option<&[f32]>) -> Tensor {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![0.0f32; g.n * g.c * plane_out];
    let plane = |(nc, dst): (usize, &mut [f32])| {
        let ch = nc % g.c;
        let src = &x[nc * plane_in..(nc + 1) * plane_in];
        let ker = &kernel[ch * g.k * g.k..(ch + 1) * g.k * g.k];
        let b = bias.map_or(0.0, |b| b[ch]);
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = 0.0f32;
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        acc += src[iy * g.w + ix] * ker[ky * g.k + kx];
                    }
                }
                dst[oy * g.wo + ox] = acc + b;
            }
        }
    };
    if out.len() * g.k * g.k >= PAR_THRESHOLD {
        out.par_chunks_mut(plane_out).enumerate().for_each(plane);
    } else {
        out.chunks_mut(plane_out).enumerate().for_each(plane);
    }
    Tensor::from_parts(vec![g.n, g.c, g.ho, g.wo], out)
}

/// Gradient of [`depthwise_conv2d`] with respect to its input.
pub(crate) fn dw_backward_input(g: &DwGeom, kernel: &[f32], grad: &[f32]) -> Tensor {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![0.0f32; g.n * g.c * plane_in];
    out.par_chunks_mut(plane_in).enumerate().for_each(|(nc, dst)| {
        let ch = nc % g.c;
        let gr = &grad[nc * plane_out..(nc + 1) * plane_out];
        let ker = &kernel[ch * g.k * g.k..(ch + 1) * g.k * g.k];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let go = gr[oy * g.wo + ox];
                if go == 0.0 {
                    continue;
                }
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        dst[iy * g.w + ix] += go * ker[ky * g.k + kx];
                    }
                }
            }
        }
    });
    Tensor::from_parts(vec![g.n, g.c, g.h, g.w], out)
}

/// One bilinear tap: flat pixel offset within a plane, interpolation weight,
/// and the weight's partial derivatives with respect to the sample's y and x.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub index: usize,
    pub weight: f32,
    pub dy: f32,
    pub dx: f32,
}

/// The (up to four) in-bounds neighbours of a real-valued sample location.
/// Neighbours outside the map are dropped, which is zero padding.
pub(crate) fn bilinear_taps(y: f32, x: f32, h: usize, w: usize) -> impl Iterator<Item = Tap> {
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (y0, x0) = (y0 as i64, x0 as i64);
    let corners = [
        (y0, x0, (1.0 - ly) * (1.0 - lx), -(1.0 - lx), -(1.0 - ly)),
        (y0, x0 + 1, (1.0 - ly) * lx, -lx, 1.0 - ly),
        (y0 + 1, x0, ly * (1.0 - lx), 1.0 - lx, -ly),
        (y0 + 1, x0 + 1, ly * lx, lx, ly),
    ];
    corners.into_iter().filter_map(move |(cy, cx, weight, dy, dx)| {
        (cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w).then(|| Tap {
            index: cy as usize * w + cx as usize,
            weight,
            dy,
            dx,
        })
    })
}

/// Samples every channel of an NCHW map at the given `(y, x)` pixel
/// coordinates; returns `[N, C, P]`. Locations outside the map read zeros.
pub fn bilinear_sample(x: &Tensor, points: &[(f32, f32)]) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    ensure!(!points.is_empty(), "bilinear_sample: no sample points");
    if points.iter().any(|(py, px)| !py.is_finite() || !px.is_finite()) {
        return Err(Error::NonFinite("bilinear_sample"));
    }
    let taps: Vec<Vec<Tap>> = points
        .iter()
        .map(|&(py, px)| bilinear_taps(py, px, h, w).collect())
        .collect();
    let mut out = Vec::with_capacity(n * c * points.len());
    for plane in x.data().chunks(h * w) {
        for pt in &taps {
            out.push(pt.iter().map(|t| t.weight * plane[t.index]).sum());
        }
    }
    Ok(Tensor::from_parts(vec![n, c, points.len()], out))
}

pub(crate) fn bilinear_sample_backward(
    shape: [usize; 4],
    points: &[(f32, f32)],
    grad: &[f32],
) -> Tensor {
    let [n, c, h, w] = shape;
    let p = points.len();
    let mut out = vec![0.0f32; n * c * h * w];
    for (plane, g) in out.chunks_mut(h * w).zip(grad.chunks(p)) {
        for (&(py, px), &gp) in points.iter().zip(g) {
            for t in bilinear_taps(py, px, h, w) {
                plane[t.index] += t.weight * gp;
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}
