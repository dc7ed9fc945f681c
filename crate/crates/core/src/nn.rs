//! Parameterized layers shared by the mixers and the backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::ops::{ConvOpts, PadMode, LAYER_NORM_EPS};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f32 = 0.02;

/// Named-parameter traversal in a fixed order; the order is the checkpoint
/// layout.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn num_params(&self) -> u64 {
        let mut n = 0u64;
        self.visit("", &mut |_, t| n += t.numel() as u64);
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Deterministic weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std) resampled outside ±2 std.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f32) -> Tensor {
        let normal = Normal::new(0.0f32, std).expect("positive std");
        let bound = 2.0 * std;
        Tensor::from_fn(shape, |_| loop {
            let v = normal.sample(&mut self.rng);
            if v.abs() <= bound {
                break v;
            }
        })
        .expect("valid shape")
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        use rand::Rng;
        Tensor::from_fn(shape, |_| self.rng.gen_range(lo..hi)).expect("valid shape")
    }
}

/// Overwrites every parameter of `module` with uniform draws from
/// `[-amplitude, amplitude)`; used to build test fixtures whose biases and
/// norms are not at their trivial initial values.
pub fn randomize(module: &mut dyn Module, seed: u64, amplitude: f32) {
    let mut init = Init::new(seed);
    module.visit_mut("", &mut |_, t| *t = init.uniform(t.shape(), -amplitude, amplitude));
}

pub(crate) fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).expect("valid shape")
}

pub(crate) fn full(shape: &[usize], v: f32) -> Tensor {
    Tensor::full(shape, v).expect("valid shape")
}

/// Token-wise projection, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(init: &mut Init, cin: usize, cout: usize) -> Self {
        Self {
            weight: init.trunc_normal(&[cin, cout], INIT_STD),
            bias: Some(zeros(&[cout])),
        }
    }

    pub fn zeroed(cin: usize, cout: usize) -> Self {
        Self {
            weight: zeros(&[cin, cout]),
            bias: Some(zeros(&[cout])),
        }
    }

    pub fn identity(c: usize) -> Self {
        Self {
            weight: Tensor::eye(c).expect("valid shape"),
            bias: Some(zeros(&[c])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &Var) -> Result<Var> {
        tape.linear(x, &self.weight, self.bias.as_ref())
    }

    /// Multiply-accumulates for `tokens` rows.
    pub fn macs(&self, tokens: usize) -> u64 {
        (tokens * self.in_features() * self.out_features()) as u64
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Layer normalization over channels, eps fixed at [`LAYER_NORM_EPS`].
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(c: usize) -> Self {
        Self {
            weight: full(&[c], 1.0),
            bias: zeros(&[c]),
        }
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &Var) -> Result<Var> {
        tape.layer_norm(x, &self.weight, &self.bias, LAYER_NORM_EPS)
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Dense convolution on channels-last maps, computed as im2col followed by a
/// projection. Weight layout `[k, k, in, out]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(init: &mut Init, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: init.trunc_normal(&[k, k, cin, cout], INIT_STD),
            bias: zeros(&[cout]),
            stride,
            pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(3)
    }

    pub fn out_extent(&self, h: usize) -> usize {
        (h + 2 * self.pad - self.kernel()) / self.stride + 1
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &Var) -> Result<Var> {
        let cols = tape.im2col(x, self.kernel(), self.stride, self.pad)?;
        tape.linear(&cols, &self.weight, Some(&self.bias))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let k = self.kernel();
        (self.out_extent(h) * self.out_extent(w) * k * k * self.weight.dim(2) * self.out_channels()) as u64
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Stride-1 "same" depthwise convolution on channels-last maps. Weight layout
/// `[C, k, k]`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub pad_mode: PadMode,
}

impl DepthwiseConv {
    pub fn new(init: &mut Init, c: usize, k: usize) -> Self {
        Self {
            weight: init.trunc_normal(&[c, k, k], INIT_STD),
            bias: zeros(&[c]),
            pad_mode: PadMode::Zero,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &Var) -> Result<Var> {
        let nchw = tape.nhwc_to_nchw(x)?;
        let opts = ConvOpts {
            mode: self.pad_mode,
            ..ConvOpts::default()
        };
        let y = tape.depthwise_conv2d(&nchw, &self.weight, Some(&self.bias), opts)?;
        tape.nchw_to_nhwc(&y)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (self.channels() * h * w * self.kernel() * self.kernel()) as u64
    }
}

impl Module for DepthwiseConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Runs `f` on an inference tape with an NCHW tensor converted to
/// channels-last, converting the result back.
pub(crate) fn run_nchw<'a>(
    x: &Tensor,
    f: impl FnOnce(&mut Tape<'a>, &Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let input = tape.constant(x.clone());
    let nhwc = tape.nchw_to_nhwc(&input)?;
    let out = f(&mut tape, &nhwc)?;
    Ok(tape.nhwc_to_nchw(&out)?.into_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_param_count() {
        let mut init = Init::new(0);
        assert_eq!(Linear::new(&mut init, 4, 8).num_params(), 40);
    }

    #[test]
    fn init_is_seeded_and_truncated() {
        let a = Init::new(7).trunc_normal(&[1000], INIT_STD);
        let b = Init::new(7).trunc_normal(&[1000], INIT_STD);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        assert_ne!(a, Init::new(8).trunc_normal(&[1000], INIT_STD));
    }

    #[test]
    fn conv_matches_depthwise_on_diagonal_weights() {
        let mut init = Init::new(3);
        let dw = DepthwiseConv::new(&mut init, 2, 3);
        let mut conv = Conv2d::new(&mut init, 2, 2, 3, 1, 1);
        conv.weight = Tensor::from_fn(&[3, 3, 2, 2], |i| {
            let (ky, kx, ci, co) = (i / 12, (i / 4) % 3, (i / 2) % 2, i % 2);
            if ci == co { dw.weight.at(&[ci, ky, kx]) } else { 0.0 }
        })
        .unwrap();
        let x = init.uniform(&[1, 5, 5, 2], -1.0, 1.0);
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let a = dw.forward(&mut tape, &xv).unwrap();
        let b = conv.forward(&mut tape, &xv).unwrap();
        assert!(a.value().max_abs_diff(b.value()).unwrap() < 1e-6);
    }
}
