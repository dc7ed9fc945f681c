//! Effective receptive fields: input-gradient magnitude maps of a central
//! feature and the ERF@50 summary ratio.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::arch::Model;
use crate::error::{ensure, Error, Result};
use crate::nn::{DepthwiseConv, Init};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Anything exposing differentiable stage features of an NCHW input.
pub trait FeatureProbe: Sync {
    fn input_channels(&self) -> usize;

    fn num_stages(&self) -> usize;

    /// Channels-last output of stage `stage` for the NCHW input `x`.
    fn stage_output<'a>(&'a self, tape: &mut Tape<'a>, x: &Var, stage: usize) -> Result<Var>;
}

impl FeatureProbe for Model {
    fn input_channels(&self) -> usize {
        3
    }

    fn num_stages(&self) -> usize {
        4
    }

    fn stage_output<'a>(&'a self, tape: &mut Tape<'a>, x: &Var, stage: usize) -> Result<Var> {
        let [_, _, h, w] = x.value().dims4()?;
        ensure!(h % 32 == 0 && w % 32 == 0, "input {h}x{w} not divisible by 32");
        let mut feats = self.features_on_tape(tape, x, stage)?;
        Ok(feats.pop().expect("at least one stage"))
    }
}

/// A stack of stride-1 depthwise convolutions; stage `s` is the output of
/// the first `s + 1` layers. Serves as an analytically tractable probe.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<DepthwiseConv>,
}

impl ConvStack {
    /// `layers` all-ones `k×k` kernels over `channels` channels.
    pub fn ones(channels: usize, kernels: &[usize]) -> Self {
        let mut init = Init::new(0);
        let layers = kernels
            .iter()
            .map(|&k| {
                let mut l = DepthwiseConv::new(&mut init, channels, k);
                l.weight = Tensor::full(&[channels, k, k], 1.0).expect("valid shape");
                l
            })
            .collect();
        Self { layers }
    }

    /// Truncated-normal kernels drawn from `seed`.
    pub fn random(channels: usize, kernels: &[usize], seed: u64) -> Self {
        let mut init = Init::new(seed);
        let layers = kernels.iter().map(|&k| DepthwiseConv::new(&mut init, channels, k)).collect();
        Self { layers }
    }

    /// Side of the theoretical receptive field of stage `stage`.
    pub fn receptive_field(&self, stage: usize) -> usize {
        1 + self.layers[..=stage].iter().map(|l| l.kernel() - 1).sum::<usize>()
    }
}

impl FeatureProbe for ConvStack {
    fn input_channels(&self) -> usize {
        self.layers.first().map_or(1, |l| l.channels())
    }

    fn num_stages(&self) -> usize {
        self.layers.len()
    }

    fn stage_output<'a>(&'a self, tape: &mut Tape<'a>, x: &Var, stage: usize) -> Result<Var> {
        ensure!(stage < self.layers.len(), "stage {stage} out of range 0..{}", self.layers.len());
        let mut y = tape.nchw_to_nhwc(x)?;
        for layer in &self.layers[..=stage] {
            y = layer.forward(tape, &y)?;
        }
        Ok(y)
    }
}

/// `map(y, x) = Σ_c |∂ objective / ∂ input(c, y, x)|` where the objective is
/// the channel sum of stage `stage`'s feature at its central location
/// `(⌊Hs/2⌋, ⌊Ws/2⌋)`. `image` is `[C, H, W]` or `[1, C, H, W]`.
pub fn gradient_map(probe: &dyn FeatureProbe, image: &Tensor, stage: usize) -> Result<Tensor> {
    ensure!(stage < probe.num_stages(), "stage {stage} out of range 0..{}", probe.num_stages());
    let image = as_batch(image)?;
    let [_, c, h, w] = image.dims4()?;
    ensure!(c == probe.input_channels(), "probe expects {} channels, image has {c}", probe.input_channels());
    let mut tape = Tape::new();
    let x = tape.leaf(image);
    let feat = probe.stage_output(&mut tape, &x, stage)?;
    let [n, hs, ws, cs] = feat.value().dims4()?;
    let mut seed = vec![0.0f32; n * hs * ws * cs];
    let at = ((hs / 2) * ws + ws / 2) * cs;
    seed[at..at + cs].fill(1.0);
    let seed = Tensor::new(&[n, hs, ws, cs], seed)?;
    let grad = tape.vjp(&feat, &seed, &[&x])?.pop().expect("one gradient");
    let g = grad.data();
    let mut map = vec![0.0f32; h * w];
    for ch in 0..c {
        for (m, v) in map.iter_mut().zip(&g[ch * h * w..(ch + 1) * h * w]) {
            *m += v.abs();
        }
    }
    Tensor::new(&[h, w], map)
}

fn as_batch(image: &Tensor) -> Result<Tensor> {
    match image.rank() {
        3 => image.reshape(&[1, image.dim(0), image.dim(1), image.dim(2)]),
        4 if image.dim(0) == 1 => Ok(image.clone()),
        _ => Err(Error::shape("gradient_map", "[C, H, W] or [1, C, H, W]", format!("{:?}", image.shape()))),
    }
}

/// Smallest odd side `r` of a square window centred at `(⌊H/2⌋, ⌊W/2⌋)`
/// holding at least half of the map's mass, divided by the input side
/// (`max(H, W)`); capped at 1.
pub fn erf_at_50(map: &Tensor) -> Result<f64> {
    let [h, w] = map.dims2()?;
    ensure!(map.data().iter().all(|v| v.is_finite() && *v >= 0.0), "ERF map must be finite and non-negative");
    // integral image in f64
    let mut integral = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0f64;
        for x in 0..w {
            row += map.data()[y * w + x] as f64;
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let total = integral[(h + 1) * (w + 1) - 1];
    if total <= 0.0 {
        return Err(Error::invalid("ERF map has zero mass"));
    }
    let (cy, cx) = (h / 2, w / 2);
    let side = h.max(w);
    let mut r = 1usize;
    loop {
        let half = r / 2;
        let (y0, y1) = (cy.saturating_sub(half), (cy + half + 1).min(h));
        let (x0, x1) = (cx.saturating_sub(half), (cx + half + 1).min(w));
        let mass = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
            + integral[y0 * (w + 1) + x0];
        if 2.0 * mass >= total || r >= side {
            return Ok((r.min(side)) as f64 / side as f64);
        }
        r += 2;
    }
}

/// ERF of one stage averaged over a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct ErfReport {
    pub stage: usize,
    /// Mean magnitude map normalized to unit sum.
    pub map: Tensor,
    /// Mean magnitude map before normalization.
    pub raw: Tensor,
    pub erf50: f64,
    pub n_images: usize,
}

/// Per-stage ERF reports; magnitude maps are averaged over `images` (in
/// order) before normalization.
pub fn erf_suite(probe: &dyn FeatureProbe, images: &[Tensor], stages: &[usize]) -> Result<Vec<ErfReport>> {
    ensure!(!images.is_empty(), "ERF suite needs at least one image");
    stages
        .iter()
        .map(|&stage| {
            let maps = images
                .par_iter()
                .map(|img| gradient_map(probe, img, stage))
                .collect::<Result<Vec<_>>>()?;
            let shape = maps[0].shape().to_vec();
            ensure!(maps.iter().all(|m| m.shape() == shape), "ERF images must share one size");
            let mut acc = vec![0.0f64; maps[0].numel()];
            for m in &maps {
                acc.iter_mut().zip(m.data()).for_each(|(a, &v)| *a += v as f64);
            }
            let n = maps.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            let total: f64 = acc.iter().sum();
            if total <= 0.0 {
                return Err(Error::invalid(format!("stage {stage}: gradient map has zero mass")));
            }
            let raw = Tensor::new(&shape, acc.iter().map(|&v| v as f32).collect())?;
            let map = Tensor::new(&shape, acc.iter().map(|&v| (v / total) as f32).collect())?;
            let erf50 = erf_at_50(&map)?;
            Ok(ErfReport {
                stage,
                map,
                raw,
                erf50,
                n_images: images.len(),
            })
        })
        .collect()
}

/// CSV with columns `stage,erf50,n_images`.
pub fn reports_to_csv(reports: &[ErfReport]) -> String {
    let mut out = String::from("stage,erf50,n_images\n");
    for r in reports {
        let _ = writeln!(out, "{},{:.6},{}", r.stage, r.erf50, r.n_images);
    }
    out
}

/// Seeded uniform-noise probe images `[3, size, size]` in `[-1, 1)`.
pub fn noise_images(count: usize, channels: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut init = Init::new(seed);
    (0..count).map(|_| init.uniform(&[channels, size, size], -1.0, 1.0)).collect()
}
