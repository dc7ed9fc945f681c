//! Brute-force double-precision reference implementations.
//!
//! Each function recomputes a layer straight from its definition with
//! nested loops over pixels, tokens and channels, sharing no kernels or
//! index maps with the optimized paths. Inputs and outputs are
//! channels-last `[N, H, W, C]` unless noted.

use crate::arch::{Block, Model, Stem};
use crate::error::{ensure, Result};
use crate::layout::WindowAnchor;
use crate::nn::{Conv2d, DepthwiseConv, LayerNorm, Linear};
use crate::ops::{PadMode, LAYER_NORM_EPS};
use crate::stm::{Dcnv3Mixer, DwConvMixer, HaloAttention, Mixer, SrAttention, WindowAttention};
use crate::tensor::Tensor;

/// Channels-last map in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c, data: vec![0.0; n * h * w * c] }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [n, h, w, c] = t.dims4()?;
        Ok(Self { n, h, w, c, data: t.data().iter().map(|&v| v as f64).collect() })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.n, self.h, self.w, self.c], self.data.iter().map(|&v| v as f32).collect())
            .expect("consistent map")
    }

    pub fn pixel(&self, b: usize, y: usize, x: usize) -> &[f64] {
        let o = ((b * self.h + y) * self.w + x) * self.c;
        &self.data[o..o + self.c]
    }

    pub fn pixel_mut(&mut self, b: usize, y: usize, x: usize) -> &mut [f64] {
        let o = ((b * self.h + y) * self.w + x) * self.c;
        &mut self.data[o..o + self.c]
    }

    /// Pixel at signed coordinates, `None` outside the map.
    pub fn get(&self, b: usize, y: isize, x: isize) -> Option<&[f64]> {
        (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w)
            .then(|| self.pixel(b, y as usize, x as usize))
    }

    fn map_pixels(&self, c_out: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let mut out = Self::zeros(self.n, self.h, self.w, c_out);
        for (src, dst) in self.data.chunks(self.c).zip(out.data.chunks_mut(c_out)) {
            dst.copy_from_slice(&f(src));
        }
        out
    }

    fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        out
    }

    fn scale_channels(&self, s: &Tensor) -> Self {
        self.map_pixels(self.c, |p| p.iter().zip(s.data()).map(|(v, &s)| v * s as f64).collect())
    }
}

fn w64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// `y_j = Σ_i x_i · W[i, j] + b_j`.
pub fn linear_token(x: &[f64], lin: &Linear) -> Vec<f64> {
    let (cin, cout) = (lin.in_features(), lin.out_features());
    let w = lin.weight.data();
    (0..cout)
        .map(|j| {
            let mut acc = lin.bias.as_ref().map_or(0.0, |b| b.data()[j] as f64);
            for i in 0..cin {
                acc += x[i] * w[i * cout + j] as f64;
            }
            acc
        })
        .collect()
}

pub fn linear(x: &Map, lin: &Linear) -> Map {
    x.map_pixels(lin.out_features(), |p| linear_token(p, lin))
}

pub fn layer_norm_token(x: &[f64], ln: &LayerNorm) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * ln.weight.data()[i] as f64 + ln.bias.data()[i] as f64)
        .collect()
}

pub fn layer_norm(x: &Map, ln: &LayerNorm) -> Map {
    x.map_pixels(x.c, |p| layer_norm_token(p, ln))
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

fn gelu_map(x: &Map) -> Map {
    x.map_pixels(x.c, |p| p.iter().map(|&v| gelu(v)).collect())
}

/// Softmax of a slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Multi-head attention of `q` rows over `k`/`v` rows with an optional
/// additive bias `bias(head, i, j)` and a visibility predicate.
pub fn attention(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    heads: usize,
    bias: &dyn Fn(usize, usize, usize) -> f64,
    visible: &dyn Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let c = v.first().map_or(0, |r| r.len());
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let mut out = vec![0.0; c];
            for h in 0..heads {
                let ch = h * d..(h + 1) * d;
                let logits: Vec<f64> = k
                    .iter()
                    .enumerate()
                    .map(|(j, kj)| {
                        if !visible(i, j) {
                            return f64::NEG_INFINITY;
                        }
                        let dot: f64 = ch.clone().map(|e| qi[e] * kj[e]).sum();
                        dot * scale + bias(h, i, j)
                    })
                    .collect();
                let p = softmax(&logits);
                for (j, vj) in v.iter().enumerate() {
                    for e in ch.clone() {
                        out[e] += p[j] * vj[e];
                    }
                }
            }
            out
        })
        .collect()
}

/// Plain multi-head attention on `[T, C]` tensors.
pub fn mha(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, bias: Option<&Tensor>) -> Result<Tensor> {
    let rows = |t: &Tensor| -> Vec<Vec<f64>> { t.data().chunks(t.last_dim()).map(|r| r.iter().map(|&v| v as f64).collect()).collect() };
    let (tq, tk) = (q.dim(0), k.dim(0));
    let b = |h: usize, i: usize, j: usize| bias.map_or(0.0, |b| b.data()[(h * tq + i) * tk + j] as f64);
    let out = attention(&rows(q), &rows(k), &rows(v), heads, &b, &|_, _| true);
    Tensor::new(&[tq, q.dim(1)], out.concat().iter().map(|&v| v as f32).collect())
}

fn rel_bias(table: &Tensor, heads: usize, h: usize, dy: isize, dx: isize, radius: usize) -> f64 {
    let side = (table.dim(0) as f64).sqrt() as usize;
    let (ry, rx) = ((dy + radius as isize) as usize, (dx + radius as isize) as usize);
    table.data()[(ry * side + rx) * heads + h] as f64
}

/// Halo attention evaluated block by block.
pub fn halo_attention(m: &HaloAttention, x: &Map) -> Map {
    let c = x.c;
    let b = m.block.min(x.h).min(x.w);
    let q = linear(x, &m.q);
    let kv = linear(x, &m.kv);
    let (origin, radius) = match m.anchor {
        WindowAnchor::Centered => (-(m.halo as isize), m.block - 1 + m.halo),
        WindowAnchor::TopLeft => (0, m.block - 1),
    };
    let side = b + 2 * m.halo;
    let mut out = Map::zeros(x.n, x.h, x.w, c);
    for img in 0..x.n {
        for by in 0..x.h.div_ceil(b) {
            for bx in 0..x.w.div_ceil(b) {
                let mut qs = Vec::new();
                let mut qpos = Vec::new();
                for y in by * b..((by + 1) * b).min(x.h) {
                    for xx in bx * b..((bx + 1) * b).min(x.w) {
                        qs.push(q.pixel(img, y, xx).to_vec());
                        qpos.push((y as isize, xx as isize));
                    }
                }
                let (mut ks, mut vs, mut kpos) = (Vec::new(), Vec::new(), Vec::new());
                for ky in 0..side {
                    for kx in 0..side {
                        let y = (by * b) as isize + origin + ky as isize;
                        let xx = (bx * b) as isize + origin + kx as isize;
                        let kvp = kv.get(img, y, xx).map_or(vec![0.0; 2 * c], |p| p.to_vec());
                        ks.push(kvp[..c].to_vec());
                        vs.push(kvp[c..].to_vec());
                        kpos.push((y, xx));
                    }
                }
                let bias = |h: usize, i: usize, j: usize| {
                    rel_bias(&m.rel_pos, m.heads, h, kpos[j].0 - qpos[i].0, kpos[j].1 - qpos[i].1, radius)
                };
                let att = attention(&qs, &ks, &vs, m.heads, &bias, &|_, _| true);
                for (row, &(y, xx)) in att.iter().zip(&qpos) {
                    out.pixel_mut(img, y as usize, xx as usize).copy_from_slice(&linear_token(row, &m.proj));
                }
            }
        }
    }
    out
}

/// (Shifted) window attention built from an explicitly rolled partition.
/// Tokens may attend to each other only if neither or both wrapped around
/// the same border when rolled.
pub fn window_attention(m: &WindowAttention, x: &Map) -> Map {
    let c = x.c;
    let (b, s) = if x.h.min(x.w) <= m.window {
        (x.h.min(x.w), 0)
    } else {
        (m.window, if m.shifted { m.window / 2 } else { 0 })
    };
    let (hp, wp) = (x.h.div_ceil(b) * b, x.w.div_ceil(b) * b);
    let qkv = linear(x, &m.qkv);
    let mut out = Map::zeros(x.n, x.h, x.w, c);
    for img in 0..x.n {
        for wy in 0..hp / b {
            for wx in 0..wp / b {
                // rolled position (y, x) holds original ((y + s) mod hp, (x + s) mod wp)
                let mut toks = Vec::new();
                for y in wy * b..(wy + 1) * b {
                    for xx in wx * b..(wx + 1) * b {
                        let (oy, ox) = ((y + s) % hp, (xx + s) % wp);
                        let wrapped = (y + s >= hp, xx + s >= wp);
                        toks.push((oy, ox, wrapped, y, xx));
                    }
                }
                let feat = |i: usize| -> Vec<f64> {
                    let (oy, ox, ..) = toks[i];
                    qkv.get(img, oy as isize, ox as isize).map_or(vec![0.0; 3 * c], |p| p.to_vec())
                };
                let all: Vec<Vec<f64>> = (0..toks.len()).map(feat).collect();
                let qs: Vec<Vec<f64>> = all.iter().map(|f| f[..c].to_vec()).collect();
                let ks: Vec<Vec<f64>> = all.iter().map(|f| f[c..2 * c].to_vec()).collect();
                let vs: Vec<Vec<f64>> = all.iter().map(|f| f[2 * c..].to_vec()).collect();
                let bias = |h: usize, i: usize, j: usize| {
                    let dy = toks[j].3 as isize - toks[i].3 as isize;
                    let dx = toks[j].4 as isize - toks[i].4 as isize;
                    rel_bias(&m.rel_pos, m.heads, h, dy, dx, m.window - 1)
                };
                let visible = |i: usize, j: usize| toks[i].2 == toks[j].2;
                let att = attention(&qs, &ks, &vs, m.heads, &bias, &visible);
                for (row, &(oy, ox, ..)) in att.iter().zip(&toks) {
                    if oy < x.h && ox < x.w {
                        out.pixel_mut(img, oy, ox).copy_from_slice(&linear_token(row, &m.proj));
                    }
                }
            }
        }
    }
    out
}

/// Dense convolution with zero padding, weight `[k, k, Cin, Cout]`.
pub fn conv2d(x: &Map, conv: &Conv2d) -> Map {
    let (k, s, p) = (conv.kernel(), conv.stride, conv.pad as isize);
    let cout = conv.out_channels();
    let (ho, wo) = (conv.out_extent(x.h), conv.out_extent(x.w));
    let w = w64(&conv.weight);
    let mut out = Map::zeros(x.n, ho, wo, cout);
    for img in 0..x.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc: Vec<f64> = conv.bias.data().iter().map(|&v| v as f64).collect();
                for ky in 0..k {
                    for kx in 0..k {
                        let y = (oy * s + ky) as isize - p;
                        let xx = (ox * s + kx) as isize - p;
                        if let Some(px) = x.get(img, y, xx) {
                            for (ci, &v) in px.iter().enumerate() {
                                let base = ((ky * k + kx) * x.c + ci) * cout;
                                for (co, a) in acc.iter_mut().enumerate() {
                                    *a += v * w[base + co];
                                }
                            }
                        }
                    }
                }
                out.pixel_mut(img, oy, ox).copy_from_slice(&acc);
            }
        }
    }
    out
}

/// Stride-1 "same" depthwise convolution, weight `[C, k, k]`.
pub fn depthwise(x: &Map, dw: &DepthwiseConv) -> Map {
    let k = dw.kernel();
    let r = (k / 2) as isize;
    let w = w64(&dw.weight);
    let mut out = Map::zeros(x.n, x.h, x.w, x.c);
    for img in 0..x.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                for ch in 0..x.c {
                    let mut acc = dw.bias.data()[ch] as f64;
                    for ky in 0..k {
                        for kx in 0..k {
                            let (mut sy, mut sx) = (y as isize + ky as isize - r, xx as isize + kx as isize - r);
                            if dw.pad_mode == PadMode::Cyclic {
                                sy = sy.rem_euclid(x.h as isize);
                                sx = sx.rem_euclid(x.w as isize);
                            }
                            if let Some(px) = x.get(img, sy, sx) {
                                acc += px[ch] * w[(ch * k + ky) * k + kx];
                            }
                        }
                    }
                    out.pixel_mut(img, y, xx)[ch] = acc;
                }
            }
        }
    }
    out
}

pub fn sr_attention(m: &SrAttention, x: &Map) -> Map {
    let c = x.c;
    let q = linear(x, &m.q);
    let src = match &m.reduce {
        Some((conv, norm)) => layer_norm(&conv2d(x, conv), norm),
        None => x.clone(),
    };
    let kv = linear(&src, &m.kv);
    let mut out = Map::zeros(x.n, x.h, x.w, c);
    for img in 0..x.n {
        let tokens = |m: &Map| -> Vec<Vec<f64>> {
            let per = m.h * m.w * m.c;
            m.data[img * per..(img + 1) * per].chunks(m.c).map(|p| p.to_vec()).collect()
        };
        let qs = tokens(&q);
        let kvs = tokens(&kv);
        let ks: Vec<Vec<f64>> = kvs.iter().map(|p| p[..c].to_vec()).collect();
        let vs: Vec<Vec<f64>> = kvs.iter().map(|p| p[c..].to_vec()).collect();
        let att = attention(&qs, &ks, &vs, m.heads, &|_, _, _| 0.0, &|_, _| true);
        for (t, row) in att.iter().enumerate() {
            out.pixel_mut(img, t / x.w, t % x.w).copy_from_slice(&linear_token(row, &m.proj));
        }
    }
    out
}

pub fn dwconv_mixer(m: &DwConvMixer, x: &Map) -> Map {
    let y = m.in_proj.as_ref().map_or_else(|| x.clone(), |p| linear(x, p));
    let y = depthwise(&y, &m.dw);
    m.out_proj.as_ref().map_or(y.clone(), |p| linear(&y, p))
}

fn bilinear(x: &Map, img: usize, y: f64, xx: f64, ch: usize) -> f64 {
    let (y0, x0) = (y.floor(), xx.floor());
    let (ly, lx) = (y - y0, xx - x0);
    let mut acc = 0.0;
    for (dy, wy) in [(0isize, 1.0 - ly), (1, ly)] {
        for (dx, wx) in [(0isize, 1.0 - lx), (1, lx)] {
            if let Some(p) = x.get(img, y0 as isize + dy, x0 as isize + dx) {
                acc += wy * wx * p[ch];
            }
        }
    }
    acc
}

/// DCNv3 evaluated pixel by pixel.
pub fn dcn_mixer(m: &Dcnv3Mixer, x: &Map) -> Map {
    let (c, g) = (x.c, m.groups);
    let gc = c / g;
    let value = linear(x, &m.input_proj);
    let gen = gelu_map(&layer_norm(&depthwise(x, &m.dw), &m.dw_norm));
    let offsets = linear(&gen, &m.offset);
    let logits = linear(&gen, &m.mask);
    let scale = m.offset_scale as f64;
    let mut out = Map::zeros(x.n, x.h, x.w, c);
    for img in 0..x.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                let off = offsets.pixel(img, y, xx);
                let lg = logits.pixel(img, y, xx);
                let mut acc = vec![0.0; c];
                for grp in 0..g {
                    let wts = softmax(&lg[grp * 9..(grp + 1) * 9]);
                    for k in 0..9 {
                        let o = (grp * 9 + k) * 2;
                        let sy = y as f64 + (k / 3) as f64 - 1.0 + off[o] * scale;
                        let sx = xx as f64 + (k % 3) as f64 - 1.0 + off[o + 1] * scale;
                        for ch in grp * gc..(grp + 1) * gc {
                            acc[ch] += wts[k] * bilinear(&value, img, sy, sx, ch);
                        }
                    }
                }
                out.pixel_mut(img, y, xx).copy_from_slice(&linear_token(&acc, &m.output_proj));
            }
        }
    }
    out
}

pub fn mixer(m: &Mixer, x: &Map) -> Map {
    match m {
        Mixer::Halo(m) => halo_attention(m, x),
        Mixer::Window(m) => window_attention(m, x),
        Mixer::Sr(m) => sr_attention(m, x),
        Mixer::DwConv(m) => dwconv_mixer(m, x),
        Mixer::Dcn(m) => dcn_mixer(m, x),
    }
}

/// Stem on a channels-last image batch.
pub fn stem(s: &Stem, x: &Map) -> Map {
    let y = gelu_map(&layer_norm(&conv2d(x, &s.conv1), &s.norm1));
    layer_norm(&conv2d(&y, &s.conv2), &s.norm2)
}

pub fn block(b: &Block, x: &Map) -> Map {
    let mlp = |y: &Map, m: &crate::arch::Mlp| linear(&gelu_map(&linear(y, &m.fc1)), &m.fc2);
    match b {
        Block::Transformer { norm1, mixer: mx, ls1, norm2, mlp: m, ls2 } => {
            let x = x.add(&mixer(mx, &layer_norm(x, norm1)).scale_channels(ls1));
            x.add(&mlp(&layer_norm(&x, norm2), m).scale_channels(ls2))
        }
        Block::ConvNext { mixer: mx, norm, mlp: m, ls } => {
            x.add(&mlp(&layer_norm(&mixer(mx, x), norm), m).scale_channels(ls))
        }
    }
}

/// Output of stage `last` for a channels-last image batch.
pub fn features(model: &Model, x: &Map, last: usize) -> Map {
    let mut y = stem(&model.stem, x);
    for stage in &model.stages[..=last] {
        if let Some(d) = &stage.downsample {
            y = layer_norm(&conv2d(&y, &d.conv), &d.norm);
        }
        for b in &stage.blocks {
            y = block(b, &y);
        }
        if let Some(n) = &stage.norm {
            y = layer_norm(&y, n);
        }
    }
    y
}

/// Maximum absolute difference between a tensor and a reference map.
pub fn max_deviation(got: &Tensor, want: &Map) -> Result<f64> {
    ensure!(got.shape() == [want.n, want.h, want.w, want.c], "shape {:?} vs reference", got.shape());
    Ok(got.data().iter().zip(&want.data).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max))
}
