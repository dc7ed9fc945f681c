//! Reverse-mode differentiation with respect to inputs.
//!
//! A [`Tape`] executes primitives eagerly and, while recording, keeps what
//! each one needs for its vector-Jacobian product. Model weights are borrowed
//! for the tape's lifetime and treated as constants: gradients flow only to
//! tensors registered with [`Tape::leaf`].
//!
//! An inference tape ([`Tape::inference`]) runs the same code path without
//! recording anything, so intermediate activations are freed as soon as the
//! last [`Var`] referencing them is dropped.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layout::{GatherMap, WindowAnchor};
use crate::ops::{
    self, attn_backward, attn_forward, deform_backward, deform_forward, AttnBias, AttnGeom, ConvOpts, DeformGeom,
    DwGeom,
};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// A value produced on a tape. Cloning is cheap.
#[derive(Clone, Debug)]
pub struct Var {
    value: Arc<Tensor>,
    node: Option<NodeId>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }

    pub fn into_tensor(self) -> Tensor {
        Arc::try_unwrap(self.value).unwrap_or_else(|shared| (*shared).clone())
    }
}

enum Op<'a> {
    Leaf,
    MatMul { a: Arc<Tensor>, b: Arc<Tensor> },
    Linear { weight: &'a Tensor },
    Add,
    Mul { a: Arc<Tensor>, b: Arc<Tensor> },
    Scale(f32),
    MulChannel { scale: &'a Tensor },
    Softmax { y: Arc<Tensor>, axis: usize },
    LayerNorm { x: Arc<Tensor>, gamma: &'a Tensor, eps: f32 },
    Gelu { x: Arc<Tensor> },
    DwConv { geom: DwGeom, kernel: &'a Tensor },
    Gather { map: GatherMap },
    Reshape,
    Attention { geom: AttnGeom, q: Arc<Tensor>, k: Arc<Tensor>, v: Arc<Tensor>, probs: Vec<f32> },
    Bilinear { shape: [usize; 4], points: Vec<(f32, f32)> },
    Deform { geom: DeformGeom, value: Arc<Tensor>, offset: Arc<Tensor>, mask: Arc<Tensor> },
    MeanTokens { tokens: usize },
}

struct Node<'a> {
    op: Op<'a>,
    parents: [Option<NodeId>; 3],
    shape: Vec<usize>,
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    recording: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let value = Arc::new(value);
        let node = self.recording.then(|| {
            self.nodes.push(Node {
                op: Op::Leaf,
                parents: [None; 3],
                shape: value.shape().to_vec(),
            });
            self.nodes.len() - 1
        });
        Var { value, node }
    }

    /// A value gradients never flow into.
    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            value: Arc::new(value),
            node: None,
        }
    }

    fn push(&mut self, value: Tensor, parents: &[&Var], op: impl FnOnce() -> Op<'a>) -> Var {
        let value = Arc::new(value);
        let mut ids = [None; 3];
        for (slot, p) in ids.iter_mut().zip(parents) {
            *slot = p.node;
        }
        let node = (self.recording && ids.iter().any(Option::is_some)).then(|| {
            self.nodes.push(Node {
                op: op(),
                parents: ids,
                shape: value.shape().to_vec(),
            });
            self.nodes.len() - 1
        });
        Var { value, node }
    }

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::matmul(&a.value, &b.value)?;
        let (sa, sb) = (a.value.clone(), b.value.clone());
        Ok(self.push(out, &[a, b], || Op::MatMul { a: sa, b: sb }))
    }

    /// Token-wise affine map over the last axis: `x[.., Cin] · W[Cin, Cout] + b`.
    /// A higher-rank weight is read as `[numel / Cout, Cout]`.
    pub fn linear(&mut self, x: &Var, weight: &'a Tensor, bias: Option<&'a Tensor>) -> Result<Var> {
        let (cin, cout) = weight_dims(weight)?;
        if x.value.last_dim() != cin {
            return Err(Error::shape("linear", format!("[.., {cin}]"), format!("{:?}", x.shape())));
        }
        let rows = x.value.numel() / cin;
        let mut data = ops::gemm(rows, cin, cout, x.value.data(), weight.data());
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape("linear bias", format!("[{cout}]"), format!("{:?}", b.shape())));
            }
            for row in data.chunks_mut(cout) {
                row.iter_mut().zip(b.data()).for_each(|(v, b)| *v += b);
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        Ok(self.push(Tensor::from_parts(shape, data), &[x], || Op::Linear { weight }))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = a.value.zip_map(&b.value, |x, y| x + y)?;
        Ok(self.push(out, &[a, b], || Op::Add))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = a.value.zip_map(&b.value, |x, y| x * y)?;
        let (sa, sb) = (a.value.clone(), b.value.clone());
        Ok(self.push(out, &[a, b], || Op::Mul { a: sa, b: sb }))
    }

    pub fn scale(&mut self, x: &Var, factor: f32) -> Var {
        let out = x.value.map(|v| v * factor);
        self.push(out, &[x], || Op::Scale(factor))
    }

    /// Multiplies every token by a per-channel vector (layer scale).
    pub fn mul_channel(&mut self, x: &Var, scale: &'a Tensor) -> Result<Var> {
        let c = x.value.last_dim();
        if scale.shape() != [c] {
            return Err(Error::shape("mul_channel", format!("[{c}]"), format!("{:?}", scale.shape())));
        }
        let mut data = x.value.data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(scale.data()).for_each(|(v, s)| *v *= s);
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(out, &[x], || Op::MulChannel { scale }))
    }

    pub fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        let y = Arc::new(ops::softmax(&x.value, axis)?);
        let saved = y.clone();
        let mut var = self.push((*y).clone(), &[x], || Op::Softmax { y: saved, axis });
        var.value = y;
        Ok(var)
    }

    pub fn layer_norm(&mut self, x: &Var, gamma: &'a Tensor, beta: &'a Tensor, eps: f32) -> Result<Var> {
        let out = ops::layer_norm(&x.value, gamma, beta, eps)?;
        let saved = x.value.clone();
        Ok(self.push(out, &[x], || Op::LayerNorm { x: saved, gamma, eps }))
    }

    pub fn gelu(&mut self, x: &Var) -> Var {
        let out = ops::gelu(&x.value);
        let saved = x.value.clone();
        self.push(out, &[x], || Op::Gelu { x: saved })
    }

    /// Depthwise correlation on an NCHW map; see [`ops::depthwise_conv2d`].
    pub fn depthwise_conv2d(
        &mut self,
        x: &Var,
        kernel: &'a Tensor,
        bias: Option<&'a Tensor>,
        opts: ConvOpts,
    ) -> Result<Var> {
        let geom = DwGeom::new(&x.value, kernel, opts)?;
        let out = ops::depthwise_conv2d(&x.value, kernel, bias, opts)?;
        Ok(self.push(out, &[x], || Op::DwConv { geom, kernel }))
    }

    pub fn gather(&mut self, x: &Var, map: GatherMap) -> Result<Var> {
        if x.shape() != map.src_shape() {
            return Err(Error::shape("gather", format!("{:?}", map.src_shape()), format!("{:?}", x.shape())));
        }
        let out = Tensor::from_parts(map.out_shape().to_vec(), map.apply(x.value.data()));
        Ok(self.push(out, &[x], || Op::Gather { map }))
    }

    pub fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let out = x.value.reshape(shape)?;
        Ok(self.push(out, &[x], || Op::Reshape))
    }

    pub fn permute(&mut self, x: &Var, perm: &[usize]) -> Result<Var> {
        let map = GatherMap::permute(x.shape(), perm)?;
        self.gather(x, map)
    }

    pub fn nchw_to_nhwc(&mut self, x: &Var) -> Result<Var> {
        let map = GatherMap::nchw_to_nhwc(x.value.dims4()?);
        self.gather(x, map)
    }

    pub fn nhwc_to_nchw(&mut self, x: &Var) -> Result<Var> {
        let map = GatherMap::nhwc_to_nchw(x.value.dims4()?);
        self.gather(x, map)
    }

    /// Zero-pads (or crops) a channels-last map at the bottom/right to
    /// `h × w`.
    pub fn pad_to(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        let shape = x.value.dims4()?;
        if shape[1] == h && shape[2] == w {
            return Ok(x.clone());
        }
        self.gather(x, GatherMap::reframe(shape, h, w, 0, 0))
    }

    /// Cyclic roll of a channels-last map such that output `(y, x)` reads
    /// input `(y + dy, x + dx)`.
    pub fn roll(&mut self, x: &Var, dy: isize, dx: isize) -> Result<Var> {
        let map = GatherMap::roll(x.value.dims4()?, dy, dx);
        self.gather(x, map)
    }

    pub fn window_partition(&mut self, x: &Var, b: usize) -> Result<Var> {
        let map = GatherMap::window_partition(x.value.dims4()?, b)?;
        self.gather(x, map)
    }

    /// Reassembles `[N·nWin, b·b, C]` windows into an `[N,H,W,C]` map.
    pub fn window_merge(&mut self, x: &Var, shape: [usize; 4], b: usize) -> Result<Var> {
        self.gather(x, GatherMap::window_merge(shape, b)?)
    }

    pub fn halo_windows(&mut self, x: &Var, b: usize, halo: usize, anchor: WindowAnchor) -> Result<Var> {
        let map = GatherMap::halo_windows(x.value.dims4()?, b, halo, anchor)?;
        self.gather(x, map)
    }

    pub fn im2col(&mut self, x: &Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let map = GatherMap::im2col(x.value.dims4()?, k, stride, pad)?;
        self.gather(x, map)
    }

    pub fn slice_last(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let map = GatherMap::slice_last(x.shape(), start, len)?;
        self.gather(x, map)
    }

    /// Multi-head attention core; see [`crate::stm::mha_core`].
    pub fn attention(&mut self, q: &Var, k: &Var, v: &Var, heads: usize, bias: &AttnBias) -> Result<Var> {
        let geom = AttnGeom::new(&q.value, &k.value, &v.value, heads, bias)?;
        let (out, probs) = attn_forward(&geom, q.value.data(), k.value.data(), v.value.data(), bias);
        let out = Tensor::from_parts(q.shape().to_vec(), out);
        let (sq, sk, sv) = (q.value.clone(), k.value.clone(), v.value.clone());
        Ok(self.push(out, &[q, k, v], || Op::Attention { geom, q: sq, k: sk, v: sv, probs }))
    }

    /// Bilinear sampling of an NCHW map at fixed points, `[N, C, P]`.
    pub fn bilinear_sample(&mut self, x: &Var, points: &[(f32, f32)]) -> Result<Var> {
        let out = ops::bilinear_sample(&x.value, points)?;
        let shape = x.value.dims4()?;
        let points = points.to_vec();
        Ok(self.push(out, &[x], || Op::Bilinear { shape, points }))
    }

    /// Deformable grouped sampling; see [`crate::ops::DCN_POINTS`] for the
    /// tensor layouts expected.
    pub fn deform_sample(
        &mut self,
        value: &Var,
        offset: &Var,
        mask: &Var,
        groups: usize,
        offset_scale: f32,
    ) -> Result<Var> {
        let geom = DeformGeom::new(&value.value, &offset.value, &mask.value, groups, offset_scale)?;
        let out = deform_forward(&geom, value.value.data(), offset.value.data(), mask.value.data());
        let (sv, so, sm) = (value.value.clone(), offset.value.clone(), mask.value.clone());
        Ok(self.push(out, &[value, offset, mask], || Op::Deform { geom, value: sv, offset: so, mask: sm }))
    }

    /// Mean over the middle axis of `[N, T, C]`, giving `[N, C]`.
    pub fn mean_tokens(&mut self, x: &Var) -> Result<Var> {
        x.value.expect_rank("mean_tokens", 3)?;
        let (n, t, c) = (x.value.dim(0), x.value.dim(1), x.value.dim(2));
        let mut out = Vec::with_capacity(n * c);
        let mut acc = vec![0.0f64; c];
        for b in 0..n {
            acc.fill(0.0);
            for tok in x.value.data()[b * t * c..(b + 1) * t * c].chunks(c) {
                acc.iter_mut().zip(tok).for_each(|(a, &v)| *a += v as f64);
            }
            out.extend(acc.iter().map(|&a| (a / t as f64) as f32));
        }
        Ok(self.push(Tensor::from_parts(vec![n, c], out), &[x], || Op::MeanTokens { tokens: t }))
    }

    /// Vector-Jacobian product: the gradient of `⟨seed, output⟩` with respect
    /// to each tensor in `wrt`.
    pub fn vjp(&self, output: &Var, seed: &Tensor, wrt: &[&Var]) -> Result<Vec<Tensor>> {
        if self.nodes.is_empty() {
            return Err(Error::Tape("gradient requested from an empty tape".into()));
        }
        let out_id = output
            .node
            .ok_or_else(|| Error::Tape("output was not recorded on this tape".into()))?;
        if seed.shape() != output.shape() {
            return Err(Error::shape("vjp seed", format!("{:?}", output.shape()), format!("{:?}", seed.shape())));
        }
        let mut targets = Vec::with_capacity(wrt.len());
        for v in wrt {
            match v.node {
                Some(id) if id < self.nodes.len() => targets.push(id),
                _ => return Err(Error::Tape("gradient requested for a tensor not on the tape".into())),
            }
        }
        let stop = targets.iter().copied().min().unwrap_or(out_id);
        let mut grads: Vec<Option<Tensor>> = (0..=out_id).map(|_| None).collect();
        grads[out_id] = Some(seed.clone());
        for id in (stop..=out_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let parent_grads = self.backward(node, &g)?;
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(p), Some(pg)) = (parent, pg) else { continue };
                accumulate(&mut grads[*p], pg);
            }
            grads[id] = Some(g);
        }
        Ok(targets
            .iter()
            .map(|&id| {
                grads[id]
                    .clone()
                    .unwrap_or_else(|| Tensor::from_parts(self.nodes[id].shape.clone(), vec![0.0; self.nodes[id].shape.iter().product()]))
            })
            .collect())
    }

    fn backward(&self, node: &Node<'a>, g: &Tensor) -> Result<[Option<Tensor>; 3]> {
        let shape_of = |p: usize| self.nodes[node.parents[p].expect("parent")].shape.clone();
        let want = |p: usize| node.parents[p].is_some();
        let grads = match &node.op {
            Op::Leaf => [None, None, None],
            Op::MatMul { a, b } => {
                let [m, k] = a.dims2()?;
                let n = b.dim(1);
                let ga = want(0).then(|| {
                    let bt = ops::transpose(k, n, b.data());
                    Tensor::from_parts(vec![m, k], ops::gemm(m, n, k, g.data(), &bt))
                });
                let gb = want(1).then(|| {
                    let at = ops::transpose(m, k, a.data());
                    Tensor::from_parts(vec![k, n], ops::gemm(k, m, n, &at, g.data()))
                });
                [ga, gb, None]
            }
            Op::Linear { weight } => {
                let (cin, cout) = weight_dims(weight)?;
                let wt = ops::transpose(cin, cout, weight.data());
                let rows = g.numel() / cout;
                [Some(Tensor::from_parts(shape_of(0), ops::gemm(rows, cout, cin, g.data(), &wt))), None, None]
            }
            Op::Add => [want(0).then(|| g.clone()), want(1).then(|| g.clone()), None],
            Op::Mul { a, b } => [
                want(0).then(|| g.zip_map(b, |x, y| x * y)).transpose()?,
                want(1).then(|| g.zip_map(a, |x, y| x * y)).transpose()?,
                None,
            ],
            Op::Scale(f) => [Some(g.map(|v| v * f)), None, None],
            Op::MulChannel { scale } => {
                let c = scale.numel();
                let mut data = g.data().to_vec();
                for row in data.chunks_mut(c) {
                    row.iter_mut().zip(scale.data()).for_each(|(v, s)| *v *= s);
                }
                [Some(Tensor::from_parts(g.shape().to_vec(), data)), None, None]
            }
            Op::Softmax { y, axis } => [Some(ops::softmax_backward(y, g, *axis)), None, None],
            Op::LayerNorm { x, gamma, eps } => [Some(ops::layer_norm_backward(x, gamma, *eps, g)), None, None],
            Op::Gelu { x } => [Some(g.zip_map(x, |gv, xv| gv * ops::gelu_grad_scalar(xv))?), None, None],
            Op::DwConv { geom, kernel } => [Some(ops::dw_backward_input(geom, kernel.data(), g.data())), None, None],
            Op::Gather { map } => [
                Some(Tensor::from_parts(map.src_shape().to_vec(), map.scatter_add(g.data()))),
                None,
                None,
            ],
            Op::Reshape => [Some(Tensor::from_parts(shape_of(0), g.data().to_vec())), None, None],
            Op::Attention { geom, q, k, v, probs } => {
                let (dq, dk, dv) = attn_backward(geom, q.data(), k.data(), v.data(), probs, g.data());
                [
                    want(0).then(|| Tensor::from_parts(q.shape().to_vec(), dq)),
                    want(1).then(|| Tensor::from_parts(k.shape().to_vec(), dk)),
                    want(2).then(|| Tensor::from_parts(v.shape().to_vec(), dv)),
                ]
            }
            Op::Bilinear { shape, points } => [Some(ops::bilinear_sample_backward(*shape, points, g.data())), None, None],
            Op::Deform { geom, value, offset, mask } => {
                let (dv, doff, dm) = deform_backward(geom, value.data(), offset.data(), mask.data(), g.data());
                [
                    want(0).then(|| Tensor::from_parts(value.shape().to_vec(), dv)),
                    want(1).then(|| Tensor::from_parts(offset.shape().to_vec(), doff)),
                    want(2).then(|| Tensor::from_parts(mask.shape().to_vec(), dm)),
                ]
            }
            Op::MeanTokens { tokens } => {
                let [n, c] = g.dims2()?;
                let mut data = vec![0.0f32; n * tokens * c];
                for (b, gb) in g.data().chunks(c).enumerate() {
                    for tok in data[b * tokens * c..(b + 1) * tokens * c].chunks_mut(c) {
                        tok.iter_mut().zip(gb).for_each(|(d, gv)| *d = gv / *tokens as f32);
                    }
                }
                [Some(Tensor::from_parts(vec![n, *tokens, c], data)), None, None]
            }
        };
        Ok(grads)
    }
}

fn weight_dims(weight: &Tensor) -> Result<(usize, usize)> {
    if weight.rank() < 2 {
        return Err(Error::shape("linear", "weight of rank >= 2", format!("{:?}", weight.shape())));
    }
    let cout = weight.last_dim();
    Ok((weight.numel() / cout, cout))
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3], |i| i as f32).unwrap());
        let y = tape.scale(&x, 2.0);
        let g = tape.vjp(&y, &Tensor::ones(&[3]).unwrap(), &[&x]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn error_paths() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::ones(&[2]).unwrap());
        assert!(matches!(tape.vjp(&c, &Tensor::ones(&[2]).unwrap(), &[]), Err(Error::Tape(_))));

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]).unwrap());
        let y = tape.scale(&x, 3.0);
        let stranger = tape.constant(Tensor::ones(&[2]).unwrap());
        assert!(tape.vjp(&y, &Tensor::ones(&[2]).unwrap(), &[&stranger]).is_err());
        assert!(tape.vjp(&y, &Tensor::ones(&[3]).unwrap(), &[&x]).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
        let y = tape.mul(&x, &x).unwrap();
        let z = tape.add(&y, &x).unwrap();
        let g = tape.vjp(&z, &Tensor::ones(&[2]).unwrap(), &[&x]).unwrap();
        assert_eq!(g[0].data(), &[4.0, -3.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::ones(&[4]).unwrap());
        let y = tape.gelu(&x);
        assert!(tape.is_empty());
        assert!(y.node().is_none());
    }
}
