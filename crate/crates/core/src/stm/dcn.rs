use crate::error::{ensure, Result};
use crate::nn::{join, DepthwiseConv, Init, LayerNorm, Linear, Module};
use crate::ops::DCN_POINTS;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Grouped deformable sampling: per pixel and group, nine points on a 3×3
/// grid are displaced by predicted offsets and combined with weights that
/// are softmax-normalized over the nine points.
#[derive(Clone, Debug)]
pub struct Dcnv3Mixer {
    pub input_proj: Linear,
    /// Offset/mask generator trunk: depthwise 3×3, layer norm, GELU.
    pub dw: DepthwiseConv,
    pub dw_norm: LayerNorm,
    /// `[C, G·9·2]`, zero-initialized so sampling starts on the regular grid.
    pub offset: Linear,
    /// `[C, G·9]`.
    pub mask: Linear,
    pub output_proj: Linear,
    pub groups: usize,
    pub offset_scale: f32,
}

impl Dcnv3Mixer {
    pub fn new(init: &mut Init, c: usize, groups: usize, offset_scale: f32) -> Result<Self> {
        ensure!(groups >= 1 && c % groups == 0, "{c} channels not divisible by {groups} groups");
        Ok(Self {
            input_proj: Linear::new(init, c, c),
            dw: DepthwiseConv::new(init, c, 3),
            dw_norm: LayerNorm::new(c),
            offset: Linear::zeroed(c, groups * DCN_POINTS * 2),
            mask: Linear::new(init, c, groups * DCN_POINTS),
            output_proj: Linear::new(init, c, c),
            groups,
            offset_scale,
        })
    }

    pub fn channels(&self) -> usize {
        self.input_proj.in_features()
    }

    /// Offsets `[N,H,W,G·9·2]` and softmax-normalized modulation weights
    /// `[N,H,W,G,9]` predicted from `x`.
    pub fn generate<'a>(&'a self, tape: &mut Tape<'a>, x: &Var) -> Result<(Var, Var)> {
        let [n, h, w, _] = x.value().dims4()?;
        let g = self.dw.forward(tape, x)?;
        let g = self.dw_norm.forward(tape, &g)?;
        let g = tape.gelu(&g);
        let offset = self.offset.forward(tape, &g)?;
        let logits = self.mask.forward(tape, &g)?;
        let logits = tape.reshape(&logits, &[n, h, w, self.groups, DCN_POINTS])?;
        Ok((offset, tape.softmax(&logits, 4)?))
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &Var) -> Result<Var> {
        let [n, h, w, _] = x.value().dims4()?;
        let value = self.input_proj.forward(tape, x)?;
        let (offset, mask) = self.generate(tape, x)?;
        let mask = tape.reshape(&mask, &[n, h, w, self.groups * DCN_POINTS])?;
        let out = tape.deform_sample(&value, &offset, &mask, self.groups, self.offset_scale)?;
        self.output_proj.forward(tape, &out)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let t = h * w;
        let c = self.channels() as u64;
        self.input_proj.macs(t)
            + self.dw.macs(h, w)
            + self.offset.macs(t)
            + self.mask.macs(t)
            + DCN_POINTS as u64 * t as u64 * c
            + self.output_proj.macs(t)
    }
}

impl Module for Dcnv3Mixer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.input_proj.visit(&join(prefix, "input_proj"), f);
        self.dw.visit(&join(prefix, "dw"), f);
        self.dw_norm.visit(&join(prefix, "dw_norm"), f);
        self.offset.visit(&join(prefix, "offset"), f);
        self.mask.visit(&join(prefix, "mask"), f);
        self.output_proj.visit(&join(prefix, "output_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.input_proj.visit_mut(&join(prefix, "input_proj"), f);
        self.dw.visit_mut(&join(prefix, "dw"), f);
        self.dw_norm.visit_mut(&join(prefix, "dw_norm"), f);
        self.offset.visit_mut(&join(prefix, "offset"), f);
        self.mask.visit_mut(&join(prefix, "mask"), f);
        self.output_proj.visit_mut(&join(prefix, "output_proj"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let m = Dcnv3Mixer::new(&mut Init::new(0), 32, 2, 1.0).unwrap();
        let c = 32u64;
        let expected = 2 * (c * c + c) + 9 * c + c + 2 * c + (c * 36 + 36) + (c * 18 + 18);
        assert_eq!(m.num_params(), expected);
        assert_eq!(m.macs(4, 4), 16 * (2 * c * c + 9 * c + 54 * c + 9 * c));
    }

    #[test]
    fn zero_offsets_sample_the_grid() {
        let mut init = Init::new(4);
        let m = Dcnv3Mixer::new(&mut init, 16, 1, 1.0).unwrap();
        let x = init.uniform(&[1, 5, 6, 16], -1.0, 1.0);
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let y = m.forward(&mut tape, &xv).unwrap();
        assert_eq!(y.shape(), &[1, 5, 6, 16]);
        assert!(y.value().is_finite());
    }
}
