use std::sync::Arc;

use crate::error::Result;
use crate::layout::WindowAnchor;
use crate::nn::{join, Init, Linear, Module, INIT_STD};
use crate::ops::AttnBias;
use crate::stm::relpos::{relative_position_bias, table_side};
use crate::stm::{check_heads, padded};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Blocked local self-attention with a halo: queries from each `b×b` block
/// attend to the `(b+2·halo)²` window around it. Keys and values outside the
/// map are zero vectors.
#[derive(Clone, Debug)]
pub struct HaloAttention {
    pub q: Linear,
    pub kv: Linear,
    pub proj: Linear,
    /// `[side², heads]` with `side = 2(b+halo)-1`.
    pub rel_pos: Tensor,
    pub heads: usize,
    pub block: usize,
    pub halo: usize,
    pub anchor: WindowAnchor,
}

impl HaloAttention {
    pub fn new(init: &mut Init, c: usize, heads: usize, block: usize, halo: usize, anchor: WindowAnchor) -> Result<Self> {
        check_heads(c, heads)?;
        crate::error::ensure!(block >= 1, "halo attention block must be positive");
        let side = table_side(block, halo);
        Ok(Self {
            q: Linear::new(init, c, c),
            kv: Linear::new(init, c, 2 * c),
            proj: Linear::new(init, c, c),
            rel_pos: init.trunc_normal(&[side * side, heads], INIT_STD),
            heads,
            block,
            halo,
            anchor,
        })
    }

    pub fn channels(&self) -> usize {
        self.q.in_features()
    }

    /// Block side actually used on an `h × w` map.
    pub fn effective_block(&self, h: usize, w: usize) -> usize {
        self.block.min(h).min(w)
    }

    fn key_origin(&self) -> isize {
        match self.anchor {
            WindowAnchor::Centered => -(self.halo as isize),
            WindowAnchor::TopLeft => 0,
        }
    }

    /// Dense `[heads, b², (b+2·halo)²]` bias for block side `b`.
    pub fn bias(&self, b: usize) -> Result<Tensor> {
        let radius = match self.anchor {
            WindowAnchor::Centered => self.block - 1 + self.halo,
            WindowAnchor::TopLeft => self.block - 1,
        };
        relative_position_bias(&self.rel_pos, b, b + 2 * self.halo, self.key_origin(), radius)
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &Var) -> Result<Var> {
        let [n, h, w, c] = x.value().dims4()?;
        let b = self.effective_block(h, w);
        let (hp, wp) = (padded(h, b), padded(w, b));
        let q = self.q.forward(tape, x)?;
        let q = tape.pad_to(&q, hp, wp)?;
        let q = tape.window_partition(&q, b)?;
        let kv = self.kv.forward(tape, x)?;
        let kv = tape.pad_to(&kv, hp, wp)?;
        let kv = tape.halo_windows(&kv, b, self.halo, self.anchor)?;
        let k = tape.slice_last(&kv, 0, c)?;
        let v = tape.slice_last(&kv, c, c)?;
        let bias = AttnBias {
            rel: Some(Arc::new(self.bias(b)?)),
            mask: None,
        };
        let out = tape.attention(&q, &k, &v, self.heads, &bias)?;
        let out = tape.window_merge(&out, [n, hp, wp, c], b)?;
        let out = tape.pad_to(&out, h, w)?;
        self.proj.forward(tape, &out)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let b = self.effective_block(h, w);
        let tokens = h * w;
        let padded_tokens = (padded(h, b) * padded(w, b)) as u64;
        let keys = ((b + 2 * self.halo) * (b + 2 * self.halo)) as u64;
        self.q.macs(tokens) + self.kv.macs(tokens) + self.proj.macs(tokens)
            + 2 * padded_tokens * keys * self.channels() as u64
    }
}

impl Module for HaloAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.q.visit(&join(prefix, "q"), f);
        self.kv.visit(&join(prefix, "kv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        f(&join(prefix, "rel_pos"), &self.rel_pos);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.kv.visit_mut(&join(prefix, "kv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        f(&join(prefix, "rel_pos"), &mut self.rel_pos);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_shape_on_untiled_maps() {
        let mut init = Init::new(1);
        let m = HaloAttention::new(&mut init, 8, 2, 4, 1, WindowAnchor::Centered).unwrap();
        for (h, w) in [(8, 8), (5, 7), (3, 2)] {
            let x = init.uniform(&[2, h, w, 8], -1.0, 1.0);
            let mut tape = Tape::inference();
            let xv = tape.constant(x);
            assert_eq!(m.forward(&mut tape, &xv).unwrap().shape(), &[2, h, w, 8]);
        }
    }

    #[test]
    fn param_count() {
        let m = HaloAttention::new(&mut Init::new(0), 8, 2, 7, 3, WindowAnchor::Centered).unwrap();
        assert_eq!(m.num_params(), 4 * 64 + 4 * 8 + 19 * 19 * 2);
    }

    #[test]
    fn zero_halo_macs_match_block_attention() {
        let m = HaloAttention::new(&mut Init::new(0), 8, 2, 4, 0, WindowAnchor::Centered).unwrap();
        assert_eq!(m.macs(8, 8), 64 * 4 * 64 + 2 * 64 * 16 * 8);
    }
}
