use std::sync::Arc;

use crate::error::{ensure, Result};
use crate::nn::{join, Init, Linear, Module, INIT_STD};
use crate::ops::AttnBias;
use crate::stm::relpos::{relative_position_bias, table_side};
use crate::stm::{check_heads, padded, MASK_NEG};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Non-overlapping window attention; `shifted` blocks cyclically shift the
/// map by half a window first and mask pairs that were not adjacent before
/// the shift.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    /// `[(2·window-1)², heads]`.
    pub rel_pos: Tensor,
    pub heads: usize,
    pub window: usize,
    pub shifted: bool,
}

impl WindowAttention {
    pub fn new(init: &mut Init, c: usize, heads: usize, window: usize, shifted: bool) -> Result<Self> {
        check_heads(c, heads)?;
        ensure!(window >= 1, "attention window must be positive");
        let side = table_side(window, 0);
        Ok(Self {
            qkv: Linear::new(init, c, 3 * c),
            proj: Linear::new(init, c, c),
            rel_pos: init.trunc_normal(&[side * side, heads], INIT_STD),
            heads,
            window,
            shifted,
        })
    }

    pub fn channels(&self) -> usize {
        self.proj.in_features()
    }

    /// Window side and shift actually used on an `h × w` map. Maps no larger
    /// than the window get a single unshifted window.
    pub fn geometry(&self, h: usize, w: usize) -> (usize, usize) {
        let side = h.min(w);
        if side <= self.window {
            (side, 0)
        } else {
            (self.window, if self.shifted { self.window / 2 } else { 0 })
        }
    }

    pub fn bias(&self, b: usize) -> Result<Tensor> {
        relative_position_bias(&self.rel_pos, b, b, 0, self.window - 1)
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &Var) -> Result<Var> {
        let [n, h, w, c] = x.value().dims4()?;
        let (b, shift) = self.geometry(h, w);
        let (hp, wp) = (padded(h, b), padded(w, b));
        let qkv = self.qkv.forward(tape, x)?;
        let mut qkv = tape.pad_to(&qkv, hp, wp)?;
        if shift > 0 {
            qkv = tape.roll(&qkv, shift as isize, shift as isize)?;
        }
        let qkv = tape.window_partition(&qkv, b)?;
        let q = tape.slice_last(&qkv, 0, c)?;
        let k = tape.slice_last(&qkv, c, c)?;
        let v = tape.slice_last(&qkv, 2 * c, c)?;
        let bias = AttnBias {
            rel: Some(Arc::new(self.bias(b)?)),
            mask: (shift > 0).then(|| Arc::new(shifted_window_mask(hp, wp, b, shift))),
        };
        let out = tape.attention(&q, &k, &v, self.heads, &bias)?;
        let mut out = tape.window_merge(&out, [n, hp, wp, c], b)?;
        if shift > 0 {
            out = tape.roll(&out, -(shift as isize), -(shift as isize))?;
        }
        let out = tape.pad_to(&out, h, w)?;
        self.proj.forward(tape, &out)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (b, _) = self.geometry(h, w);
        let padded_tokens = (padded(h, b) * padded(w, b)) as u64;
        self.qkv.macs(h * w) + self.proj.macs(h * w) + 2 * padded_tokens * (b * b) as u64 * self.channels() as u64
    }
}

/// Attention mask `[nWin, b², b²]` for an `h × w` map rolled by `shift`:
/// zero where query and key come from the same pre-roll region, [`MASK_NEG`]
/// elsewhere. Windows are in raster order.
pub fn shifted_window_mask(h: usize, w: usize, b: usize, shift: usize) -> Tensor {
    let region = |p: usize, extent: usize| {
        if p < extent - b {
            0
        } else if p < extent - shift {
            1
        } else {
            2
        }
    };
    let (wy, wx) = (h / b, w / b);
    let t = b * b;
    let mut out = vec![0.0f32; wy * wx * t * t];
    for win in 0..wy * wx {
        let (oy, ox) = ((win / wx) * b, (win % wx) * b);
        let label = |i: usize| region(oy + i / b, h) * 3 + region(ox + i % b, w);
        let labels: Vec<usize> = (0..t).map(label).collect();
        for i in 0..t {
            for j in 0..t {
                if labels[i] != labels[j] {
                    out[(win * t + i) * t + j] = MASK_NEG;
                }
            }
        }
    }
    Tensor::from_parts(vec![wy * wx, t, t], out)
}

impl Module for WindowAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        f(&join(prefix, "rel_pos"), &self.rel_pos);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        f(&join(prefix, "rel_pos"), &mut self.rel_pos);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_is_symmetric_and_open_in_unwrapped_windows() {
        let m = shifted_window_mask(8, 8, 4, 2);
        assert_eq!(m.shape(), &[4, 16, 16]);
        assert!(m.data()[..256].iter().all(|&v| v == 0.0));
        for win in 0..4 {
            for i in 0..16 {
                assert_eq!(m.at(&[win, i, i]), 0.0);
                for j in 0..16 {
                    assert_eq!(m.at(&[win, i, j]), m.at(&[win, j, i]));
                }
            }
        }
        // the bottom-right window mixes four regions
        let open = m.data()[3 * 256..].iter().filter(|&&v| v == 0.0).count();
        assert_eq!(open, 4 * 16);
    }

    #[test]
    fn small_maps_use_one_unshifted_window() {
        let m = WindowAttention::new(&mut Init::new(0), 8, 2, 7, true).unwrap();
        assert_eq!(m.geometry(14, 14), (7, 3));
        assert_eq!(m.geometry(7, 7), (7, 0));
        assert_eq!(m.geometry(4, 6), (4, 0));
    }

    #[test]
    fn keeps_shape() {
        let mut init = Init::new(2);
        for shifted in [false, true] {
            let m = WindowAttention::new(&mut init, 8, 2, 4, shifted).unwrap();
            let x = init.uniform(&[1, 10, 9, 8], -1.0, 1.0);
            let mut tape = Tape::inference();
            let xv = tape.constant(x);
            assert_eq!(m.forward(&mut tape, &xv).unwrap().shape(), &[1, 10, 9, 8]);
        }
    }
}
