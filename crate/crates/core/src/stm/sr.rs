use crate::error::{ensure, Result};
use crate::nn::{join, Conv2d, Init, LayerNorm, Linear, Module};
use crate::ops::AttnBias;
use crate::stm::check_heads;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Global attention with spatially reduced keys and values: a stride-`r`
/// `r×r` convolution followed by layer norm shrinks the key/value map by
/// `r` per side. `r = 1` attends to every token.
#[derive(Clone, Debug)]
pub struct SrAttention {
    pub q: Linear,
    pub kv: Linear,
    pub proj: Linear,
    pub reduce: Option<(Conv2d, LayerNorm)>,
    pub heads: usize,
    pub sr_ratio: usize,
}

impl SrAttention {
    pub fn new(init: &mut Init, c: usize, heads: usize, sr_ratio: usize) -> Result<Self> {
        check_heads(c, heads)?;
        ensure!(sr_ratio >= 1, "sr_ratio must be positive");
        let q = Linear::new(init, c, c);
        let kv = Linear::new(init, c, 2 * c);
        let proj = Linear::new(init, c, c);
        let reduce = (sr_ratio > 1).then(|| (Conv2d::new(init, c, c, sr_ratio, sr_ratio, 0), LayerNorm::new(c)));
        Ok(Self {
            q,
            kv,
            proj,
            reduce,
            heads,
            sr_ratio,
        })
    }

    pub fn channels(&self) -> usize {
        self.q.in_features()
    }

    /// Side lengths of the key/value map for an `h × w` input.
    pub fn reduced(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.sr_ratio, w / self.sr_ratio)
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &Var) -> Result<Var> {
        let [n, h, w, c] = x.value().dims4()?;
        ensure!(
            h % self.sr_ratio == 0 && w % self.sr_ratio == 0,
            "reduction ratio {} does not divide the {h}x{w} map",
            self.sr_ratio
        );
        let q = self.q.forward(tape, x)?;
        let q = tape.reshape(&q, &[n, h * w, c])?;
        let src = match &self.reduce {
            Some((conv, norm)) => {
                let r = conv.forward(tape, x)?;
                norm.forward(tape, &r)?
            }
            None => x.clone(),
        };
        let (hr, wr) = self.reduced(h, w);
        let kv = self.kv.forward(tape, &src)?;
        let kv = tape.reshape(&kv, &[n, hr * wr, 2 * c])?;
        let k = tape.slice_last(&kv, 0, c)?;
        let v = tape.slice_last(&kv, c, c)?;
        let out = tape.attention(&q, &k, &v, self.heads, &AttnBias::default())?;
        let out = tape.reshape(&out, &[n, h, w, c])?;
        self.proj.forward(tape, &out)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (hr, wr) = self.reduced(h, w);
        let (t, tr) = (h * w, hr * wr);
        let reduce = self.reduce.as_ref().map_or(0, |(conv, _)| conv.macs(h, w));
        self.q.macs(t) + reduce + self.kv.macs(tr) + self.proj.macs(t) + 2 * (t * tr * self.channels()) as u64
    }
}

impl Module for SrAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.q.visit(&join(prefix, "q"), f);
        self.kv.visit(&join(prefix, "kv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        if let Some((conv, norm)) = &self.reduce {
            conv.visit(&join(prefix, "sr"), f);
            norm.visit(&join(prefix, "sr_norm"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.kv.visit_mut(&join(prefix, "kv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        if let Some((conv, norm)) = &mut self.reduce {
            conv.visit_mut(&join(prefix, "sr"), f);
            norm.visit_mut(&join(prefix, "sr_norm"), f);
        }
    }
}
