use crate::error::Result;
use crate::nn::{join, DepthwiseConv, Init, Linear, Module};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Depthwise-convolution mixer, optionally wrapped in input/output
/// projections.
#[derive(Clone, Debug)]
pub struct DwConvMixer {
    pub in_proj: Option<Linear>,
    pub dw: DepthwiseConv,
    pub out_proj: Option<Linear>,
}

impl DwConvMixer {
    pub fn new(init: &mut Init, c: usize, kernel: usize, projections: bool) -> Result<Self> {
        crate::error::ensure!(kernel % 2 == 1, "depthwise kernel must be odd, got {kernel}");
        let in_proj = projections.then(|| Linear::new(init, c, c));
        let dw = DepthwiseConv::new(init, c, kernel);
        let out_proj = projections.then(|| Linear::new(init, c, c));
        Ok(Self { in_proj, dw, out_proj })
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &Var) -> Result<Var> {
        let x = match &self.in_proj {
            Some(p) => p.forward(tape, x)?,
            None => x.clone(),
        };
        let y = self.dw.forward(tape, &x)?;
        match &self.out_proj {
            Some(p) => p.forward(tape, &y),
            None => Ok(y),
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let proj = |p: &Option<Linear>| p.as_ref().map_or(0, |p| p.macs(h * w));
        proj(&self.in_proj) + self.dw.macs(h, w) + proj(&self.out_proj)
    }
}

impl Module for DwConvMixer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(p) = &self.in_proj {
            p.visit(&join(prefix, "in_proj"), f);
        }
        self.dw.visit(&join(prefix, "dw"), f);
        if let Some(p) = &self.out_proj {
            p.visit(&join(prefix, "out_proj"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(p) = &mut self.in_proj {
            p.visit_mut(&join(prefix, "in_proj"), f);
        }
        self.dw.visit_mut(&join(prefix, "dw"), f);
        if let Some(p) = &mut self.out_proj {
            p.visit_mut(&join(prefix, "out_proj"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let m = DwConvMixer::new(&mut Init::new(0), 4, 7, true).unwrap();
        assert_eq!(m.num_params(), 2 * 20 + 49 * 4 + 4);
        assert_eq!(m.macs(2, 3), 2 * 6 * 16 + 4 * 6 * 49);
        let bare = DwConvMixer::new(&mut Init::new(0), 4, 7, false).unwrap();
        assert_eq!(bare.num_params(), 49 * 4 + 4);
        assert!(DwConvMixer::new(&mut Init::new(0), 4, 6, false).is_err());
    }
}
