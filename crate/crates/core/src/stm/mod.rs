//! Spatial token mixers.
//!
//! Every mixer maps a channels-last `[N, H, W, C]` map to a map of the same
//! shape: each output pixel is an output projection of a weighted sum of
//! features at a set of sampling points. The mixers differ in how the set and
//! the weights are chosen:
//!
//! | mixer | sampling points | weights |
//! |---|---|---|
//! | [`HaloAttention`] | local block + halo band | dynamic (attention) |
//! | [`WindowAttention`] | local window, shifted on alternate blocks | dynamic |
//! | [`SrAttention`] | whole map, keys/values downsampled | dynamic |
//! | [`DwConvMixer`] | sliding 7×7 window | static (kernel) |
//! | [`Dcnv3Mixer`] | 9 input-dependent points per group | dynamic (softmax) |

mod dcn;
mod dwconv;
mod halo;
mod relpos;
mod sr;
mod window;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use dcn::Dcnv3Mixer;
pub use dwconv::DwConvMixer;
pub use halo::HaloAttention;
pub use relpos::relative_position_bias;
pub use sr::SrAttention;
pub use window::{shifted_window_mask, WindowAttention};

use crate::error::{Error, Result};
use crate::layout::WindowAnchor;
use crate::nn::Module;
use crate::ops::AttnBias;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Masked-out logit value for shifted-window attention.
pub const MASK_NEG: f32 = -1e9;

/// The halo-attention ablation arms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaloVariant {
    #[default]
    Standard,
    /// Halo only on every second block; the others attend within their block.
    Switch,
    /// Halo width forced to one pixel.
    OnePixel,
    /// Query block anchored at the enlarged window's top-left corner.
    ShiftedQuery,
}

impl HaloVariant {
    pub const ALL: [HaloVariant; 4] = [Self::Standard, Self::Switch, Self::OnePixel, Self::ShiftedQuery];

    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Switch => "switch",
            Self::OnePixel => "1px",
            Self::ShiftedQuery => "shift",
        }
    }

    /// Halo width and window anchor used by block `block_index` of a stage
    /// configured with halo `halo`.
    pub fn block_geometry(self, halo: usize, block_index: usize) -> (usize, WindowAnchor) {
        match self {
            Self::Standard => (halo, WindowAnchor::Centered),
            Self::Switch if block_index % 2 == 0 => (0, WindowAnchor::Centered),
            Self::Switch => (halo, WindowAnchor::Centered),
            Self::OnePixel => (1, WindowAnchor::Centered),
            Self::ShiftedQuery => (halo, WindowAnchor::TopLeft),
        }
    }
}

/// Which spatial token mixer a backbone hosts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StmKind {
    HaloAttn(HaloVariant),
    SwAttn,
    SrAttn,
    DwConv,
    Dcnv3,
}

impl StmKind {
    pub const ALL: [StmKind; 5] = [
        Self::HaloAttn(HaloVariant::Standard),
        Self::SrAttn,
        Self::SwAttn,
        Self::DwConv,
        Self::Dcnv3,
    ];

    /// Short identifier used in preset names and config files.
    pub fn key(self) -> &'static str {
        match self {
            Self::HaloAttn(_) => "halo",
            Self::SwAttn => "swin",
            Self::SrAttn => "pvt",
            Self::DwConv => "dwconv",
            Self::Dcnv3 => "dcnv3",
        }
    }

    /// Name of the unified-architecture model hosting this mixer.
    pub fn model_name(self) -> String {
        match self {
            Self::HaloAttn(HaloVariant::Standard) => "U-HaloNet".into(),
            Self::HaloAttn(v) => format!("U-HaloNet-{}", match v {
                HaloVariant::Switch => "Switch",
                HaloVariant::OnePixel => "1px",
                _ => "Shift",
            }),
            Self::SwAttn => "U-Swin".into(),
            Self::SrAttn => "U-PVT".into(),
            Self::DwConv => "U-DWConv".into(),
            Self::Dcnv3 => "U-InternImage".into(),
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Self::HaloAttn(_) | Self::SwAttn | Self::SrAttn)
    }
}

impl fmt::Display for StmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::HaloAttn(HaloVariant::Standard) => f.write_str("halo"),
            Self::HaloAttn(v) => write!(f, "halo-{}", v.name()),
            other => f.write_str(other.key()),
        }
    }
}

impl FromStr for StmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "halo" | "halo-standard" => Self::HaloAttn(HaloVariant::Standard),
            "halo-switch" => Self::HaloAttn(HaloVariant::Switch),
            "halo-1px" => Self::HaloAttn(HaloVariant::OnePixel),
            "halo-shift" => Self::HaloAttn(HaloVariant::ShiftedQuery),
            "swin" => Self::SwAttn,
            "pvt" | "sr" => Self::SrAttn,
            "dwconv" => Self::DwConv,
            "dcnv3" | "internimage" => Self::Dcnv3,
            other => {
                return Err(Error::Config(format!(
                    "unknown mixer `{other}` (expected halo, halo-switch, halo-1px, halo-shift, swin, pvt, dwconv, dcnv3)"
                )))
            }
        })
    }
}

/// Per-stage mixer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StmParams {
    pub heads: usize,
    /// Window (SW-Attn) or block (Halo-Attn) side.
    pub window: usize,
    pub halo: usize,
    pub sr_ratio: usize,
    pub dcn_groups: usize,
    pub offset_scale: f32,
    pub dw_kernel: usize,
}

impl StmParams {
    /// Checks the invariants that do not depend on the channel count.
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.window == 0 || self.sr_ratio == 0 || self.dcn_groups == 0 {
            return Err(Error::Config(format!("mixer parameters must be positive: {self:?}")));
        }
        if self.dw_kernel % 2 == 0 {
            return Err(Error::Config(format!("dw_kernel must be odd, got {}", self.dw_kernel)));
        }
        Ok(())
    }

    /// Shift used by shifted-window blocks.
    pub fn shift(&self) -> usize {
        self.window / 2
    }
}

/// Per-head scaled dot-product attention of `q [Tq, C]` over `k, v [Tk, C]`
/// with an optional additive logit bias `[heads, Tq, Tk]`. Heads are
/// re-concatenated; no output projection is applied.
pub fn mha_core(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, bias: Option<&Tensor>) -> Result<Tensor> {
    let [tq, c] = q.dims2()?;
    let [tk, ck] = k.dims2()?;
    if ck != c {
        return Err(Error::shape("mha_core", format!("k [Tk, {c}]"), format!("{:?}", k.shape())));
    }
    if v.shape() != [tk, c] {
        return Err(Error::shape("mha_core", format!("v [{tk}, {c}]"), format!("{:?}", v.shape())));
    }
    let mut tape = Tape::inference();
    let q = tape.constant(q.reshape(&[1, tq, c])?);
    let k = tape.constant(k.reshape(&[1, tk, c])?);
    let v = tape.constant(v.reshape(&[1, tk, c])?);
    let bias = AttnBias {
        rel: bias.map(|b| Arc::new(b.clone())),
        mask: None,
    };
    let out = tape.attention(&q, &k, &v, heads, &bias)?;
    out.value().reshape(&[tq, c])
}

/// A mixer instance of any kind.
#[derive(Clone, Debug)]
pub enum Mixer {
    Halo(HaloAttention),
    Window(WindowAttention),
    Sr(SrAttention),
    DwConv(DwConvMixer),
    Dcn(Dcnv3Mixer),
}

impl Mixer {
    /// Mixes a channels-last map.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &Var) -> Result<Var> {
        match self {
            Self::Halo(m) => m.forward(tape, x),
            Self::Window(m) => m.forward(tape, x),
            Self::Sr(m) => m.forward(tape, x),
            Self::DwConv(m) => m.forward(tape, x),
            Self::Dcn(m) => m.forward(tape, x),
        }
    }

    /// Mixes an NCHW map (convenience wrapper over [`forward`](Self::forward)).
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        crate::nn::run_nchw(x, |tape, v| self.forward(tape, v))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            Self::Halo(m) => m.macs(h, w),
            Self::Window(m) => m.macs(h, w),
            Self::Sr(m) => m.macs(h, w),
            Self::DwConv(m) => m.macs(h, w),
            Self::Dcn(m) => m.macs(h, w),
        }
    }
}

impl Module for Mixer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Self::Halo(m) => m.visit(prefix, f),
            Self::Window(m) => m.visit(prefix, f),
            Self::Sr(m) => m.visit(prefix, f),
            Self::DwConv(m) => m.visit(prefix, f),
            Self::Dcn(m) => m.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Self::Halo(m) => m.visit_mut(prefix, f),
            Self::Window(m) => m.visit_mut(prefix, f),
            Self::Sr(m) => m.visit_mut(prefix, f),
            Self::DwConv(m) => m.visit_mut(prefix, f),
            Self::Dcn(m) => m.visit_mut(prefix, f),
        }
    }
}

pub(crate) fn check_heads(c: usize, heads: usize) -> Result<()> {
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid(format!("{c} channels not divisible by {heads} heads")));
    }
    Ok(())
}

/// Side length after padding `extent` up to a multiple of `b`.
pub(crate) fn padded(extent: usize, b: usize) -> usize {
    extent.div_ceil(b) * b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_broadcasts_value() {
        let q = Tensor::from_fn(&[4, 6], |i| (i as f32 * 0.3).sin()).unwrap();
        let k = Tensor::from_fn(&[1, 6], |i| i as f32).unwrap();
        let v = Tensor::from_fn(&[1, 6], |i| 10.0 + i as f32).unwrap();
        let out = mha_core(&q, &k, &v, 2, None).unwrap();
        for row in out.data().chunks(6) {
            assert_eq!(row, v.data());
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let q = Tensor::from_fn(&[2, 4], |i| i as f32).unwrap();
        let k = Tensor::zeros(&[2, 4]).unwrap();
        let v = Tensor::new(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = mha_core(&q, &k, &v, 1, None).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0, 4.0, 5.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let t = Tensor::zeros(&[2, 6]).unwrap();
        assert!(mha_core(&t, &t, &t, 4, None).is_err());
    }

    #[test]
    fn kind_round_trips_through_text() {
        for kind in StmKind::ALL.into_iter().chain(
            HaloVariant::ALL.into_iter().map(StmKind::HaloAttn),
        ) {
            assert_eq!(kind.to_string().parse::<StmKind>().unwrap(), kind);
        }
        assert!("conv".parse::<StmKind>().is_err());
    }

    #[test]
    fn switch_alternates_halo() {
        let v = HaloVariant::Switch;
        assert_eq!(v.block_geometry(3, 0).0, 0);
        assert_eq!(v.block_geometry(3, 1).0, 3);
        assert_eq!(HaloVariant::OnePixel.block_geometry(3, 0).0, 1);
        assert_eq!(HaloVariant::ShiftedQuery.block_geometry(3, 0).1, WindowAnchor::TopLeft);
    }
}
