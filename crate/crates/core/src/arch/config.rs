//! Backbone recipes: the [`ModelConfig`] schema, its TOML form and the
//! built-in presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stm::{HaloVariant, StmKind, StmParams};

/// Architecture arms, from the unified design (A) to the ConvNeXt-style
/// design (E).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Two-residual blocks, stage norms, head norm before pooling.
    #[default]
    A,
    /// As A with the head norm after pooling.
    B,
    /// As B without stage norms.
    C,
    /// Single-residual ConvNeXt-style blocks, otherwise as A.
    D,
    /// ConvNeXt-style blocks, no stage norms, head norm after pooling.
    E,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Self::A, Self::B, Self::C, Self::D, Self::E];

    pub fn convnext_blocks(self) -> bool {
        matches!(self, Self::D | Self::E)
    }

    pub fn stage_norm(self) -> bool {
        matches!(self, Self::A | Self::B | Self::D)
    }

    /// Whether the head normalizes tokens before global average pooling.
    pub fn norm_before_pool(self) -> bool {
        matches!(self, Self::A | Self::D)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            "C" => Ok(Self::C),
            "D" => Ok(Self::D),
            "E" => Ok(Self::E),
            _ => Err(Error::Config(format!("unknown variant `{s}` (expected A-E)"))),
        }
    }
}

/// Model scale of a preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scale {
    Micro,
    Tiny,
    Small,
    Base,
}

impl Scale {
    pub const ALL: [Scale; 4] = [Self::Micro, Self::Tiny, Self::Small, Self::Base];

    pub fn name(self) -> &'static str {
        match self {
            Self::Micro => "micro",
            Self::Tiny => "tiny",
            Self::Small => "small",
            Self::Base => "base",
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scale `{s}` (expected micro, tiny, small, base)")))
    }
}

impl Serialize for StmKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StmKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Mixer hyperparameters shared by all stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixerConfig {
    /// Window side (SW-Attn) or block side (Halo-Attn).
    pub window: usize,
    pub halo: usize,
    pub sr_ratios: [usize; 4],
    /// Channels per DCNv3 group.
    pub dcn_group_channels: usize,
    pub offset_scale: f32,
    pub dw_kernel: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            window: 7,
            halo: 3,
            sr_ratios: [8, 4, 2, 1],
            dcn_group_channels: 16,
            offset_scale: 1.0,
            dw_kernel: 7,
        }
    }
}

/// Per-channel input normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Complete recipe for one backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub stm: StmKind,
    #[serde(default)]
    pub variant: Variant,
    pub depths: [usize; 4],
    pub widths: [usize; 4],
    pub heads: [usize; 4],
    #[serde(default = "defaults::mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "defaults::layer_scale_init")]
    pub layer_scale_init: f32,
    #[serde(default = "defaults::num_classes")]
    pub num_classes: usize,
    #[serde(default = "defaults::input_size")]
    pub input_size: usize,
    /// Recorded for completeness; inference ignores it.
    #[serde(default)]
    pub drop_path: f32,
    #[serde(default)]
    pub mixer: MixerConfig,
    #[serde(default)]
    pub normalization: Normalization,
}

mod defaults {
    pub fn mlp_ratio() -> usize {
        4
    }
    pub fn layer_scale_init() -> f32 {
        1e-6
    }
    pub fn num_classes() -> usize {
        1000
    }
    pub fn input_size() -> usize {
        224
    }
}

/// Channels per attention head in the presets.
pub const HEAD_DIM: usize = 32;

/// `(depths, stem width)` per STM and scale; widths double per stage.
fn preset_shape(stm: StmKind, scale: Scale) -> ([usize; 4], usize) {
    use Scale::*;
    match (stm, scale) {
        (StmKind::HaloAttn(_), Micro) => ([2, 2, 3, 4], 32),
        (StmKind::HaloAttn(_), Tiny) => ([2, 2, 19, 4], 64),
        (StmKind::HaloAttn(_), Small) => ([2, 2, 15, 3], 96),
        (StmKind::HaloAttn(_), Base) => ([4, 4, 10, 4], 128),
        (StmKind::SrAttn, Micro) => ([3, 3, 3, 3], 32),
        (StmKind::SrAttn, Tiny) => ([4, 4, 18, 2], 64),
        (StmKind::SrAttn, Small) => ([4, 4, 10, 2], 96),
        (StmKind::SrAttn, Base) => ([4, 4, 25, 3], 96),
        (StmKind::SwAttn, Micro) => ([3, 3, 6, 3], 32),
        (StmKind::SwAttn, Tiny) => ([2, 2, 21, 4], 64),
        (StmKind::SwAttn, Small) => ([3, 3, 15, 3], 96),
        (StmKind::SwAttn, Base) => ([3, 3, 15, 3], 128),
        (StmKind::DwConv, Micro) => ([4, 4, 5, 4], 32),
        (StmKind::DwConv, Tiny) => ([2, 2, 28, 4], 64),
        (StmKind::DwConv, Small) => ([3, 3, 21, 3], 96),
        (StmKind::DwConv, Base) => ([3, 3, 21, 3], 128),
        (StmKind::Dcnv3, Micro) => ([3, 3, 6, 3], 32),
        (StmKind::Dcnv3, Tiny) => ([2, 2, 23, 3], 64),
        (StmKind::Dcnv3, Small) => ([3, 3, 14, 3], 96),
        (StmKind::Dcnv3, Base) => ([3, 3, 16, 3], 128),
    }
}

impl ModelConfig {
    /// The preset for `stm` at `scale` (variant A, 1000 classes, 224² input).
    pub fn preset(stm: StmKind, scale: Scale) -> Self {
        let (depths, c0) = preset_shape(stm, scale);
        let widths = [c0, 2 * c0, 4 * c0, 8 * c0];
        Self {
            name: format!("{}-{}", scale.name(), stm),
            stm,
            variant: Variant::A,
            depths,
            widths,
            heads: widths.map(|c| c / HEAD_DIM),
            mlp_ratio: defaults::mlp_ratio(),
            layer_scale_init: defaults::layer_scale_init(),
            num_classes: defaults::num_classes(),
            input_size: defaults::input_size(),
            drop_path: 0.0,
            mixer: MixerConfig::default(),
            normalization: Normalization::default(),
        }
    }

    /// Looks up a preset by name, `<scale>-<mixer>` (for example
    /// `micro-halo`, `tiny-dcnv3`, `small-halo-switch`).
    pub fn preset_by_name(name: &str) -> Result<Self> {
        let (scale, stm) = name
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("preset `{name}` is not of the form <scale>-<mixer>")))?;
        Ok(Self::preset(stm.parse()?, scale.parse()?))
    }

    /// The 20 standard presets, grouped by mixer in increasing scale.
    pub fn standard_presets() -> Vec<Self> {
        StmKind::ALL
            .into_iter()
            .flat_map(|stm| Scale::ALL.into_iter().map(move |scale| Self::preset(stm, scale)))
            .collect()
    }

    /// Parses a TOML recipe. A top-level `preset = "<name>"` key starts from
    /// that preset and lets the remaining keys override it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let base = match table.remove("preset") {
            Some(toml::Value::String(name)) => {
                let preset = Self::preset_by_name(&name)?;
                let toml::Value::Table(t) = toml::Value::try_from(&preset).map_err(|e| Error::Config(e.to_string()))? else {
                    unreachable!("configs serialize to tables")
                };
                t
            }
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => toml::Table::new(),
        };
        let merged = merge(base, table);
        let config: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    /// Mixer parameters for stage `s`.
    pub fn stm_params(&self, s: usize) -> StmParams {
        StmParams {
            heads: self.heads[s],
            window: self.mixer.window,
            halo: self.mixer.halo,
            sr_ratio: self.mixer.sr_ratios[s],
            dcn_groups: (self.widths[s] / self.mixer.dcn_group_channels.max(1)).max(1),
            offset_scale: self.mixer.offset_scale,
            dw_kernel: self.mixer.dw_kernel,
        }
    }

    pub fn halo_variant(&self) -> Option<HaloVariant> {
        match self.stm {
            StmKind::HaloAttn(v) => Some(v),
            _ => None,
        }
    }

    /// Model family name, e.g. `U-HaloNet`.
    pub fn model_name(&self) -> String {
        self.stm.model_name()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.widths[0] < 2 || self.widths[0] % 2 != 0 {
            return bad(format!("widths[0] must be even and at least 2, got {}", self.widths[0]));
        }
        for s in 0..4 {
            let c = self.widths[s];
            if self.depths[s] == 0 {
                return bad(format!("depths[{s}] must be positive"));
            }
            if self.heads[s] == 0 || c % self.heads[s] != 0 {
                return bad(format!("widths[{s}] = {c} not divisible by heads[{s}] = {}", self.heads[s]));
            }
            if self.stm == StmKind::Dcnv3 {
                let g = self.mixer.dcn_group_channels;
                if g == 0 || c % g != 0 {
                    return bad(format!("widths[{s}] = {c} not divisible by mixer.dcn_group_channels = {g}"));
                }
            }
            if self.mixer.sr_ratios[s] == 0 {
                return bad(format!("mixer.sr_ratios[{s}] must be positive"));
            }
            self.stm_params(s).validate()?;
        }
        if self.mlp_ratio == 0 || self.num_classes == 0 {
            return bad("mlp_ratio and num_classes must be positive".into());
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad(format!("input_size must be a positive multiple of 32, got {}", self.input_size));
        }
        if self.normalization.std.iter().any(|&s| s <= 0.0) {
            return bad("normalization.std entries must be positive".into());
        }
        Ok(())
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                *b = merge(std::mem::take(b), o);
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_named() {
        let all = ModelConfig::standard_presets();
        assert_eq!(all.len(), 20);
        for p in &all {
            p.validate().unwrap();
            assert_eq!(&ModelConfig::preset_by_name(&p.name).unwrap(), p);
        }
        let sw = ModelConfig::preset_by_name("small-halo-switch").unwrap();
        assert_eq!(sw.stm, StmKind::HaloAttn(HaloVariant::Switch));
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let p = ModelConfig::preset(StmKind::SwAttn, Scale::Tiny);
        assert_eq!(ModelConfig::from_toml(&p.to_toml()).unwrap(), p);
        let c = ModelConfig::from_toml("preset = \"micro-pvt\"\nvariant = \"C\"\n[mixer]\nsr_ratios = [4, 2, 1, 1]\n").unwrap();
        assert_eq!(c.variant, Variant::C);
        assert_eq!(c.mixer.sr_ratios, [4, 2, 1, 1]);
        assert_eq!(c.mixer.window, 7);
        assert_eq!(c.depths, ModelConfig::preset(StmKind::SrAttn, Scale::Micro).depths);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = ModelConfig::from_toml("preset = \"micro-halo\"\nwidht = 3\n").unwrap_err();
        assert!(err.to_string().contains("widht"), "{err}");
        let err = ModelConfig::from_toml("preset = \"micro-halo\"\n[mixer]\nhallo = 3\n").unwrap_err();
        assert!(err.to_string().contains("hallo"), "{err}");
    }

    #[test]
    fn validation_catches_divisibility() {
        let mut c = ModelConfig::preset(StmKind::SwAttn, Scale::Micro);
        c.heads[1] = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::preset(StmKind::Dcnv3, Scale::Micro);
        c.mixer.dcn_group_channels = 24;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::preset(StmKind::DwConv, Scale::Micro);
        c.input_size = 100;
        assert!(c.validate().is_err());
    }
}
