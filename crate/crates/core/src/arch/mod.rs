//! The unified four-stage backbone: overlapped stem and transitions,
//! blocks hosting any spatial token mixer, and a classification head.

mod config;

pub use config::{MixerConfig, ModelConfig, Normalization, Scale, Variant, HEAD_DIM};

use crate::error::{ensure, Result};
use crate::nn::{join, Conv2d, Init, LayerNorm, Linear, Module};
use crate::stm::{Dcnv3Mixer, DwConvMixer, HaloAttention, Mixer, SrAttention, StmKind, WindowAttention};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Two 3×3 stride-2 convolutions, each followed by layer norm, with GELU
/// between them.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv1: Conv2d,
    pub norm1: LayerNorm,
    pub conv2: Conv2d,
    pub norm2: LayerNorm,
}

impl Stem {
    fn new(init: &mut Init, cin: usize, c: usize) -> Self {
        Self {
            conv1: Conv2d::new(init, cin, c / 2, 3, 2, 1),
            norm1: LayerNorm::new(c / 2),
            conv2: Conv2d::new(init, c / 2, c, 3, 2, 1),
            norm2: LayerNorm::new(c),
        }
    }

    /// Channels-last forward.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &Var) -> Result<Var> {
        let y = self.conv1.forward(tape, x)?;
        let y = self.norm1.forward(tape, &y)?;
        let y = tape.gelu(&y);
        let y = self.conv2.forward(tape, &y)?;
        self.norm2.forward(tape, &y)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (h1, w1) = (self.conv1.out_extent(h), self.conv1.out_extent(w));
        self.conv1.macs(h, w) + self.conv2.macs(h1, w1)
    }
}

impl Module for Stem {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

/// 3×3 stride-2 convolution followed by layer norm.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl Downsample {
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &Var) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        self.norm.forward(tape, &y)
    }
}

impl Module for Downsample {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    fn new(init: &mut Init, c: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(init, c, hidden),
            fc2: Linear::new(init, hidden, c),
        }
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &Var) -> Result<Var> {
        let y = self.fc1.forward(tape, x)?;
        let y = tape.gelu(&y);
        self.fc2.forward(tape, &y)
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        self.fc1.macs(tokens) + self.fc2.macs(tokens)
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// One residual block.
#[derive(Clone, Debug)]
pub enum Block {
    /// `x + ls1·STM(LN(x))`, then `x + ls2·MLP(LN(x))`.
    Transformer {
        norm1: LayerNorm,
        mixer: Mixer,
        ls1: Tensor,
        norm2: LayerNorm,
        mlp: Mlp,
        ls2: Tensor,
    },
    /// `x + ls·MLP(LN(STM(x)))`.
    ConvNext { mixer: Mixer, norm: LayerNorm, mlp: Mlp, ls: Tensor },
}

impl Block {
    pub fn mixer(&self) -> &Mixer {
        match self {
            Self::Transformer { mixer, .. } | Self::ConvNext { mixer, .. } => mixer,
        }
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &Var) -> Result<Var> {
        match self {
            Self::Transformer { norm1, mixer, ls1, norm2, mlp, ls2 } => {
                let y = norm1.forward(tape, x)?;
                let y = mixer.forward(tape, &y)?;
                let y = tape.mul_channel(&y, ls1)?;
                let x = tape.add(x, &y)?;
                let y = norm2.forward(tape, &x)?;
                let y = mlp.forward(tape, &y)?;
                let y = tape.mul_channel(&y, ls2)?;
                tape.add(&x, &y)
            }
            Self::ConvNext { mixer, norm, mlp, ls } => {
                let y = mixer.forward(tape, x)?;
                let y = norm.forward(tape, &y)?;
                let y = mlp.forward(tape, &y)?;
                let y = tape.mul_channel(&y, ls)?;
                tape.add(x, &y)
            }
        }
    }

    /// Mixer and MLP multiply-accumulates on an `h × w` map.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            Self::Transformer { mixer, mlp, .. } | Self::ConvNext { mixer, mlp, .. } => {
                mixer.macs(h, w) + mlp.macs(h * w)
            }
        }
    }
}

impl Module for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Self::Transformer { norm1, mixer, ls1, norm2, mlp, ls2 } => {
                norm1.visit(&join(prefix, "norm1"), f);
                mixer.visit(&join(prefix, "mixer"), f);
                f(&join(prefix, "ls1"), ls1);
                norm2.visit(&join(prefix, "norm2"), f);
                mlp.visit(&join(prefix, "mlp"), f);
                f(&join(prefix, "ls2"), ls2);
            }
            Self::ConvNext { mixer, norm, mlp, ls } => {
                mixer.visit(&join(prefix, "mixer"), f);
                norm.visit(&join(prefix, "norm"), f);
                mlp.visit(&join(prefix, "mlp"), f);
                f(&join(prefix, "ls"), ls);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Self::Transformer { norm1, mixer, ls1, norm2, mlp, ls2 } => {
                norm1.visit_mut(&join(prefix, "norm1"), f);
                mixer.visit_mut(&join(prefix, "mixer"), f);
                f(&join(prefix, "ls1"), ls1);
                norm2.visit_mut(&join(prefix, "norm2"), f);
                mlp.visit_mut(&join(prefix, "mlp"), f);
                f(&join(prefix, "ls2"), ls2);
            }
            Self::ConvNext { mixer, norm, mlp, ls } => {
                mixer.visit_mut(&join(prefix, "mixer"), f);
                norm.visit_mut(&join(prefix, "norm"), f);
                mlp.visit_mut(&join(prefix, "mlp"), f);
                f(&join(prefix, "ls"), ls);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    /// Transition from the previous stage; absent on the first stage.
    pub downsample: Option<Downsample>,
    pub blocks: Vec<Block>,
    pub norm: Option<LayerNorm>,
}

impl Module for Stage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(d) = &self.downsample {
            d.visit(&join(prefix, "downsample"), f);
        }
        for (j, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{j}")), f);
        }
        if let Some(n) = &self.norm {
            n.visit(&join(prefix, "norm"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(d) = &mut self.downsample {
            d.visit_mut(&join(prefix, "downsample"), f);
        }
        for (j, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{j}")), f);
        }
        if let Some(n) = &mut self.norm {
            n.visit_mut(&join(prefix, "norm"), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub norm: LayerNorm,
    pub fc: Linear,
    pub norm_before_pool: bool,
}

impl Head {
    /// Channels-last last-stage map to logits `[N, classes]`.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &Var) -> Result<Var> {
        let [n, h, w, c] = x.value().dims4()?;
        let tokens = tape.reshape(x, &[n, h * w, c])?;
        let pooled = if self.norm_before_pool {
            let t = self.norm.forward(tape, &tokens)?;
            tape.mean_tokens(&t)?
        } else {
            let p = tape.mean_tokens(&tokens)?;
            self.norm.forward(tape, &p)?
        };
        self.fc.forward(tape, &pooled)
    }
}

impl Module for Head {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

/// A built backbone. Immutable after construction; forward passes only
/// borrow it.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub head: Head,
}

/// The mixer of block `block` in stage `stage`.
pub fn build_mixer(
    init: &mut Init,
    config: &ModelConfig,
    stage: usize,
    block: usize,
) -> Result<Mixer> {
    let c = config.widths[stage];
    let p = config.stm_params(stage);
    Ok(match config.stm {
        StmKind::HaloAttn(v) => {
            let (halo, anchor) = v.block_geometry(p.halo, block);
            Mixer::Halo(HaloAttention::new(init, c, p.heads, p.window, halo, anchor)?)
        }
        StmKind::SwAttn => Mixer::Window(WindowAttention::new(init, c, p.heads, p.window, block % 2 == 1)?),
        StmKind::SrAttn => Mixer::Sr(SrAttention::new(init, c, p.heads, p.sr_ratio)?),
        StmKind::DwConv => Mixer::DwConv(DwConvMixer::new(init, c, p.dw_kernel, !config.variant.convnext_blocks())?),
        StmKind::Dcnv3 => Mixer::Dcn(Dcnv3Mixer::new(init, c, p.dcn_groups, p.offset_scale)?),
    })
}

impl Model {
    /// Builds a model with deterministic pseudo-random weights: truncated
    /// normal (std 0.02) projections and kernels, zero biases, unit norms,
    /// layer scales at `config.layer_scale_init`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let stem = Stem::new(&mut init, 3, config.widths[0]);
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let c = config.widths[s];
            let downsample = (s > 0).then(|| Downsample {
                conv: Conv2d::new(&mut init, config.widths[s - 1], c, 3, 2, 1),
                norm: LayerNorm::new(c),
            });
            let ls = || Tensor::full(&[c], config.layer_scale_init).expect("valid shape");
            let blocks = (0..config.depths[s])
                .map(|j| {
                    let mixer = build_mixer(&mut init, config, s, j)?;
                    let hidden = c * config.mlp_ratio;
                    Ok(if config.variant.convnext_blocks() {
                        Block::ConvNext {
                            mixer,
                            norm: LayerNorm::new(c),
                            mlp: Mlp::new(&mut init, c, hidden),
                            ls: ls(),
                        }
                    } else {
                        Block::Transformer {
                            norm1: LayerNorm::new(c),
                            mixer,
                            ls1: ls(),
                            norm2: LayerNorm::new(c),
                            mlp: Mlp::new(&mut init, c, hidden),
                            ls2: ls(),
                        }
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = config.variant.stage_norm().then(|| LayerNorm::new(c));
            stages.push(Stage { downsample, blocks, norm });
        }
        let head = Head {
            norm: LayerNorm::new(config.widths[3]),
            fc: Linear::new(&mut init, config.widths[3], config.num_classes),
            norm_before_pool: config.variant.norm_before_pool(),
        };
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
            head,
        })
    }

    fn check_input(x: &Tensor) -> Result<[usize; 4]> {
        let [n, c, h, w] = x.dims4()?;
        ensure!(c == 3, "expected 3 input channels, got {c}");
        ensure!(n >= 1 && h % 32 == 0 && w % 32 == 0 && h > 0 && w > 0, "input {h}x{w} not divisible by 32");
        Ok([n, c, h, w])
    }

    /// Stem forward on an NCHW image batch, returning an NCHW map.
    pub fn stem_forward(&self, x: &Tensor) -> Result<Tensor> {
        let [_, _, h, w] = x.dims4()?;
        ensure!(h % 4 == 0 && w % 4 == 0, "stem input {h}x{w} not divisible by 4");
        crate::nn::run_nchw(x, |tape, v| self.stem.forward(tape, v))
    }

    /// Channels-last features of stages `0..=last` for an NCHW input
    /// already on `tape`.
    pub fn features_on_tape<'a>(&'a self, tape: &mut Tape<'a>, x: &Var, last: usize) -> Result<Vec<Var>> {
        ensure!(last < 4, "stage index {last} out of range 0..4");
        let mut y = tape.nchw_to_nhwc(x)?;
        y = self.stem.forward(tape, &y)?;
        let mut out = Vec::with_capacity(last + 1);
        for stage in &self.stages[..=last] {
            if let Some(d) = &stage.downsample {
                y = d.forward(tape, &y)?;
            }
            for block in &stage.blocks {
                y = block.forward(tape, &y)?;
            }
            if let Some(n) = &stage.norm {
                y = n.forward(tape, &y)?;
            }
            out.push(y.clone());
        }
        Ok(out)
    }

    /// The four post-stage maps, NCHW.
    pub fn forward_features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Self::check_input(x)?;
        let mut tape = Tape::inference();
        let input = tape.constant(x.clone());
        let feats = self.features_on_tape(&mut tape, &input, 3)?;
        feats.iter().map(|f| Ok(tape.nhwc_to_nchw(f)?.into_tensor())).collect()
    }

    /// Logits `[N, num_classes]`.
    pub fn forward_classify(&self, x: &Tensor) -> Result<Tensor> {
        Self::check_input(x)?;
        let mut tape = Tape::inference();
        let input = tape.constant(x.clone());
        let feats = self.features_on_tape(&mut tape, &input, 3)?;
        Ok(self.head.forward(&mut tape, &feats[3])?.into_tensor())
    }

    /// `(label, NCHW shape)` after the stem and each stage for a square
    /// `size` input.
    pub fn shape_trace(&self, size: usize) -> Vec<(String, [usize; 4])> {
        let mut side = size / 4;
        let mut trace = vec![("stem".to_string(), [1, self.config.widths[0], side, side])];
        for s in 0..4 {
            if s > 0 {
                side /= 2;
            }
            trace.push((format!("stage{s}"), [1, self.config.widths[s], side, side]));
        }
        trace
    }
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stages.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stages.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
