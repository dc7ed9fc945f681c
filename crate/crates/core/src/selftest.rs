//! The oracle battery: every optimized operator and mixer against its
//! double-precision reference, reverse-mode gradients against central
//! finite differences, equivariance and normalization properties, and the
//! accounting formulas.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::accounting::count_macs;
use crate::arch::{build_mixer, Model, ModelConfig, Scale, Variant};
use crate::error::{ensure, Error, Result};
use crate::invariance::translate_image;
use crate::layout::WindowAnchor;
use crate::nn::{randomize, DepthwiseConv, Init, Linear, Module};
use crate::ops::{self, AttnBias, ConvOpts, PadMode};
use crate::reference::{self as oracle, Map};
use crate::stm::{
    mha_core, shifted_window_mask, Dcnv3Mixer, DwConvMixer, HaloAttention, Mixer, SrAttention, StmKind,
    WindowAttention,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Largest deviation observed over all cases (absolute or relative,
    /// depending on the check).
    pub max_dev: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub error: Option<String>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_dev.is_finite() && self.max_dev <= self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed() { "PASS" } else { "FAIL" };
            let _ = write!(
                out,
                "{status} {:<28} max_dev={:.3e} tol={:.0e} cases={}",
                c.name, c.max_dev, c.tolerance, c.cases
            );
            if let Some(e) = &c.error {
                let _ = write!(out, " error: {e}");
            }
            out.push('\n');
        }
        let failed = self.failures().count();
        let _ = writeln!(out, "{} checks, {} failed", self.checks.len(), failed);
        out
    }
}

#[derive(Clone, Debug)]
pub struct Options {
    /// Random cases per forward-oracle check.
    pub oracle_seeds: u64,
    /// Random cases per gradient check.
    pub gradient_seeds: u64,
    /// Name of a check whose oracle fixture gets a deliberate weight
    /// perturbation (for verifying that failures are caught).
    pub inject_fault: Option<String>,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            oracle_seeds: 20,
            gradient_seeds: 10,
            inject_fault: None,
        }
    }
}

/// Families of checks, in the order [`run`] executes them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Primitives,
    MixerOracles,
    Architecture,
    Gradients,
    Equivariance,
    Accounting,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Self::Primitives,
        Self::MixerOracles,
        Self::Architecture,
        Self::Gradients,
        Self::Equivariance,
        Self::Accounting,
    ];
}

/// Runs the checks of one group.
pub fn run_group(group: Group, opts: &Options) -> Report {
    let checks = match group {
        Group::Primitives => primitive_checks(opts),
        Group::MixerOracles => mixer_oracle_checks(opts),
        Group::Architecture => architecture_checks(opts),
        Group::Gradients => gradient_checks(opts),
        Group::Equivariance => equivariance_checks(opts),
        Group::Accounting => accounting_checks(opts),
    };
    Report { checks }
}

/// Runs every check.
pub fn run(opts: &Options) -> Report {
    let checks = Group::ALL.into_iter().flat_map(|g| run_group(g, opts).checks).collect();
    Report { checks }
}

const FAULT: f32 = 0.05;

struct Runner<'o> {
    opts: &'o Options,
}

impl Runner<'_> {
    fn faulty(&self, name: &str) -> bool {
        self.opts.inject_fault.as_deref() == Some(name)
    }

    /// Runs `case` for seeds `0..cases`, keeping the worst deviation.
    fn check(&self, name: &str, tolerance: f64, cases: u64, case: impl Fn(u64, bool) -> Result<f64>) -> Check {
        let fault = self.faulty(name);
        let mut worst = 0.0f64;
        let mut error = None;
        for seed in 0..cases {
            match case(seed, fault) {
                Ok(d) => worst = if d.is_nan() { f64::NAN } else { worst.max(d) },
                Err(e) => {
                    error = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
            if worst.is_nan() {
                break;
            }
        }
        Check {
            name: name.to_string(),
            max_dev: worst,
            tolerance,
            cases: cases as usize,
            error,
        }
    }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], amp: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-amp..amp)).expect("valid shape")
}

fn max_abs(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

fn perturb_first(module: &mut dyn Module) {
    let mut done = false;
    module.visit_mut("", &mut |_, t| {
        if !done {
            t.data_mut()[0] += FAULT;
            done = true;
        }
    });
}

fn nchw_to_map(x: &Tensor) -> Result<Map> {
    let mut tape = Tape::inference();
    let v = tape.constant(x.clone());
    Map::from_tensor(tape.nchw_to_nhwc(&v)?.value())
}

// ---------------------------------------------------------------------------
// primitives

fn primitive_checks(opts: &Options) -> Vec<Check> {
    let r = Runner { opts };
    let n = opts.oracle_seeds;
    vec![
        r.check("matmul", 1e-6, n, |seed, fault| {
            let mut g = rng(seed, 1);
            let (m, k, p) = (g.gen_range(1..9), g.gen_range(1..9), g.gen_range(1..9));
            let a = uniform(&mut g, &[m, k], 1.0);
            let b = uniform(&mut g, &[k, p], 1.0);
            let got = ops::matmul(&a, &b)?;
            let mut want = vec![0.0f64; m * p];
            for i in 0..m {
                for j in 0..p {
                    for e in 0..k {
                        want[i * p + j] += a.data()[i * k + e] as f64 * b.data()[e * p + j] as f64;
                    }
                }
            }
            if fault {
                want[0] += FAULT as f64;
            }
            Ok(max_abs(got.data(), &want))
        }),
        r.check("softmax", 1e-6, n, |seed, fault| {
            let mut g = rng(seed, 2);
            let x = uniform(&mut g, &[3, 9], 5.0);
            let got = ops::softmax(&x, 1)?;
            let mut want: Vec<f64> = x
                .data()
                .chunks(9)
                .flat_map(|r| oracle::softmax(&r.iter().map(|&v| v as f64).collect::<Vec<_>>()))
                .collect();
            if fault {
                want[0] += FAULT as f64;
            }
            Ok(max_abs(got.data(), &want))
        }),
        r.check("layer_norm", 1e-6, n, |seed, fault| {
            let mut g = rng(seed, 3);
            let x = uniform(&mut g, &[5, 4], 2.0);
            let mut ln = crate::nn::LayerNorm::new(4);
            ln.weight = uniform(&mut g, &[4], 1.5);
            ln.bias = uniform(&mut g, &[4], 1.0);
            let got = ops::layer_norm(&x, &ln.weight, &ln.bias, ops::LAYER_NORM_EPS)?;
            let mut want: Vec<f64> = x
                .data()
                .chunks(4)
                .flat_map(|r| oracle::layer_norm_token(&r.iter().map(|&v| v as f64).collect::<Vec<_>>(), &ln))
                .collect();
            if fault {
                want[0] += FAULT as f64;
            }
            Ok(max_abs(got.data(), &want))
        }),
        r.check("gelu", 1e-6, n, |seed, fault| {
            let mut g = rng(seed, 4);
            let x = uniform(&mut g, &[64], 6.0);
            let got = ops::gelu(&x);
            let mut want: Vec<f64> = x.data().iter().map(|&v| oracle::gelu(v as f64)).collect();
            if fault {
                want[0] += FAULT as f64;
            }
            Ok(max_abs(got.data(), &want))
        }),
        r.check("depthwise_conv2d", 1e-6, n, |seed, fault| {
            let mut g = rng(seed, 5);
            let k = [1, 3, 5, 7][g.gen_range(0..4)];
            let x = uniform(&mut g, &[1, 4, 16, 16], 1.0);
            let mut dw = DepthwiseConv::new(&mut Init::new(seed), 4, k);
            dw.weight = uniform(&mut g, &[4, k, k], 0.2);
            dw.bias = uniform(&mut g, &[4], 0.5);
            let got = ops::depthwise_conv2d(&x, &dw.weight, Some(&dw.bias), ConvOpts::default())?;
            if fault {
                dw.weight.data_mut()[0] += FAULT;
            }
            let want = oracle::depthwise(&nchw_to_map(&x)?, &dw);
            Ok(oracle::max_deviation(&nchw_to_map(&got)?.to_tensor(), &want)?)
        }),
        r.check("bilinear_sample", 1e-6, n, |seed, fault| {
            let mut g = rng(seed, 6);
            let x = uniform(&mut g, &[1, 2, 6, 7], 1.0);
            let points: Vec<(f32, f32)> = (0..12).map(|_| (g.gen_range(-1.5..7.5), g.gen_range(-1.5..8.5))).collect();
            let got = ops::bilinear_sample(&x, &points)?;
            let map = nchw_to_map(&x)?;
            let mut want = Vec::new();
            for ch in 0..2 {
                for &(py, px) in &points {
                    // the four-neighbour formula with zero outside
                    let (y0, x0) = (py.floor() as f64, px.floor() as f64);
                    let (ly, lx) = (py as f64 - y0, px as f64 - x0);
                    let at = |y: f64, x: f64| map.get(0, y as isize, x as isize).map_or(0.0, |p| p[ch]);
                    want.push(
                        (1.0 - ly) * (1.0 - lx) * at(y0, x0)
                            + (1.0 - ly) * lx * at(y0, x0 + 1.0)
                            + ly * (1.0 - lx) * at(y0 + 1.0, x0)
                            + ly * lx * at(y0 + 1.0, x0 + 1.0),
                    );
                }
            }
            if fault {
                want[0] += FAULT as f64;
            }
            Ok(max_abs(got.data(), &want))
        }),
        r.check("mha_core", 1e-5, n, |seed, fault| {
            let mut g = rng(seed, 7);
            let q = uniform(&mut g, &[6, 8], 1.0);
            let k = uniform(&mut g, &[5, 8], 1.0);
            let v = uniform(&mut g, &[5, 8], 1.0);
            let bias = uniform(&mut g, &[2, 6, 5], 1.0);
            let got = mha_core(&q, &k, &v, 2, Some(&bias))?;
            let mut want = oracle::mha(&q, &k, &v, 2, Some(&bias))?;
            if fault {
                want.data_mut()[0] += FAULT;
            }
            Ok(got.max_abs_diff(&want)? as f64)
        }),
    ]
}

// ---------------------------------------------------------------------------
// mixers

/// A random mixer of the given kind and a compatible input map
/// `[1..=2, H, W, C]` with `H, W ≤ 8`.
pub fn random_mixer(kind: StmKind, seed: u64) -> Result<(Mixer, Tensor)> {
    let mut g = rng(seed, 100 + kind.key().len() as u64);
    let mut init = Init::new(seed);
    let c = [8, 16][g.gen_range(0..2)];
    let heads = [1, 2, 4][g.gen_range(0..3)];
    let n = g.gen_range(1..3);
    let (mut h, mut w) = (g.gen_range(1..9), g.gen_range(1..9));
    let mut mixer = match kind {
        StmKind::HaloAttn(_) => {
            let anchor = if g.gen_bool(0.5) { WindowAnchor::Centered } else { WindowAnchor::TopLeft };
            Mixer::Halo(HaloAttention::new(&mut init, c, heads, g.gen_range(1..5), g.gen_range(0..3), anchor)?)
        }
        StmKind::SwAttn => Mixer::Window(WindowAttention::new(&mut init, c, heads, g.gen_range(1..5), g.gen_bool(0.6))?),
        StmKind::SrAttn => {
            let sr = [1, 2, 4][g.gen_range(0..3)];
            h = sr * g.gen_range(1..=8 / sr);
            w = sr * g.gen_range(1..=8 / sr);
            Mixer::Sr(SrAttention::new(&mut init, c, heads, sr)?)
        }
        StmKind::DwConv => Mixer::DwConv(DwConvMixer::new(&mut init, c, [1, 3, 5, 7][g.gen_range(0..4)], g.gen_bool(0.7))?),
        StmKind::Dcnv3 => {
            let groups = [1, 2, 4][g.gen_range(0..3)];
            let scale = [0.5, 1.0, 2.0][g.gen_range(0..3)];
            Mixer::Dcn(Dcnv3Mixer::new(&mut init, c, groups, scale)?)
        }
    };
    randomize(&mut mixer, seed ^ 0xA5A5, 0.5);
    if let Mixer::Dcn(m) = &mut mixer {
        // offsets of a few pixels so sampling leaves the grid
        m.offset.weight = uniform(&mut g, m.offset.weight.shape(), 1.0);
        m.offset.bias = Some(uniform(&mut g, &[m.offset.out_features()], 1.5));
    }
    let x = uniform(&mut g, &[n, h, w, c], 1.0);
    Ok((mixer, x))
}

fn mixer_case(kind: StmKind, seed: u64, fault: bool) -> Result<f64> {
    let (mixer, x) = random_mixer(kind, seed)?;
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let got = mixer.forward(&mut tape, &xv)?.into_tensor();
    let mut fixture = mixer.clone();
    if fault {
        perturb_first(&mut fixture);
    }
    let want = oracle::mixer(&fixture, &Map::from_tensor(&x)?);
    oracle::max_deviation(&got, &want)
}

/// Check name of the forward oracle for a mixer kind.
pub fn oracle_check_name(kind: StmKind) -> &'static str {
    match kind {
        StmKind::HaloAttn(_) => "halo_attention",
        StmKind::SwAttn => "window_attention",
        StmKind::SrAttn => "sr_attention",
        StmKind::DwConv => "dwconv_mixer",
        StmKind::Dcnv3 => "dcnv3_mixer",
    }
}

fn mixer_oracle_checks(opts: &Options) -> Vec<Check> {
    let r = Runner { opts };
    StmKind::ALL
        .into_iter()
        .map(|kind| r.check(oracle_check_name(kind), 1e-5, opts.oracle_seeds, |seed, fault| mixer_case(kind, seed, fault)))
        .collect()
}

// ---------------------------------------------------------------------------
// stem and blocks

fn tiny_config(stm: StmKind, variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::preset(stm, Scale::Micro);
    c.depths = [1, 2, 1, 1];
    c.widths = [16, 32, 64, 128];
    c.heads = [2, 2, 4, 4];
    c.mixer.window = 4;
    c.mixer.halo = 1;
    c.mixer.sr_ratios = [4, 2, 1, 1];
    c.num_classes = 10;
    c.variant = variant;
    c
}

fn architecture_checks(opts: &Options) -> Vec<Check> {
    let r = Runner { opts };
    let n = opts.oracle_seeds.min(5);
    let mut checks = vec![r.check("stem", 1e-6, n, |seed, fault| {
        let mut g = rng(seed, 200);
        let mut model = Model::build(&tiny_config(StmKind::DwConv, Variant::A), seed)?;
        randomize(&mut model.stem, seed, 0.3);
        let x = uniform(&mut g, &[1, 3, 16, 16], 1.0);
        let got = nchw_to_map(&model.stem_forward(&x)?)?.to_tensor();
        let mut stem = model.stem.clone();
        if fault {
            perturb_first(&mut stem);
        }
        oracle::max_deviation(&got, &oracle::stem(&stem, &nchw_to_map(&x)?))
    })];
    for variant in [Variant::A, Variant::D] {
        let name = format!("block_{variant}");
        checks.push(r.check(&name, 1e-6, n, |seed, fault| {
            let mut g = rng(seed, 201);
            let cfg = tiny_config(StmKind::DwConv, variant);
            let mut model = Model::build(&cfg, seed)?;
            let block = &mut model.stages[0].blocks[0];
            randomize(block, seed, 0.3);
            let x = uniform(&mut g, &[1, 6, 6, 16], 1.0);
            let mut tape = Tape::inference();
            let xv = tape.constant(x.clone());
            let got = block.forward(&mut tape, &xv)?.into_tensor();
            let mut fixture = block.clone();
            if fault {
                perturb_first(&mut fixture);
            }
            oracle::max_deviation(&got, &oracle::block(&fixture, &Map::from_tensor(&x)?))
        }));
    }
    checks
}

// ---------------------------------------------------------------------------
// gradients

/// Relative error `‖fd − vjp‖₂ / max(‖fd‖₂, ‖vjp‖₂)` between the reverse-mode
/// gradient of `Σ seed·f(inputs)` and its central finite differences with
/// step `1e-3`, maximized over inputs. Only the listed element indices are
/// probed when `probe` is given.
pub fn finite_difference_error<'a>(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
    seed: u64,
    probe: Option<&[usize]>,
) -> Result<f64> {
    let forward = |xs: &[Vec<f64>]| -> Result<Vec<f64>> {
        let mut t = Tape::inference();
        let mut vars = Vec::with_capacity(xs.len());
        for (x, like) in xs.iter().zip(inputs) {
            let data = x.iter().map(|&v| v as f32).collect();
            vars.push(t.constant(Tensor::new(like.shape(), data)?));
        }
        Ok(f(&mut t, &vars)?.value().data().iter().map(|&v| v as f64).collect())
    };
    fd_core(inputs, f, &forward, seed, probe)
}

/// Like [`finite_difference_error`], but the differences are taken on a
/// double-precision `reference` of the same function (inputs and output in
/// the tensors' row-major layout), which removes single-precision rounding
/// from the difference quotient.
pub fn reference_finite_difference_error<'a>(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
    reference: &dyn Fn(&[Vec<f64>]) -> Result<Vec<f64>>,
    seed: u64,
    probe: Option<&[usize]>,
) -> Result<f64> {
    fd_core(inputs, f, reference, seed, probe)
}

fn fd_core<'a>(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
    forward: &dyn Fn(&[Vec<f64>]) -> Result<Vec<f64>>,
    seed: u64,
    probe: Option<&[usize]>,
) -> Result<f64> {
    const STEP: f64 = 1e-3;
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    let mut g = rng(seed, 300);
    let weights = uniform(&mut g, out.shape(), 1.0);
    let grads = tape.vjp(&out, &weights, &leaves.iter().collect::<Vec<_>>())?;
    let objective = |xs: &[Vec<f64>]| -> Result<f64> {
        let y = forward(xs)?;
        ensure!(y.len() == weights.numel(), "reference produced {} values, expected {}", y.len(), weights.numel());
        Ok(y.iter().zip(weights.data()).map(|(a, &b)| a * b as f64).sum())
    };
    let mut xs: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let mut worst = 0.0f64;
    for (i, grad) in grads.iter().enumerate() {
        let all: Vec<usize>;
        let idx = match probe {
            Some(p) => p,
            None => {
                all = (0..inputs[i].numel()).collect();
                &all
            }
        };
        let (mut diff, mut nf, mut na) = (0.0f64, 0.0f64, 0.0f64);
        for &e in idx {
            let orig = xs[i][e];
            // the step actually realized after rounding the input to f32
            let hi = (orig + STEP) as f32 as f64;
            let lo = (orig - STEP) as f32 as f64;
            xs[i][e] = hi;
            let plus = objective(&xs)?;
            xs[i][e] = lo;
            let minus = objective(&xs)?;
            xs[i][e] = orig;
            let fd = (plus - minus) / (hi - lo);
            let an = grad.data()[e] as f64;
            diff += (fd - an) * (fd - an);
            nf += fd * fd;
            na += an * an;
        }
        let denom = nf.max(na).sqrt();
        if denom > 1e-9 {
            worst = worst.max(diff.sqrt() / denom);
        } else if diff.sqrt() > 1e-6 {
            worst = f64::INFINITY;
        }
    }
    Ok(worst)
}

type GradCase = fn(u64) -> Result<f64>;

fn grad_cases() -> Vec<(&'static str, GradCase)> {
    vec![
        ("vjp_linear", |s| {
            let mut g = rng(s, 400);
            let lin = Linear {
                weight: uniform(&mut g, &[5, 3], 1.0),
                bias: Some(uniform(&mut g, &[3], 1.0)),
            };
            let x = uniform(&mut g, &[2, 4, 5], 1.0);
            finite_difference_error(&[x], &|t, v| lin.forward(t, &v[0]), s, None)
        }),
        ("vjp_matmul", |s| {
            let mut g = rng(s, 401);
            let a = uniform(&mut g, &[4, 6], 1.0);
            let b = uniform(&mut g, &[6, 3], 1.0);
            finite_difference_error(&[a, b], &|t, v| t.matmul(&v[0], &v[1]), s, None)
        }),
        ("vjp_elementwise", |s| {
            let mut g = rng(s, 402);
            let a = uniform(&mut g, &[3, 5], 1.0);
            let b = uniform(&mut g, &[3, 5], 1.0);
            let scale = uniform(&mut g, &[5], 1.0);
            let scale = Box::leak(Box::new(scale));
            finite_difference_error(
                &[a, b],
                &|t, v| {
                    let p = t.mul(&v[0], &v[1])?;
                    let q = t.add(&p, &v[0])?;
                    let q = t.scale(&q, -1.7);
                    let q = t.mul_channel(&q, scale)?;
                    let q = t.gelu(&q);
                    t.reshape(&q, &[15])
                },
                s,
                None,
            )
        }),
        ("vjp_softmax", |s| {
            let mut g = rng(s, 403);
            let x = uniform(&mut g, &[3, 4, 5], 2.0);
            let axis = (s % 3) as usize;
            finite_difference_error(&[x], &|t, v| t.softmax(&v[0], axis), s, None)
        }),
        ("vjp_layer_norm", |s| {
            let mut g = rng(s, 404);
            let x = uniform(&mut g, &[4, 6], 1.0);
            let ln = Box::leak(Box::new(crate::nn::LayerNorm {
                weight: uniform(&mut g, &[6], 1.5),
                bias: uniform(&mut g, &[6], 1.0),
            }));
            finite_difference_error(&[x], &|t, v| ln.forward(t, &v[0]), s, None)
        }),
        ("vjp_depthwise_conv2d", |s| {
            let mut g = rng(s, 405);
            let x = uniform(&mut g, &[1, 2, 7, 6], 1.0);
            let k = Box::leak(Box::new(uniform(&mut g, &[2, 3, 3], 1.0)));
            let mode = if s % 2 == 0 { PadMode::Zero } else { PadMode::Cyclic };
            let stride = 1 + (s % 3 == 2) as usize;
            let opts = ConvOpts { stride, mode, ..ConvOpts::default() };
            finite_difference_error(&[x], &|t, v| t.depthwise_conv2d(&v[0], k, None, opts), s, None)
        }),
        ("vjp_bilinear_sample", |s| {
            let mut g = rng(s, 406);
            let x = uniform(&mut g, &[1, 2, 5, 5], 1.0);
            let pts: Vec<(f32, f32)> = (0..7).map(|_| (g.gen_range(-1.0..5.5), g.gen_range(-1.0..5.5))).collect();
            finite_difference_error(&[x], &|t, v| t.bilinear_sample(&v[0], &pts), s, None)
        }),
        ("vjp_layout", |s| {
            let mut g = rng(s, 407);
            let x = uniform(&mut g, &[1, 5, 6, 3], 1.0);
            finite_difference_error(
                &[x],
                &|t, v| {
                    let y = t.pad_to(&v[0], 6, 6)?;
                    let y = t.roll(&y, 1, -2)?;
                    let h = t.halo_windows(&y, 3, 1, WindowAnchor::Centered)?;
                    let h = t.reshape(&h, &[4 * 25 * 3])?;
                    let w = t.window_partition(&y, 2)?;
                    let w = t.window_merge(&w, [1, 6, 6, 3], 2)?;
                    let c = t.im2col(&w, 3, 2, 1)?;
                    let c = t.slice_last(&c, 2, 9)?;
                    let p = t.permute(&c, &[0, 3, 1, 2])?;
                    let p = t.reshape(&p, &[9 * 9])?;
                    let wt = t.reshape(&w, &[1, 36, 3])?;
                    let q = t.mean_tokens(&wt)?;
                    let q = t.reshape(&q, &[3])?;
                    let hs = t.slice_last(&h, 0, 81)?;
                    let hs = t.add(&hs, &p)?;
                    let a = t.reshape(&hs, &[27, 3])?;
                    let b = t.reshape(&q, &[3, 1])?;
                    t.matmul(&a, &b)
                },
                s,
                None,
            )
        }),
        ("vjp_attention", |s| {
            let mut g = rng(s, 408);
            let (b, tq, tk, c, heads) = (4, 4, 4, 8, 2);
            let q = uniform(&mut g, &[b, tq, c], 1.0);
            let k = uniform(&mut g, &[b, tk, c], 1.0);
            let v = uniform(&mut g, &[b, tk, c], 1.0);
            let bias = AttnBias {
                rel: Some(Arc::new(uniform(&mut g, &[heads, tq, tk], 1.0))),
                mask: Some(Arc::new(shifted_window_mask(4, 4, 2, 1))),
            };
            finite_difference_error(&[q, k, v], &|t, x| t.attention(&x[0], &x[1], &x[2], heads, &bias), s, None)
        }),
        ("vjp_deform_sample", |s| {
            let mut g = rng(s, 409);
            let (h, w, c, groups) = (4, 5, 4, 2);
            let value = uniform(&mut g, &[1, h, w, c], 1.0);
            // keep sampling coordinates away from integer kinks
            let offset = Tensor::from_fn(&[1, h, w, groups * 18], |_| {
                g.gen_range(-2i32..2) as f32 + g.gen_range(0.1f32..0.9)
            })?;
            let mask = uniform(&mut g, &[1, h, w, groups * 9], 1.0);
            finite_difference_error(&[value, offset, mask], &|t, x| t.deform_sample(&x[0], &x[1], &x[2], groups, 1.0), s, None)
        }),
    ]
}

fn mixer_gradient_case(kind: StmKind, seed: u64) -> Result<f64> {
    let (mut mixer, x) = random_mixer(kind, seed)?;
    if let Mixer::Dcn(m) = &mut mixer {
        // offsets dominated by half-integer biases: no bilinear kinks within the step
        let mut g = rng(seed, 410);
        m.offset.weight = uniform(&mut g, m.offset.weight.shape(), 0.01);
        m.offset.bias = Some(Tensor::from_fn(&[m.offset.out_features()], |_| (g.gen_range(-1i32..2) as f32 + 0.5) / m.offset_scale)?);
    }
    let [n, h, w, c] = x.dims4()?;
    let reference = |xs: &[Vec<f64>]| Ok(oracle::mixer(&mixer, &Map { n, h, w, c, data: xs[0].clone() }).data);
    reference_finite_difference_error(&[x], &|t, v| mixer.forward(t, &v[0]), &reference, seed, None)
}

/// Check name of the gradient check for a mixer kind.
pub fn gradient_check_name(kind: StmKind) -> String {
    format!("vjp_{}", oracle_check_name(kind))
}

fn gradient_checks(opts: &Options) -> Vec<Check> {
    let r = Runner { opts };
    let n = opts.gradient_seeds;
    let mut checks: Vec<Check> = grad_cases()
        .into_iter()
        .map(|(name, case)| {
            r.check(name, 1e-3, n, |seed, fault| Ok(case(seed)? + if fault { FAULT as f64 } else { 0.0 }))
        })
        .collect();
    for kind in StmKind::ALL {
        let name = gradient_check_name(kind);
        checks.push(r.check(&name, 1e-3, n, |seed, fault| {
            Ok(mixer_gradient_case(kind, seed)? + if fault { FAULT as f64 } else { 0.0 })
        }));
    }
    checks.push(r.check("vjp_model", 1e-3, n.min(3), |seed, fault| {
        let kinds = StmKind::ALL;
        let cfg = tiny_config(kinds[seed as usize % kinds.len()], Variant::A);
        let mut model = Model::build(&cfg, seed)?;
        for stage in &mut model.stages {
            for block in &mut stage.blocks {
                if let crate::arch::Block::Transformer { ls1, ls2, .. } = block {
                    *ls1 = Tensor::full(ls1.shape(), 0.5)?;
                    *ls2 = Tensor::full(ls2.shape(), 0.5)?;
                }
            }
        }
        let mut g = rng(seed, 411);
        let x = uniform(&mut g, &[1, 3, 32, 32], 1.0);
        let probe: Vec<usize> = (0..48).map(|_| g.gen_range(0..x.numel())).collect();
        let model = &model;
        let reference = |xs: &[Vec<f64>]| {
            // NCHW input to channels-last
            let img = Map {
                n: 1,
                h: 32,
                w: 32,
                c: 3,
                data: (0..32 * 32 * 3).map(|i| xs[0][(i % 3) * 1024 + i / 3]).collect(),
            };
            Ok(oracle::features(model, &img, 1).data)
        };
        let err = reference_finite_difference_error(
            &[x],
            &|t, v| Ok(model.features_on_tape(t, &v[0], 1)?.pop().expect("one stage")),
            &reference,
            seed,
            Some(&probe),
        )?;
        Ok(err + if fault { FAULT as f64 } else { 0.0 })
    }));
    checks
}

// ---------------------------------------------------------------------------
// equivariance and normalization

/// Applies `f` to `x` and to `x` translated by `(dy, dx)` and returns the
/// largest difference on output pixels `(y, x)` with `keep(y, x)`, comparing
/// `out_shifted(y + dy, x + dx)` against `out(y, x)`.
pub fn translation_deviation(
    x: &Tensor,
    dy: usize,
    dx: usize,
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    keep: &dyn Fn(usize, usize) -> bool,
) -> Result<f64> {
    let [n, h, w, c] = x.dims4()?;
    // translate each channel-last image through the CHW helper
    let mut shifted = vec![0.0f32; x.numel()];
    for b in 0..n {
        let chw = Tensor::from_fn(&[c, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            x.data()[(b * h * w + p) * c + ch]
        })?;
        let t = translate_image(&chw, dy as isize, dx as isize, 0.0)?;
        for p in 0..h * w {
            for ch in 0..c {
                shifted[(b * h * w + p) * c + ch] = t.data()[ch * h * w + p];
            }
        }
    }
    let a = f(x)?;
    let b = f(&Tensor::new(x.shape(), shifted)?)?;
    let mut worst = 0.0f64;
    for img in 0..n {
        for y in 0..h - dy {
            for xx in 0..w - dx {
                if !keep(y, xx) {
                    continue;
                }
                for ch in 0..c {
                    let va = a.at(&[img, y, xx, ch]);
                    let vb = b.at(&[img, y + dy, xx + dx, ch]);
                    worst = worst.max((va - vb).abs() as f64);
                }
            }
        }
    }
    Ok(worst)
}

fn run_mixer(m: &Mixer) -> impl Fn(&Tensor) -> Result<Tensor> + '_ {
    move |x| {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        Ok(m.forward(&mut tape, &v)?.into_tensor())
    }
}

fn equivariance_checks(opts: &Options) -> Vec<Check> {
    let r = Runner { opts };
    let n = opts.oracle_seeds.min(10);
    vec![
        r.check("equivariance_depthwise", 1e-6, n, |seed, fault| {
            let mut g = rng(seed, 500);
            let k = [3, 5, 7][g.gen_range(0..3)];
            let mut init = Init::new(seed);
            let mut m = Mixer::DwConv(DwConvMixer::new(&mut init, 4, k, false)?);
            randomize(&mut m, seed, 0.5);
            let x = uniform(&mut g, &[1, 16, 16, 4], 1.0);
            let (dy, dx) = (g.gen_range(1..4), g.gen_range(0..4));
            let r = k / 2;
            // receptive fields inside the map both before and after the shift
            let keep = |y: usize, x: usize| y >= r && x >= r && y + dy + r < 16 && x + dx + r < 16;
            let d = translation_deviation(&x, dy, dx, &run_mixer(&m), &keep)?;
            Ok(d + if fault { FAULT as f64 } else { 0.0 })
        }),
        r.check("equivariance_dwconv_mixer", 1e-6, n, |seed, fault| {
            let mut g = rng(seed, 501);
            let mut m = Mixer::DwConv(DwConvMixer::new(&mut Init::new(seed), 8, 7, true)?);
            randomize(&mut m, seed, 0.5);
            let x = uniform(&mut g, &[1, 16, 16, 8], 1.0);
            let (dy, dx) = (g.gen_range(0..5), g.gen_range(1..5));
            let keep = |y: usize, x: usize| y >= 3 && x >= 3 && y + dy + 3 < 16 && x + dx + 3 < 16;
            let d = translation_deviation(&x, dy, dx, &run_mixer(&m), &keep)?;
            Ok(d + if fault { FAULT as f64 } else { 0.0 })
        }),
        r.check("equivariance_halo", 1e-6, n, |seed, fault| {
            let mut g = rng(seed, 502);
            let (b, halo) = (4, g.gen_range(0..3));
            let mut m = Mixer::Halo(HaloAttention::new(&mut Init::new(seed), 8, 2, b, halo, WindowAnchor::Centered)?);
            randomize(&mut m, seed, 0.5);
            let x = uniform(&mut g, &[1, 16, 16, 8], 1.0);
            // interior blocks: the haloed window stays inside the map in both runs
            let keep = |y: usize, x: usize| (4..8).contains(&y) && (4..8).contains(&x);
            let d = translation_deviation(&x, b, b, &run_mixer(&m), &keep)?;
            Ok(d + if fault { FAULT as f64 } else { 0.0 })
        }),
        r.check("equivariance_window", 1e-6, n, |seed, fault| {
            let mut g = rng(seed, 503);
            let b = 4;
            let mut m = Mixer::Window(WindowAttention::new(&mut Init::new(seed), 8, 2, b, false)?);
            randomize(&mut m, seed, 0.5);
            let x = uniform(&mut g, &[1, 16, 16, 8], 1.0);
            let keep = |y: usize, x: usize| y < 12 && x < 12;
            let d = translation_deviation(&x, b, 2 * b, &run_mixer(&m), &keep)?;
            Ok(d + if fault { FAULT as f64 } else { 0.0 })
        }),
        r.check("attention_row_sums", 1e-6, n, |seed, fault| {
            // one-hot values expose the attention weights directly
            let mut g = rng(seed, 504);
            let (tq, tk, heads) = (9, 9, 2);
            let c = heads * tk;
            let q = uniform(&mut g, &[1, tq, c], 3.0);
            let k = uniform(&mut g, &[1, tk, c], 3.0);
            let v = Tensor::from_fn(&[1, tk, c], |i| ((i / c) == (i % c) % tk) as u8 as f32)?;
            let bias = AttnBias {
                rel: Some(Arc::new(uniform(&mut g, &[heads, tq, tk], 2.0))),
                mask: (seed % 2 == 1).then(|| Arc::new(shifted_window_mask(6, 6, 3, 1).reshape(&[4, 9, 9]).unwrap())),
            };
            let mut bias = bias;
            if let Some(m) = &bias.mask {
                bias.mask = Some(Arc::new(Tensor::new(&[1, 9, 9], m.data()[3 * 81..].to_vec())?));
            }
            let mut tape = Tape::inference();
            let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
            let p = tape.attention(&qv, &kv, &vv, heads, &bias)?.into_tensor();
            let mut worst = 0.0f64;
            for row in p.data().chunks(tk) {
                if row.iter().any(|&w| w < 0.0) {
                    return Ok(f64::INFINITY);
                }
                worst = worst.max((row.iter().map(|&w| w as f64).sum::<f64>() - 1.0).abs());
            }
            Ok(worst + if fault { FAULT as f64 } else { 0.0 })
        }),
        r.check("dcn_modulation_sums", 1e-6, n, |seed, fault| {
            let (mixer, x) = random_mixer(StmKind::Dcnv3, seed)?;
            let Mixer::Dcn(m) = &mixer else { unreachable!() };
            let mut tape = Tape::inference();
            let xv = tape.constant(x);
            let (_, w) = m.generate(&mut tape, &xv)?;
            let mut worst = 0.0f64;
            for row in w.value().data().chunks(ops::DCN_POINTS) {
                if row.iter().any(|&w| w < 0.0) {
                    return Ok(f64::INFINITY);
                }
                worst = worst.max((row.iter().map(|&w| w as f64).sum::<f64>() - 1.0).abs());
            }
            Ok(worst + if fault { FAULT as f64 } else { 0.0 })
        }),
    ]
}

// ---------------------------------------------------------------------------
// accounting

fn accounting_checks(opts: &Options) -> Vec<Check> {
    let r = Runner { opts };
    let exact = |got: u64, want: u64, fault: bool| -> f64 {
        let want = if fault { want + 1 } else { want };
        (got as f64 - want as f64).abs()
    };
    vec![
        r.check("macs_depthwise_counter", 0.0, opts.oracle_seeds.min(10), |seed, fault| {
            let mut g = rng(seed, 600);
            let (c, h, w) = (g.gen_range(1..6), g.gen_range(1..12), g.gen_range(1..12));
            let k = [1, 3, 5, 7][g.gen_range(0..4)];
            let dw = DepthwiseConv::new(&mut Init::new(seed), c, k);
            // count the multiply-accumulates of the naive tap loop
            let mut counter = 0u64;
            for _ch in 0..c {
                for _y in 0..h {
                    for _x in 0..w {
                        for _ky in 0..k {
                            for _kx in 0..k {
                                counter += 1;
                            }
                        }
                    }
                }
            }
            Ok(exact(dw.macs(h, w), counter, fault))
        }),
        r.check("macs_closed_forms", 0.0, 1, |_, fault| {
            let dw = DepthwiseConv::new(&mut Init::new(0), 64, 7);
            let lin = Linear::new(&mut Init::new(0), 4, 8);
            Ok(exact(dw.macs(56, 56), 9_834_496, fault) + exact(lin.num_params(), 40, false))
        }),
        r.check("macs_scaling", 0.0, 1, |_, fault| {
            // global attention: the token-token term grows 16x, projections 4x
            let m = SrAttention::new(&mut Init::new(0), 32, 1, 1)?;
            let (t, c) = (8u64 * 8, 32u64);
            let growth = m.macs(16, 16) - 4 * m.macs(8, 8);
            Ok(exact(growth, 12 * 2 * t * t * c, fault))
        }),
        r.check("macs_report_totals", 0.0, 1, |_, fault| {
            let model = Model::build(&tiny_config(StmKind::SwAttn, Variant::A), 0)?;
            let rep = count_macs(&model, 64);
            let parts: u64 = rep.entries.iter().map(|e| e.macs).sum();
            Ok(exact(rep.total_params(), model.num_params(), fault) + exact(rep.total_macs(), parts, false))
        }),
    ]
}

/// Builds a mixer of `kind` for stage `stage` of `config` (exposed for
/// tooling that inspects single mixers).
pub fn mixer_for(config: &ModelConfig, stage: usize, block: usize, seed: u64) -> Result<Mixer> {
    if stage >= 4 {
        return Err(Error::invalid(format!("stage {stage} out of range")));
    }
    build_mixer(&mut Init::new(seed), config, stage, block)
}
