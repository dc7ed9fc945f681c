use tokenmix_core::arch::{Block, Model, ModelConfig, Scale, Variant};
use tokenmix_core::checkpoint::Checkpoint;
use tokenmix_core::nn::{Init, Module};
use tokenmix_core::ops::{self, LAYER_NORM_EPS};
use tokenmix_core::stm::StmKind;
use tokenmix_core::{Error, Tape, Tensor};

fn small(stm: StmKind, variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::preset(stm, Scale::Micro);
    c.depths = [1, 2, 1, 1];
    c.num_classes = 10;
    c.variant = variant;
    c
}

fn input(n: usize, size: usize, seed: u64) -> Tensor {
    Init::new(seed).uniform(&[n, 3, size, size], -1.0, 1.0)
}

#[test]
fn stem_quarters_the_resolution() {
    let model = Model::build(&small(StmKind::DwConv, Variant::A), 0).unwrap();
    assert_eq!(model.config.widths[0], 32);
    assert_eq!(model.stem_forward(&input(2, 64, 1)).unwrap().shape(), [2, 32, 16, 16]);
    assert_eq!(model.stem_forward(&input(1, 224, 1)).unwrap().shape(), [1, 32, 56, 56]);
    assert!(model.stem_forward(&input(1, 66, 1)).is_err());
}

#[test]
fn stage_shapes_at_224() {
    let model = Model::build(&small(StmKind::SrAttn, Variant::A), 0).unwrap();
    let feats = model.forward_features(&input(1, 224, 2)).unwrap();
    let sides: Vec<usize> = feats.iter().map(|f| f.dim(2)).collect();
    assert_eq!(sides, [56, 28, 14, 7]);
    assert!(feats.iter().all(|f| f.data().iter().all(|v| v.is_finite())));
}

#[test]
fn indivisible_input_is_rejected() {
    let model = Model::build(&small(StmKind::DwConv, Variant::A), 0).unwrap();
    assert!(model.forward_features(&input(1, 48, 0)).is_err());
    assert!(model.forward_classify(&Tensor::zeros(&[1, 1, 64, 64]).unwrap()).is_err());
}

fn run_block(block: &Block, x: &Tensor) -> Tensor {
    let mut tape = Tape::inference();
    let v = tape.constant(x.clone());
    block.forward(&mut tape, &v).unwrap().into_tensor()
}

#[test]
fn zero_layer_scale_makes_blocks_identity() {
    for variant in [Variant::A, Variant::D] {
        let mut model = Model::build(&small(StmKind::Dcnv3, variant), 4).unwrap();
        let block = &mut model.stages[0].blocks[0];
        block.visit_mut("", &mut |name, t| {
            if name.starts_with("ls") {
                *t = Tensor::zeros(t.shape()).unwrap();
            }
        });
        let x = Init::new(5).uniform(&[1, 8, 8, 32], -1.0, 1.0);
        assert_eq!(run_block(block, &x), x);
    }
}

#[test]
fn zero_mixer_branch_leaves_only_the_mlp_residual() {
    let mut model = Model::build(&small(StmKind::SwAttn, Variant::A), 6).unwrap();
    let Block::Transformer { ls1, ls2, norm2, mlp, .. } = &mut model.stages[0].blocks[0] else {
        panic!("variant A uses two-residual blocks");
    };
    *ls1 = Tensor::zeros(ls1.shape()).unwrap();
    *ls2 = Tensor::full(ls2.shape(), 0.7).unwrap();
    let (norm2, mlp, ls2) = (norm2.clone(), mlp.clone(), ls2.clone());
    let x = Init::new(7).uniform(&[1, 7, 7, 32], -1.0, 1.0);
    let got = run_block(&model.stages[0].blocks[0], &x);
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let y = norm2.forward(&mut tape, &xv).unwrap();
    let y = mlp.forward(&mut tape, &y).unwrap();
    let y = tape.mul_channel(&y, &ls2).unwrap();
    let want = tape.add(&xv, &y).unwrap().into_tensor();
    assert!(got.max_abs_diff(&want).unwrap() < 1e-6);
}

#[test]
fn variant_c_differs_from_a_only_by_the_stage_norm() {
    let a = Model::build(&small(StmKind::DwConv, Variant::A), 8).unwrap();
    let c = Model::build(&small(StmKind::DwConv, Variant::C), 8).unwrap();
    let x = input(1, 64, 9);
    let fa = a.forward_features(&x).unwrap();
    let fc = c.forward_features(&x).unwrap();
    // stage 0: A's output is C's output passed through the (unit) stage norm
    let norm = a.stages[0].norm.as_ref().unwrap();
    let mut tape = Tape::inference();
    let v = tape.constant(fc[0].clone());
    let nhwc = tape.nchw_to_nhwc(&v).unwrap().into_tensor();
    let normed = ops::layer_norm(&nhwc, &norm.weight, &norm.bias, LAYER_NORM_EPS).unwrap();
    let v = tape.constant(normed);
    let want = tape.nhwc_to_nchw(&v).unwrap().into_tensor();
    assert!(fa[0].max_abs_diff(&want).unwrap() < 1e-5);
    assert!(c.stages.iter().all(|s| s.norm.is_none()));
}

#[test]
fn variants_a_and_b_agree_on_constant_input_only() {
    let a = Model::build(&small(StmKind::SrAttn, Variant::A), 10).unwrap();
    let b = Model::build(&small(StmKind::SrAttn, Variant::B), 10).unwrap();
    assert_eq!(Checkpoint::from_module(&a), Checkpoint::from_module(&b));
    // a constant image still varies spatially after the stem's zero padding,
    // so probe the head directly with a spatially constant last-stage map
    let constant = Tensor::from_fn(&[1, 2, 2, 256], |i| ((i % 256) as f32 * 0.37).sin()).unwrap();
    let random = Init::new(11).uniform(&[1, 2, 2, 256], -1.0, 1.0);
    let head = |m: &Model, x: &Tensor| {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        m.head.forward(&mut tape, &v).unwrap().into_tensor()
    };
    assert!(head(&a, &constant).max_abs_diff(&head(&b, &constant)).unwrap() < 1e-5);
    assert!(head(&a, &random).max_abs_diff(&head(&b, &random)).unwrap() > 1e-4);
    let x = input(1, 64, 12);
    assert_ne!(a.forward_classify(&x).unwrap(), b.forward_classify(&x).unwrap());
}

#[test]
fn classifier_contracts() {
    let mut config = small(StmKind::Dcnv3, Variant::E);
    config.num_classes = 1;
    let mut model = Model::build(&config, 13).unwrap();
    let x = input(1, 64, 14);
    let one = model.forward_classify(&x).unwrap();
    assert_eq!(one.shape(), [1, 1]);
    assert!(one.data()[0].is_finite());

    model.head.fc.weight = Tensor::zeros(model.head.fc.weight.shape()).unwrap();
    model.head.fc.bias = Some(Tensor::full(&[1], 0.25).unwrap());
    assert_eq!(model.forward_classify(&x).unwrap().data(), [0.25]);
}

#[test]
fn batches_are_independent() {
    for stm in StmKind::ALL {
        let model = Model::build(&small(stm, Variant::A), 15).unwrap();
        let a = input(1, 64, 16);
        let b = input(1, 64, 17);
        let mut both = a.data().to_vec();
        both.extend_from_slice(b.data());
        let batch = model.forward_classify(&Tensor::new(&[2, 3, 64, 64], both).unwrap()).unwrap();
        let la = model.forward_classify(&a).unwrap();
        let lb = model.forward_classify(&b).unwrap();
        let k = la.numel();
        let dev = |x: &[f32], y: &[f32]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        assert!(dev(&batch.data()[..k], la.data()) <= 1e-6, "{stm}");
        assert!(dev(&batch.data()[k..], lb.data()) <= 1e-6, "{stm}");

        let twice = Tensor::new(&[2, 3, 64, 64], [a.data(), a.data()].concat()).unwrap();
        let rows = model.forward_classify(&twice).unwrap();
        assert_eq!(rows.data()[..k], rows.data()[k..]);
    }
}

#[test]
fn builds_are_seeded() {
    let config = small(StmKind::HaloAttn(Default::default()), Variant::A);
    let bytes = |seed| Checkpoint::from_module(&Model::build(&config, seed).unwrap()).to_bytes().unwrap();
    assert_eq!(bytes(3), bytes(3));
    assert_ne!(bytes(3), bytes(4));
}

#[test]
fn initialization_contract() {
    let model = Model::build(&small(StmKind::Dcnv3, Variant::A), 5).unwrap();
    model.visit("", &mut |name, t| {
        if name.ends_with(".bias") && !name.contains("norm") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
        if name.ends_with("ls1") || name.ends_with("ls2") {
            assert!(t.data().iter().all(|&v| v == 1e-6), "{name}");
        }
        if name.contains("mixer.offset") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
        if name.ends_with("fc1.weight") {
            assert!(t.data().iter().all(|&v| v.abs() <= 0.04), "{name}");
        }
    });
}

#[test]
fn config_parsing() {
    let c = ModelConfig::from_toml("preset = \"tiny-swin\"\nvariant = \"C\"\nnum_classes = 7\n").unwrap();
    assert_eq!(c.variant, Variant::C);
    assert_eq!(c.num_classes, 7);
    assert_eq!(c.widths, ModelConfig::preset(StmKind::SwAttn, Scale::Tiny).widths);

    let back = ModelConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);

    match ModelConfig::from_toml("preset = \"micro-halo\"\nwidht = 3\n") {
        Err(Error::Config(msg)) => assert!(msg.contains("widht"), "{msg}"),
        other => panic!("expected a config error, got {other:?}"),
    }
    match ModelConfig::from_toml("preset = \"micro-halo\"\n[mixer]\nwindoww = 3\n") {
        Err(Error::Config(msg)) => assert!(msg.contains("windoww"), "{msg}"),
        other => panic!("expected a config error, got {other:?}"),
    }
    assert!(ModelConfig::from_toml("preset = \"micro-halo\"\nheads = [3, 2, 4, 8]\n").is_err());
    assert!(ModelConfig::from_toml("preset = \"huge-halo\"\n").is_err());
}
