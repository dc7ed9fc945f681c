use tokenmix_core::arch::{Model, ModelConfig, Scale};
use tokenmix_core::invariance::{
    argmax, consistency_sweep, rotate_image, scale_image, translate_image, CenterPixelClassifier, Classifier,
    ConstantClassifier, TransformKind, TransformSpec,
};
use tokenmix_core::nn::{randomize, Init};
use tokenmix_core::ops::PadMode;
use tokenmix_core::stm::{DwConvMixer, Mixer, StmKind};
use tokenmix_core::{Result, Tape, Tensor};

fn smooth(c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        ((y as f32 * 0.11 + ch as f32).sin() + (x as f32 * 0.07).cos()) * 0.5
    })
    .unwrap()
}

fn mean_abs_where(a: &Tensor, b: &Tensor, keep: impl Fn(usize, usize) -> bool) -> f64 {
    let [h, w] = [a.dim(1), a.dim(2)];
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (i, (&p, &q)) in a.data().iter().zip(b.data()).enumerate() {
        if keep((i / w) % h, i % w) {
            sum += (p - q).abs() as f64;
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn grids_match_the_sweep_definitions() {
    let t = TransformSpec::standard(TransformKind::Translate);
    assert_eq!(t.magnitudes, (0..9).map(|i| 8.0 * i as f64).collect::<Vec<_>>());
    let r = TransformSpec::standard(TransformKind::Rotate);
    assert_eq!(r.magnitudes, (0..10).map(|i| 5.0 * i as f64).collect::<Vec<_>>());
    let s = TransformSpec::standard(TransformKind::Scale);
    assert_eq!(s.magnitudes, (1..=12).map(|i| 0.25 * i as f64).collect::<Vec<_>>());
    for spec in [t, r, s] {
        assert_eq!(spec.fill, 0.0);
        spec.validate().unwrap();
    }
}

#[test]
fn translation_contracts() {
    let img = Init::new(0).uniform(&[2, 16, 16], -1.0, 1.0);
    let back = translate_image(&translate_image(&img, 3, 5, 0.0).unwrap(), -3, -5, 0.0).unwrap();
    assert_eq!(mean_abs_where(&img, &back, |y, x| y < 13 && x < 11), 0.0);

    let constant = Tensor::full(&[1, 10, 10], 2.0).unwrap();
    let moved = translate_image(&constant, 9, 0, -1.0).unwrap();
    for y in 0..10 {
        for x in 0..10 {
            assert_eq!(moved.data()[y * 10 + x], if y == 9 { 2.0 } else { -1.0 });
        }
    }
    assert!(translate_image(&constant, 0, -10, 0.0).is_err());
}

#[test]
fn rotation_contracts() {
    let constant = Tensor::full(&[1, 33, 33], 0.8).unwrap();
    let disk = |y: usize, x: usize| ((y as f64 - 16.0).powi(2) + (x as f64 - 16.0).powi(2)).sqrt() <= 15.0;
    for deg in [5.0, 30.0, 45.0, -120.0] {
        let r = rotate_image(&constant, deg, 0.0).unwrap();
        assert!(mean_abs_where(&r, &constant, disk) < 1e-6, "{deg}");
    }
    let img = smooth(3, 48, 48);
    let disk = |y: usize, x: usize| ((y as f64 - 23.5).powi(2) + (x as f64 - 23.5).powi(2)).sqrt() <= 20.0;
    for deg in [5.0, 20.0, 45.0] {
        let back = rotate_image(&rotate_image(&img, deg, 0.0).unwrap(), -deg, 0.0).unwrap();
        assert!(mean_abs_where(&img, &back, disk) <= 2e-2, "{deg}");
    }
    // a quarter turn moves the top-right corner to the top-left corner
    let mut corner = Tensor::zeros(&[1, 5, 5]).unwrap();
    corner.data_mut()[4] = 1.0;
    let turned = rotate_image(&corner, 90.0, 0.0).unwrap();
    assert!((turned.data()[0] - 1.0).abs() < 1e-5);
}

#[test]
fn scale_contracts() {
    let constant = Tensor::full(&[1, 20, 20], 0.3).unwrap();
    let zoomed = scale_image(&constant, 2.0, 0.0).unwrap();
    assert!(zoomed.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));

    let ramp = Tensor::from_fn(&[1, 32, 32], |i| ((i / 32) + (i % 32)) as f32 / 64.0).unwrap();
    let back = scale_image(&scale_image(&ramp, 0.5, 0.0).unwrap(), 2.0, 0.0).unwrap();
    assert!(mean_abs_where(&ramp, &back, |y, x| (8..24).contains(&y) && (8..24).contains(&x)) <= 5e-2);

    let shrunk = scale_image(&constant, 0.5, 0.0).unwrap();
    assert_eq!(shrunk.data()[0], 0.0);
    assert!((shrunk.data()[10 * 20 + 10] - 0.3).abs() < 1e-6);
}

#[test]
fn argmax_prefers_the_lowest_index() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[0.0, 0.0]), 0);
}

#[test]
fn model_sweeps_start_at_one_and_are_deterministic() {
    let mut config = ModelConfig::preset(StmKind::DwConv, Scale::Micro);
    config.depths = [1, 1, 1, 1];
    config.num_classes = 10;
    let model = Model::build(&config, 3).unwrap();
    let images: Vec<Tensor> = (0..2).map(|i| Init::new(i).uniform(&[3, 64, 64], -1.0, 1.0)).collect();
    let labels = [0usize, 7];
    for kind in TransformKind::ALL {
        let mut spec = TransformSpec::standard(kind);
        if kind == TransformKind::Translate {
            spec.magnitudes.truncate(8);
        }
        let report = consistency_sweep(&model, &images, Some(&labels), &spec).unwrap();
        let identity = report.rows.iter().find(|r| r.magnitude == kind.identity_magnitude()).unwrap();
        assert_eq!(identity.consistency, 1.0);
        for row in &report.rows {
            assert!((0.0..=1.0).contains(&row.consistency));
            assert!((0.0..=1.0).contains(&row.accuracy.unwrap()));
            assert_eq!(row.n, 2);
        }
        assert_eq!(consistency_sweep(&model, &images, Some(&labels), &spec).unwrap(), report);
        let csv = report.to_csv();
        assert!(csv.starts_with("transform,magnitude,consistency,accuracy,n\n"));
        assert_eq!(csv.lines().count(), spec.magnitudes.len() + 1);
        assert!(csv.lines().nth(1).unwrap().starts_with(kind.label()));
    }
    assert_eq!(TransformKind::Scale.label(), "scale-adapted");
}

#[test]
fn constant_classifier_is_always_consistent() {
    let clf = ConstantClassifier { logits: vec![0.1, 0.5, 0.2] };
    let images: Vec<Tensor> = (0..3).map(|i| Init::new(i).uniform(&[3, 96, 96], -1.0, 1.0)).collect();
    for kind in TransformKind::ALL {
        let report = consistency_sweep(&clf, &images, None, &TransformSpec::standard(kind)).unwrap();
        assert!(report.rows.iter().all(|r| r.consistency == 1.0 && r.accuracy.is_none()));
    }
    assert!(consistency_sweep(&clf, &[], None, &TransformSpec::standard(TransformKind::Rotate)).is_err());
}

#[test]
fn centre_pixel_classifier_matches_enumeration() {
    let clf = CenterPixelClassifier { threshold: 0.0 };
    let images: Vec<Tensor> = (0..12).map(|i| Init::new(100 + i).uniform(&[3, 32, 32], -1.0, 1.0)).collect();
    let spec = TransformSpec { kind: TransformKind::Translate, magnitudes: vec![0.0, 8.0], fill: 0.0 };
    let report = consistency_sweep(&clf, &images, None, &spec).unwrap();

    // the translated image's centre pixel is the original pixel 8 px away
    let label = |v: f32| (v > 0.0) as usize;
    let mut agree = 0.0;
    for img in &images {
        let at = |y: usize, x: usize| img.data()[y * 32 + x];
        let base = label(at(16, 16));
        let moved = [at(8, 16), at(24, 16), at(16, 8), at(16, 24)];
        agree += moved.iter().filter(|&&v| label(v) == base).count() as f64 / 4.0;
    }
    assert_eq!(report.rows[0].consistency, 1.0);
    assert_eq!(report.rows[1].consistency, agree / images.len() as f64);
}

/// A cyclic-padded depthwise mixer followed by global average pooling; the
/// pooled channels are the logits.
struct CyclicPool {
    mixer: Mixer,
}

impl CyclicPool {
    fn new(seed: u64) -> Self {
        let mut m = DwConvMixer::new(&mut Init::new(seed), 4, 5, true).unwrap();
        m.dw.pad_mode = PadMode::Cyclic;
        let mut mixer = Mixer::DwConv(m);
        randomize(&mut mixer, seed, 0.5);
        Self { mixer }
    }

    fn pooled(&self, batch: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = batch.dims4()?;
        let mut tape = Tape::inference();
        let x = tape.constant(batch.clone());
        let x = tape.nchw_to_nhwc(&x)?;
        let y = self.mixer.forward(&mut tape, &x)?;
        let t = tape.reshape(&y, &[n, h * w, c])?;
        Ok(tape.mean_tokens(&t)?.into_tensor())
    }
}

impl Classifier for CyclicPool {
    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.pooled(batch)
    }
}

#[test]
fn cyclic_conv_with_pooling_is_translation_invariant() {
    let model = CyclicPool::new(4);
    // content confined to the centre, so a zero-fill shift is a cyclic shift
    let images: Vec<Tensor> = (0..6)
        .map(|i| {
            let noise = Init::new(200 + i).uniform(&[4, 32, 32], -1.0, 1.0);
            Tensor::from_fn(&[4, 32, 32], |j| {
                let (y, x) = ((j / 32) % 32, j % 32);
                if (8..24).contains(&y) && (8..24).contains(&x) { noise.data()[j] } else { 0.0 }
            })
            .unwrap()
        })
        .collect();
    for img in &images {
        let base = model.pooled(&img.reshape(&[1, 4, 32, 32]).unwrap()).unwrap();
        for (dy, dx) in [(4, 0), (-8, 0), (0, 8), (3, -5)] {
            let moved = translate_image(img, dy, dx, 0.0).unwrap();
            let pooled = model.pooled(&moved.reshape(&[1, 4, 32, 32]).unwrap()).unwrap();
            let d = pooled.max_abs_diff(&base).unwrap();
            assert!(d <= 1e-6, "{d} at {dy},{dx}");
        }
    }
    let spec = TransformSpec { kind: TransformKind::Translate, magnitudes: vec![0.0, 1.0, 4.0, 8.0], fill: 0.0 };
    let report = consistency_sweep(&model, &images, None, &spec).unwrap();
    assert!(report.rows.iter().all(|r| r.consistency == 1.0), "{report:?}");
}
