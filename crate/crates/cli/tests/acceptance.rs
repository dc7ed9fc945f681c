//! One line per acceptance criterion, each at its stated tolerance.

use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use tokenmix_core::arch::{Model, ModelConfig, Scale, Variant};
use tokenmix_core::checkpoint::{load_model, Checkpoint};
use tokenmix_core::erf::{erf_at_50, gradient_map, noise_images, ConvStack, FeatureProbe};
use tokenmix_core::invariance::{consistency_sweep, ConstantClassifier, TransformKind, TransformSpec};
use tokenmix_core::nn::Init;
use tokenmix_core::selftest::{self, Group, Options, Report};
use tokenmix_core::stm::{HaloVariant, StmKind};
use tokenmix_core::{Tape, Tensor};

type Outcome = Result<String, String>;

fn tokenmix(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokenmix")).args(args).current_dir(dir).output().unwrap()
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Reference budgets: `(preset, params in M, GMACs)`.
const BUDGETS: [(&str, f64, f64); 20] = [
    ("micro-halo", 4.4, 0.65),
    ("tiny-halo", 31.5, 4.75),
    ("small-halo", 52.8, 8.92),
    ("base-halo", 93.3, 15.84),
    ("micro-pvt", 4.3, 0.57),
    ("tiny-pvt", 30.8, 4.56),
    ("small-pvt", 50.5, 7.33),
    ("base-pvt", 91.1, 12.73),
    ("micro-swin", 4.4, 0.71),
    ("tiny-swin", 31.5, 4.91),
    ("small-swin", 52.9, 9.18),
    ("base-swin", 93.4, 16.18),
    ("micro-dwconv", 4.4, 0.65),
    ("tiny-dwconv", 31.9, 5.01),
    ("small-dwconv", 54.4, 9.40),
    ("base-dwconv", 95.8, 16.64),
    ("micro-dcnv3", 4.3, 0.65),
    ("tiny-dcnv3", 29.9, 4.83),
    ("small-dcnv3", 50.1, 8.24),
    ("base-dcnv3", 97.5, 16.08),
];

/// `name -> (params, macs)` from `describe --out` CSV.
fn describe(args: &[&str], dir: &Path) -> Result<Vec<(String, f64, f64)>, String> {
    let mut full = vec!["describe"];
    full.extend_from_slice(args);
    full.extend_from_slice(&["--out", "describe.csv"]);
    let o = tokenmix(&full, dir);
    check(o.status.success(), || format!("describe failed: {}", String::from_utf8_lossy(&o.stderr)))?;
    let csv = std::fs::read_to_string(dir.join("describe.csv")).map_err(|e| e.to_string())?;
    Ok(csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[4].parse().unwrap(), f[5].parse().unwrap())
        })
        .collect())
}

fn budgets() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let rows = describe(&["--all"], dir.path())?;
    check(rows.len() == 20, || format!("{} rows", rows.len()))?;
    let mut worst = 0.0f64;
    for (name, params_m, gmacs) in BUDGETS {
        let (_, params, macs) = rows.iter().find(|r| r.0 == name).ok_or(format!("{name} missing"))?;
        let dp = params / (params_m * 1e6) - 1.0;
        let dm = macs / (gmacs * 1e9) - 1.0;
        check(dp.abs() <= 0.10 && dm.abs() <= 0.10, || {
            format!("{name}: {:.2}M ({:+.1}%), {:.3}G ({:+.1}%)", params / 1e6, 100.0 * dp, macs / 1e9, 100.0 * dm)
        })?;
        worst = worst.max(dp.abs()).max(dm.abs());
    }
    Ok(format!("20 presets, worst deviation {:.1}%", 100.0 * worst))
}

fn group_report(group: Group) -> Report {
    selftest::run_group(group, &Options::default())
}

fn check_names(report: &Report, names: &[String], min_cases: usize, tol: f64) -> Result<(usize, f64), String> {
    let mut worst = 0.0f64;
    for name in names {
        let c = report.checks.iter().find(|c| &c.name == name).ok_or(format!("{name} missing"))?;
        check(c.error.is_none(), || format!("{name}: {:?}", c.error))?;
        check(c.cases >= min_cases, || format!("{name}: only {} cases", c.cases))?;
        check(c.max_dev <= tol, || format!("{name}: {:.3e} > {tol:e}", c.max_dev))?;
        worst = worst.max(c.max_dev);
    }
    Ok((names.len(), worst))
}

fn oracles() -> Outcome {
    let report = group_report(Group::MixerOracles);
    let names: Vec<String> = StmKind::ALL.iter().map(|&k| selftest::oracle_check_name(k).to_string()).collect();
    let (n, worst) = check_names(&report, &names, 20, 1e-5)?;
    Ok(format!("{n} mixers x 20 seeds, max |diff| {worst:.2e}"))
}

fn gradients() -> Outcome {
    let report = group_report(Group::Gradients);
    let mut names: Vec<String> = [
        "vjp_linear",
        "vjp_matmul",
        "vjp_elementwise",
        "vjp_softmax",
        "vjp_layer_norm",
        "vjp_depthwise_conv2d",
        "vjp_bilinear_sample",
        "vjp_layout",
        "vjp_attention",
        "vjp_deform_sample",
    ]
    .map(String::from)
    .to_vec();
    names.extend(StmKind::ALL.iter().map(|&k| selftest::gradient_check_name(k)));
    let (n, worst) = check_names(&report, &names, 10, 1e-3)?;
    check(report.passed(), || format!("failed: {:?}", report.failures().map(|c| &c.name).collect::<Vec<_>>()))?;
    Ok(format!("{n} graphs x 10 seeds, max rel err {worst:.2e}"))
}

fn equivariance() -> Outcome {
    let report = group_report(Group::Equivariance);
    let names = [
        "equivariance_depthwise",
        "equivariance_dwconv_mixer",
        "equivariance_halo",
        "equivariance_window",
        "attention_row_sums",
        "dcn_modulation_sums",
    ]
    .map(String::from);
    let (n, worst) = check_names(&report, &names, 1, 1e-6)?;
    Ok(format!("{n} properties, max deviation {worst:.2e}"))
}

/// Central differences of the centre-feature objective, summed over
/// channels, computed from forward passes only.
fn finite_difference_map(probe: &dyn FeatureProbe, img: &Tensor, stage: usize) -> Vec<f64> {
    let [c, h, w] = [img.dim(0), img.dim(1), img.dim(2)];
    let objective = |x: &Tensor| -> f64 {
        let mut tape = Tape::inference();
        let v = tape.constant(x.reshape(&[1, c, h, w]).unwrap());
        let out = probe.stage_output(&mut tape, &v, stage).unwrap().into_tensor();
        let [_, hs, ws, cs] = out.dims4().unwrap();
        let at = ((hs / 2) * ws + ws / 2) * cs;
        out.data()[at..at + cs].iter().map(|&v| v as f64).sum()
    };
    let step = 1e-2f32;
    let mut map = vec![0.0f64; h * w];
    let mut x = img.clone();
    for i in 0..img.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + step;
        let plus = objective(&x);
        x.data_mut()[i] = orig - step;
        let minus = objective(&x);
        x.data_mut()[i] = orig;
        map[i % (h * w)] += ((plus - minus) / (2.0 * step as f64)).abs();
    }
    map
}

fn erf_cases() -> Outcome {
    let img = noise_images(1, 3, 224, 0).remove(0);
    let delta = erf_at_50(&gradient_map(&ConvStack::ones(3, &[1]), &img, 0).map_err(|e| e.to_string())?).unwrap();
    check(delta == 1.0 / 224.0, || format!("identity ERF@50 {delta}"))?;
    let single = erf_at_50(&gradient_map(&ConvStack::ones(3, &[3]), &img, 0).unwrap()).unwrap();
    check(single == 3.0 / 224.0, || format!("3x3 ERF@50 {single}"))?;
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let probe = ConvStack::random(2, &[3, 3], seed);
        let img = noise_images(1, 2, 12, seed + 10).remove(0);
        let map = gradient_map(&probe, &img, 1).unwrap();
        let fd = finite_difference_map(&probe, &img, 1);
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for (&a, &b) in map.data().iter().zip(&fd) {
            diff += (a as f64 - b).powi(2);
            norm += b * b;
        }
        let rel = (diff / norm).sqrt();
        check(rel <= 1e-3, || format!("stacked seed {seed}: rel err {rel:.2e}"))?;
        worst = worst.max(rel);
    }
    Ok(format!("delta 1/224, 3x3 3/224, stacked vs FD rel err {worst:.2e}"))
}

fn invariance() -> Outcome {
    let grid = |kind| TransformSpec::standard(kind).magnitudes;
    check(grid(TransformKind::Translate) == [0.0, 8.0, 16.0, 24.0, 32.0, 40.0, 48.0, 56.0, 64.0], || "translate grid".into())?;
    check(grid(TransformKind::Rotate) == [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0], || "rotate grid".into())?;
    let scale: Vec<f64> = (1..=12).map(|i| i as f64 / 4.0).collect();
    check(grid(TransformKind::Scale) == scale, || "scale grid".into())?;

    let mut config = ModelConfig::preset(StmKind::SwAttn, Scale::Micro);
    config.depths = [1, 1, 1, 1];
    config.num_classes = 10;
    let model = Model::build(&config, 1).unwrap();
    let images = noise_images(2, 3, 96, 3);
    let constant = ConstantClassifier { logits: vec![0.2, 0.9, 0.1, 0.9] };
    for kind in TransformKind::ALL {
        let spec = TransformSpec::standard(kind);
        let report = consistency_sweep(&model, &images, None, &spec).map_err(|e| e.to_string())?;
        let identity = report.rows.iter().find(|r| r.magnitude == kind.identity_magnitude()).ok_or("no identity row")?;
        check(identity.consistency == 1.0, || format!("{kind} identity consistency {}", identity.consistency))?;
        let flat = consistency_sweep(&constant, &images, None, &spec).unwrap();
        check(flat.rows.iter().all(|r| r.consistency == 1.0), || format!("constant model under {kind}"))?;
    }
    Ok("grids 9/10/12, identity rows 1.0, constant model 1.0".into())
}

fn ablations() -> Outcome {
    let x = Init::new(5).uniform(&[1, 3, 64, 64], -1.0, 1.0);
    let forward = |config: &ModelConfig| -> Result<(), String> {
        let model = Model::build(config, 0).map_err(|e| format!("{}: {e}", config.name))?;
        let y = model.forward_classify(&x).map_err(|e| format!("{}: {e}", config.name))?;
        check(y.shape() == [1, config.num_classes] && y.data().iter().all(|v| v.is_finite()), || {
            format!("{} {:?}: bad logits", config.name, config.variant)
        })
    };
    let mut built = 0;
    for stm in StmKind::ALL {
        for variant in Variant::ALL {
            let mut config = ModelConfig::preset(stm, Scale::Micro);
            config.variant = variant;
            forward(&config)?;
            built += 1;
        }
    }
    for v in [HaloVariant::Switch, HaloVariant::OnePixel, HaloVariant::ShiftedQuery] {
        forward(&ModelConfig::preset(StmKind::HaloAttn(v), Scale::Micro))?;
        built += 1;
    }

    let dir = tempfile::tempdir().unwrap();
    let macs = |preset: &str| -> Result<f64, String> { Ok(describe(&["--preset", preset], dir.path())?[0].2) };
    let standard = macs("small-halo")?;
    let switch = macs("small-halo-switch")?;
    let one_px = macs("small-halo-1px")?;
    let shifted = macs("small-halo-shift")?;
    check(switch < standard && one_px < standard, || {
        format!("standard {standard:e}, switch {switch:e}, 1px {one_px:e}")
    })?;
    check(shifted > 0.0, || "shift variant reports no MACs".into())?;
    Ok(format!(
        "{built} models forward; small halo {:.2}G -> switch {:.2}G, 1px {:.2}G",
        standard / 1e9,
        switch / 1e9,
        one_px / 1e9
    ))
}

fn determinism(started: Instant) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let x = Init::new(11).uniform(&[2, 3, 64, 64], -1.0, 1.0);
    for stm in StmKind::ALL {
        let config = ModelConfig::preset(stm, Scale::Micro);
        let model = Model::build(&config, 3).unwrap();
        let path = dir.path().join(format!("{stm}.stmw"));
        Checkpoint::from_module(&model).save(&path).map_err(|e| e.to_string())?;
        let loaded = load_model(&config, &Checkpoint::load(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let (a, b) = (model.forward_classify(&x).unwrap(), loaded.forward_classify(&x).unwrap());
        check(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()), || format!("{stm} logits differ"))?;
    }

    let digest = |o: &Output| {
        String::from_utf8_lossy(&o.stdout).lines().find_map(|l| l.strip_prefix("probe_sha256 ").map(str::to_string))
    };
    let built = tokenmix(&["build", "--preset", "micro-halo", "--out", "m.stmw"], dir.path());
    let loaded = tokenmix(&["load", "--preset", "micro-halo", "--checkpoint", "m.stmw"], dir.path());
    check(built.status.success() && loaded.status.success(), || "CLI build/load failed".into())?;
    check(digest(&built).is_some() && digest(&built) == digest(&loaded), || "CLI probe digests differ".into())?;

    let selftest = tokenmix(&["selftest"], dir.path());
    let text = String::from_utf8_lossy(&selftest.stdout).into_owned();
    check(selftest.status.code() == Some(0), || format!("selftest exit {:?}\n{text}", selftest.status.code()))?;
    let elapsed = started.elapsed().as_secs_f64();
    check(elapsed < 300.0, || format!("acceptance suite took {elapsed:.0} s"))?;
    Ok(format!("5 STMs bit-identical, CLI digests match, {}", text.lines().last().unwrap_or("")))
}

#[test]
fn acceptance() {
    let started = Instant::now();
    let criteria: [(&str, f64, &dyn Fn() -> Outcome); 8] = [
        ("budget reproduction", 60.0, &budgets),
        ("oracle equivalence", 60.0, &oracles),
        ("gradient correctness", 120.0, &gradients),
        ("equivariance suite", f64::INFINITY, &equivariance),
        ("ERF analytic cases", 60.0, &erf_cases),
        ("invariance harness sanity", f64::INFINITY, &invariance),
        ("ablation coverage", f64::INFINITY, &ablations),
        ("end-to-end determinism", 300.0, &|| determinism(started)),
    ];
    let mut failed = Vec::new();
    for (name, limit, run) in criteria {
        let t = Instant::now();
        let outcome = run();
        let secs = t.elapsed().as_secs_f64();
        let outcome = outcome.and_then(|msg| {
            check(secs < limit, || format!("took {secs:.1} s, limit {limit} s")).map(|_| msg)
        });
        match outcome {
            Ok(msg) => println!("PASS {name:<26} {msg} ({secs:.1} s)"),
            Err(msg) => {
                println!("FAIL {name:<26} {msg} ({secs:.1} s)");
                failed.push(name);
            }
        }
    }
    println!("acceptance total {:.1} s", started.elapsed().as_secs_f64());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
