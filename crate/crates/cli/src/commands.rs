use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use tokenmix_core::accounting::count_params;
use tokenmix_core::arch::{Model, ModelConfig};
use tokenmix_core::checkpoint::{load_model, write_atomic, Checkpoint};
use tokenmix_core::erf::{erf_suite, noise_images, reports_to_csv, FeatureProbe};
use tokenmix_core::imageio;
use tokenmix_core::invariance::{consistency_sweep, TransformKind, TransformSpec};
use tokenmix_core::nn::{Init, Module};
use tokenmix_core::selftest;
use tokenmix_core::Tensor;

use crate::source::{self, Probe};
use crate::{BuildArgs, CliError, CliResult, DescribeArgs, ErfArgs, InvarianceArgs, LoadArgs, SelftestArgs};

/// Side of the seeded probe image used to fingerprint a model.
const PROBE_SIZE: usize = 64;
const PROBE_SEED: u64 = 0;

pub const DESCRIBE_HEADER: &str = "name,model,stm,variant,params,flops,shape_trace";

fn write_out(path: &Path, bytes: &[u8]) -> CliResult<()> {
    write_atomic(path, bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

struct Description {
    config: ModelConfig,
    params: u64,
    macs: u64,
    trace: Vec<[usize; 3]>,
}

fn describe_one(config: ModelConfig) -> CliResult<Description> {
    let model = Model::build(&config, 0)?;
    let cost = count_params(&model);
    let trace = model.shape_trace(config.input_size).into_iter().map(|(_, [_, c, h, w])| [c, h, w]).collect();
    Ok(Description {
        params: cost.total_params(),
        macs: cost.total_macs(),
        trace,
        config,
    })
}

pub fn describe(args: &DescribeArgs) -> CliResult<()> {
    let configs = if args.all {
        ModelConfig::standard_presets()
    } else {
        vec![source::model_config(args.config.as_deref(), args.preset.as_deref())?]
    };
    let rows = configs.into_iter().map(describe_one).collect::<CliResult<Vec<_>>>()?;

    let mut table = format!(
        "{:<20} {:<18} {:<12} {:<7} {:>9} {:>9}  shape trace (CxHxW: stem, stages)\n",
        "name", "model", "stm", "variant", "#Params", "FLOPs"
    );
    let mut csv = format!("{DESCRIBE_HEADER}\n");
    for d in &rows {
        let trace: Vec<String> = d.trace.iter().map(|[c, h, w]| format!("{c}x{h}x{w}")).collect();
        let _ = writeln!(
            table,
            "{:<20} {:<18} {:<12} {:<7} {:>8.2}M {:>8.3}G  {}",
            d.config.name,
            d.config.model_name(),
            d.config.stm.to_string(),
            d.config.variant.to_string(),
            d.params as f64 / 1e6,
            d.macs as f64 / 1e9,
            trace.join(" > ")
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            d.config.name,
            d.config.model_name(),
            d.config.stm,
            d.config.variant,
            d.params,
            d.macs,
            trace.join(";")
        );
    }
    print!("{table}");
    if let Some(path) = &args.out {
        write_out(path, csv.as_bytes())?;
    }
    Ok(())
}

/// SHA-256 of the logits for a fixed noise image.
fn probe_digest(model: &Model) -> CliResult<String> {
    let x = Init::new(PROBE_SEED).uniform(&[1, 3, PROBE_SIZE, PROBE_SIZE], -1.0, 1.0);
    let logits = model.forward_classify(&x)?;
    let mut hasher = Sha256::new();
    for v in logits.data() {
        hasher.update(v.to_le_bytes());
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn build(args: &BuildArgs) -> CliResult<()> {
    let config = source::model_config(args.config.as_deref(), args.preset.as_deref())?;
    let model = Model::build(&config, args.seed)?;
    let bytes = Checkpoint::from_module(&model).to_bytes()?;
    write_out(&args.out, &bytes)?;
    println!("name {}", config.name);
    println!("params {}", model.num_params());
    println!("checkpoint {}", args.out.display());
    println!("probe_sha256 {}", probe_digest(&model)?);
    Ok(())
}

pub fn load(args: &LoadArgs) -> CliResult<()> {
    let config = source::model_config(args.config.as_deref(), args.preset.as_deref())?;
    let checkpoint = Checkpoint::load(&args.checkpoint).map_err(|e| match e {
        tokenmix_core::Error::Io(io) => CliError::Usage(format!("{}: {io}", args.checkpoint.display())),
        other => other.into(),
    })?;
    let model = load_model(&config, &checkpoint)?;
    println!("name {}", config.name);
    println!("params {}", model.num_params());
    println!("tensors {}", checkpoint.tensors.len());
    println!("probe_sha256 {}", probe_digest(&model)?);
    Ok(())
}

pub fn erf(args: &ErfArgs) -> CliResult<()> {
    let probe = source::probe(&args.model)?;
    let (fp, size, norm): (&dyn FeatureProbe, usize, _) = match &probe {
        Probe::Model(m) => (m.as_ref(), m.config.input_size, m.config.normalization.clone()),
        Probe::Stack { stack, input_size } => (stack, *input_size, Default::default()),
    };
    let images = match (&args.images, args.noise) {
        (Some(dir), _) => source::load_images(dir, &norm)?.1,
        (None, Some(n)) if n > 0 => noise_images(n, fp.input_channels(), size, args.model.seed),
        _ => return Err(CliError::Usage("erf needs --images DIR or --noise N (N > 0)".into())),
    };
    let stages = if args.stages.is_empty() {
        match &probe {
            Probe::Model(_) => vec![2, 3],
            Probe::Stack { stack, .. } => (0..stack.num_stages()).collect(),
        }
    } else {
        args.stages.clone()
    };
    if let Some(&s) = stages.iter().find(|&&s| s >= fp.num_stages()) {
        return Err(CliError::Usage(format!("stage {s} out of range 0..{}", fp.num_stages())));
    }

    let reports = erf_suite(fp, &images, &stages)?;
    let csv = reports_to_csv(&reports);
    print!("{csv}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
        write_out(&dir.join("erf.csv"), csv.as_bytes())?;
        for r in &reports {
            write_out(&dir.join(format!("stage{}.pgm", r.stage)), &imageio::encode_pgm(&r.map, args.log_scale)?)?;
            let [h, w] = r.raw.dims2()?;
            let raw = imageio::encode_raw(&r.raw.reshape(&[1, h, w])?)?;
            write_out(&dir.join(format!("stage{}_raw.f32", r.stage)), &raw)?;
        }
    }
    Ok(())
}

pub fn invariance(args: &InvarianceArgs) -> CliResult<()> {
    let model = source::model(&args.model)?;
    let size = model.config.input_size;
    let images: Vec<Tensor> = match (&args.images, args.noise) {
        (Some(dir), _) => source::load_images(dir, &model.config.normalization)?.1,
        (None, Some(n)) if n > 0 => noise_images(n, 3, size, args.model.seed),
        _ => return Err(CliError::Usage("invariance needs --images DIR or --noise N (N > 0)".into())),
    };
    let labels = args.labels.as_deref().map(source::load_labels).transpose()?;
    let kinds = match args.transform {
        Some(k) => vec![k],
        None => TransformKind::ALL.to_vec(),
    };
    let mut csv = String::from("transform,magnitude,consistency,accuracy,n\n");
    for kind in kinds {
        let report = consistency_sweep(&model, &images, labels.as_deref(), &TransformSpec::standard(kind))?;
        csv.push_str(&report.csv_rows());
    }
    print!("{csv}");
    if let Some(path) = &args.out {
        write_out(path, csv.as_bytes())?;
    }
    Ok(())
}

pub fn selftest(args: &SelftestArgs) -> CliResult<()> {
    let opts = selftest::Options {
        inject_fault: args.inject_fault.clone(),
        ..Default::default()
    };
    let report = if args.group.is_empty() {
        selftest::run(&opts)
    } else {
        let checks = args.group.iter().flat_map(|&g| selftest::run_group(g.into(), &opts).checks).collect();
        selftest::Report { checks }
    };
    let text = report.to_text();
    print!("{text}");
    if let Some(path) = &args.out {
        write_out(path, text.as_bytes())?;
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<String> = report.failures().map(|c| c.name.clone()).collect();
        Err(CliError::CheckFailed(format!("failed checks: {}", names.join(", "))))
    }
}
