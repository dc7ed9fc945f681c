//! Resolving `--config` / `--preset` / `--checkpoint` into something to run.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use tokenmix_core::arch::{Model, ModelConfig, Normalization};
use tokenmix_core::checkpoint::{load_model, Checkpoint};
use tokenmix_core::erf::ConvStack;
use tokenmix_core::imageio;
use tokenmix_core::Tensor;

use crate::{CliError, CliResult, ModelArgs};

/// A toy probe for ERF runs: a stack of stride-1 depthwise convolutions.
///
/// ```toml
/// [conv_stack]
/// channels = 1
/// kernels = [3, 3]
/// init = "ones"      # or "random"
/// input_size = 32
/// ```
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeFile {
    conv_stack: ConvStackConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvStackConfig {
    channels: usize,
    kernels: Vec<usize>,
    #[serde(default)]
    init: KernelInit,
    #[serde(default = "default_probe_size")]
    input_size: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KernelInit {
    #[default]
    Ones,
    Random,
}

fn default_probe_size() -> usize {
    32
}

pub enum Probe {
    Model(Box<Model>),
    Stack { stack: ConvStack, input_size: usize },
}

pub fn model_config(config: Option<&Path>, preset: Option<&str>) -> CliResult<ModelConfig> {
    match (config, preset) {
        (Some(path), _) => Ok(ModelConfig::from_toml(&read_text(path)?)?),
        (None, Some(name)) => Ok(ModelConfig::preset_by_name(name)?),
        (None, None) => Err(CliError::Usage("one of --config or --preset is required".into())),
    }
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Builds (or loads) the model named by `args`.
pub fn model(args: &ModelArgs) -> CliResult<Model> {
    let config = model_config(args.config.as_deref(), args.preset.as_deref())?;
    match &args.checkpoint {
        Some(path) => Ok(load_model(&config, &Checkpoint::load(path)?)?),
        None => Ok(Model::build(&config, args.seed)?),
    }
}

/// Like [`model`], but a config file may instead describe a conv-stack probe.
pub fn probe(args: &ModelArgs) -> CliResult<Probe> {
    if let Some(path) = &args.config {
        let text = read_text(path)?;
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
        if table.contains_key("conv_stack") {
            let file: ProbeFile =
                toml::from_str(&text).map_err(|e| CliError::Usage(format!("config: {}", e.message())))?;
            let c = file.conv_stack;
            if c.channels == 0 || c.kernels.is_empty() || c.kernels.iter().any(|k| k % 2 == 0) {
                return Err(CliError::Usage("config: conv_stack needs channels > 0 and odd kernels".into()));
            }
            let stack = match c.init {
                KernelInit::Ones => ConvStack::ones(c.channels, &c.kernels),
                KernelInit::Random => ConvStack::random(c.channels, &c.kernels, args.seed),
            };
            return Ok(Probe::Stack { stack, input_size: c.input_size });
        }
    }
    Ok(Probe::Model(Box::new(model(args)?)))
}

/// Images from a directory, normalized with `norm`.
pub fn load_images(dir: &Path, norm: &Normalization) -> CliResult<(Vec<PathBuf>, Vec<Tensor>)> {
    let files = imageio::list_images(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    if files.is_empty() {
        return Err(CliError::Usage(format!("no images in {}", dir.display())));
    }
    let images = files.iter().map(|f| imageio::load_image(f, norm)).collect::<Result<Vec<_>, _>>()?;
    Ok((files, images))
}

pub fn load_labels(path: &Path) -> CliResult<Vec<usize>> {
    read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.parse().map_err(|_| CliError::Usage(format!("{}: bad label `{l}`", path.display()))))
        .collect()
}
