//! Parameter and multiply-accumulate accounting.
//!
//! MACs follow closed-form per-operator formulas: a linear layer costs
//! `T·Cin·Cout`, a dense `k×k` convolution `Ho·Wo·Cout·Cin·k²`, a depthwise
//! one `C·H·W·k²`, attention `2·Tq·Tk·C` on top of its projections, and
//! deformable sampling `9·C·H·W` on top of its generator. Normalizations,
//! activations, softmax and pooling are not counted. One multiply-accumulate
//! is one unit.

use std::fmt::Write as _;

use crate::arch::{Model, Scale};
use crate::nn::Module;
use crate::stm::StmKind;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostEntry {
    pub module: String,
    pub params: u64,
    pub macs: u64,
}

/// Per-module parameter counts and MACs at a given square input size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub input_size: usize,
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    /// CSV with columns `module,params,macs` and a trailing `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("module,params,macs\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.module, e.params, e.macs);
        }
        let _ = writeln!(out, "total,{},{}", self.total_params(), self.total_macs());
        out
    }
}

/// Parameters and MACs at the model's configured input size.
pub fn count_params(model: &Model) -> CostReport {
    count_macs(model, model.config.input_size)
}

/// Parameters and MACs for a `size × size` input.
pub fn count_macs(model: &Model, size: usize) -> CostReport {
    let mut entries = Vec::new();
    let mut push = |module: String, part: &dyn Module, macs: u64| {
        entries.push(CostEntry {
            module,
            params: part.num_params(),
            macs,
        });
    };
    push("stem".into(), &model.stem, model.stem.macs(size, size));
    let mut side = model.stem.conv2.out_extent(model.stem.conv1.out_extent(size));
    for (i, stage) in model.stages.iter().enumerate() {
        if let Some(d) = &stage.downsample {
            let macs = d.conv.macs(side, side);
            side = d.conv.out_extent(side);
            push(format!("stages.{i}.downsample"), d, macs);
        }
        for (j, block) in stage.blocks.iter().enumerate() {
            push(format!("stages.{i}.blocks.{j}"), block, block.macs(side, side));
        }
        if let Some(n) = &stage.norm {
            push(format!("stages.{i}.norm"), n, 0);
        }
    }
    push("head".into(), &model.head, model.head.fc.macs(1));
    CostReport {
        input_size: size,
        entries,
    }
}

/// Target `(parameters in millions, GMACs at 224²)` for each standard preset.
pub fn preset_budget(stm: StmKind, scale: Scale) -> (f64, f64) {
    use Scale::*;
    match (stm, scale) {
        (StmKind::HaloAttn(_), Micro) => (4.4, 0.65),
        (StmKind::HaloAttn(_), Tiny) => (31.5, 4.75),
        (StmKind::HaloAttn(_), Small) => (52.8, 8.92),
        (StmKind::HaloAttn(_), Base) => (93.3, 15.84),
        (StmKind::SrAttn, Micro) => (4.3, 0.57),
        (StmKind::SrAttn, Tiny) => (30.8, 4.56),
        (StmKind::SrAttn, Small) => (50.5, 7.33),
        (StmKind::SrAttn, Base) => (91.1, 12.73),
        (StmKind::SwAttn, Micro) => (4.4, 0.71),
        (StmKind::SwAttn, Tiny) => (31.5, 4.91),
        (StmKind::SwAttn, Small) => (52.9, 9.18),
        (StmKind::SwAttn, Base) => (93.4, 16.18),
        (StmKind::DwConv, Micro) => (4.4, 0.65),
        (StmKind::DwConv, Tiny) => (31.9, 5.01),
        (StmKind::DwConv, Small) => (54.4, 9.40),
        (StmKind::DwConv, Base) => (95.8, 16.64),
        (StmKind::Dcnv3, Micro) => (4.3, 0.65),
        (StmKind::Dcnv3, Tiny) => (29.9, 4.83),
        (StmKind::Dcnv3, Small) => (50.1, 8.24),
        (StmKind::Dcnv3, Base) => (97.5, 16.08),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ModelConfig;

    #[test]
    fn totals_sum_parts_and_match_param_walk() {
        let cfg = ModelConfig::preset(StmKind::SwAttn, Scale::Micro);
        let model = Model::build(&cfg, 0).unwrap();
        let report = count_params(&model);
        assert_eq!(report.total_params(), model.num_params());
        assert_eq!(report.total_macs(), report.entries.iter().map(|e| e.macs).sum::<u64>());
        let csv = report.to_csv();
        assert!(csv.starts_with("module,params,macs\nstem,"));
        assert!(csv.trim_end().ends_with(&format!("total,{},{}", report.total_params(), report.total_macs())));
    }

    #[test]
    fn params_do_not_depend_on_input_size() {
        let model = Model::build(&ModelConfig::preset(StmKind::Dcnv3, Scale::Micro), 0).unwrap();
        assert_eq!(count_macs(&model, 64).total_params(), count_macs(&model, 224).total_params());
    }
}
