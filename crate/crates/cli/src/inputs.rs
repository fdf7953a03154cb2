use std::path::Path;

use serde::Deserialize;
use trainsim_core::autodiff::{build_training_graph, LossSpec, OptimizerSpec, TrainingGraph};
use trainsim_core::checkpoint::{chain_workload, CheckpointPlan};
use trainsim_core::fusion::FusionLimits;
use trainsim_core::graph::{ComputationGraph, LossKind, NodeId, Phase};
use trainsim_core::hda::{load_hda_spec, template, HdaSpec};
use trainsim_core::scheduler::{FusionSetting, MappingConfig};
use trainsim_core::workloads::{builtin, import_workload};

use crate::manifest::Manifest;
use crate::{CliError, CliResult, Common};

pub const PROBE_CHAIN: &str = "probe-chain";

pub fn read(path: &Path, m: &mut Manifest) -> CliResult<String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    m.input_file(path, text.as_bytes());
    Ok(text)
}

pub enum Workload {
    Forward(ComputationGraph),
    Training(TrainingGraph),
}

impl Workload {
    pub fn graph(&self) -> &ComputationGraph {
        match self {
            Workload::Forward(g) => g,
            Workload::Training(tg) => &tg.graph,
        }
    }
}

pub fn workload(name: &str, m: &mut Manifest) -> CliResult<Workload> {
    if name == PROBE_CHAIN {
        m.input_builtin(name);
        return Ok(Workload::Training(chain_workload()));
    }
    if let Some(g) = builtin(name) {
        m.input_builtin(name);
        return Ok(Workload::Forward(g));
    }
    let text = read(Path::new(name), m)?;
    let g = import_workload(&text).map_err(|e| CliError::Input(format!("{name}: {e}")))?;
    if g.nodes.values().all(|n| n.phase == Phase::Forward) {
        Ok(Workload::Forward(g))
    } else {
        TrainingGraph::from_graph(g)
            .map(Workload::Training)
            .map_err(|e| CliError::Input(format!("{name}: {e}")))
    }
}

pub fn optimizer(name: &str) -> CliResult<Option<OptimizerSpec>> {
    match name {
        "sgd" => Ok(Some(OptimizerSpec::sgd())),
        "adam" => Ok(Some(OptimizerSpec::adam())),
        "none" => Ok(None),
        _ => Err(CliError::Usage(format!(
            "--optimizer must be sgd, adam or none, got {name:?}"
        ))),
    }
}

pub fn loss(name: &str) -> CliResult<LossSpec> {
    let kind = match name {
        "cross-entropy" => LossKind::CrossEntropyWithSoftmax,
        "mse" => LossKind::MeanSquaredError,
        _ => {
            return Err(CliError::Usage(format!(
                "--loss must be cross-entropy or mse, got {name:?}"
            )))
        }
    };
    Ok(LossSpec { kind, target: None })
}

/// The workload as a training graph, differentiating a forward graph with
/// the common `--loss` and `--optimizer` flags.
pub fn training(w: Workload, c: &Common) -> CliResult<TrainingGraph> {
    match w {
        Workload::Training(tg) => Ok(tg),
        Workload::Forward(g) => build_training_graph(&g, loss(&c.loss)?, optimizer(&c.optimizer)?)
            .map_err(CliError::input),
    }
}

pub fn hardware(name: &str, m: &mut Manifest) -> CliResult<HdaSpec> {
    if let Some(h) = template(name) {
        m.input_builtin(name);
        return Ok(h);
    }
    let text = read(Path::new(name), m)?;
    load_hda_spec(&text).map_err(|e| CliError::Input(format!("{name}: {e}")))
}

pub fn mapping(arg: &str, m: &mut Manifest) -> CliResult<MappingConfig> {
    if arg == "auto" {
        return Ok(MappingConfig::default());
    }
    let text = read(Path::new(arg), m)?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{arg}: {e}")))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PartitionFile {
    Bare(Vec<Vec<NodeId>>),
    Wrapped { subgraphs: Vec<Vec<NodeId>> },
}

pub fn fusion(arg: &str, m: &mut Manifest) -> CliResult<FusionSetting> {
    if arg == "off" {
        return Ok(FusionSetting::Off);
    }
    if let Some(n) = arg.strip_prefix("auto:") {
        let n: usize =
            n.parse().ok().filter(|n| *n >= 1).ok_or_else(|| {
                CliError::Usage(format!("--fusion auto:N needs N >= 1, got {arg:?}"))
            })?;
        return Ok(FusionSetting::Auto(FusionLimits::with_max_len(n)));
    }
    if let Some(path) = arg.strip_prefix("manual:") {
        let text = read(Path::new(path), m)?;
        let p: PartitionFile =
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{path}: {e}")))?;
        return Ok(FusionSetting::Manual(match p {
            PartitionFile::Bare(s) | PartitionFile::Wrapped { subgraphs: s } => s,
        }));
    }
    Err(CliError::Usage(format!(
        "--fusion must be off, auto:N or manual:FILE, got {arg:?}"
    )))
}

pub fn plan(path: &Path, m: &mut Manifest) -> CliResult<CheckpointPlan> {
    let text = read(path, m)?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}
