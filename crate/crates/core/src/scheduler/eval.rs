use serde::Serialize;
use thiserror::Error;

use super::{schedule, MappingConfig, ScheduleError, ScheduleResult};
use crate::autodiff::TrainingGraph;
use crate::checkpoint::{apply_checkpoint_plan, CheckpointError, CheckpointPlan};
use crate::fusion::{fuse, FusionLimits};
use crate::graph::{ComputationGraph, NodeId};
use crate::hda::HdaSpec;

#[derive(Debug, Clone, PartialEq)]
pub enum FusionSetting {
    /// Layer by layer: every node is its own subgraph.
    Off,
    /// Solve for a minimum-count partition under these limits.
    Auto(FusionLimits),
    Manual(Vec<Vec<NodeId>>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub latency_cycles: u64,
    #[serde(rename = "energy_pJ")]
    pub energy_pj: f64,
    pub peak_activation_bytes: u64,
    pub partition: Vec<Vec<NodeId>>,
    /// False when the fusion solver fell back to its heuristic.
    pub exact: bool,
    pub schedule: ScheduleResult,
}

pub fn evaluate(
    g: &ComputationGraph,
    hda: &HdaSpec,
    mapping: &MappingConfig,
    fusion: &FusionSetting,
) -> Result<Evaluation, EvalError> {
    let (partition, exact) = match fusion {
        FusionSetting::Off => (g.nodes.keys().map(|n| vec![*n]).collect(), true),
        FusionSetting::Auto(limits) => {
            let p = fuse(g, hda, mapping, limits)?;
            (p.subgraphs, p.exact)
        }
        FusionSetting::Manual(p) => (p.clone(), true),
    };
    let s = schedule(g, &partition, hda, mapping)?;
    Ok(Evaluation {
        latency_cycles: s.latency_cycles,
        energy_pj: s.energy_pj,
        peak_activation_bytes: s.peak_activation_bytes,
        partition,
        exact,
        schedule: s,
    })
}

/// Rewrites the training graph with the plan, then evaluates it.
pub fn evaluate_with_plan(
    tg: &TrainingGraph,
    plan: &CheckpointPlan,
    hda: &HdaSpec,
    mapping: &MappingConfig,
    fusion: &FusionSetting,
) -> Result<Evaluation, EvalError> {
    let g = apply_checkpoint_plan(tg, plan)?;
    evaluate(&g, hda, mapping, fusion)
}
