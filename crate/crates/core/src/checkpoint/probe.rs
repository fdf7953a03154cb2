use std::collections::BTreeMap;

use serde::Serialize;

use super::{CheckpointError, CheckpointPlan};
use crate::autodiff::{build_training_graph, LossSpec, OptimizerSpec, TrainingGraph};
use crate::fusion::FusionLimits;
use crate::graph::{topological_order, ComputationGraph, EdgeId, EdgeKind, OpKind, Phase};
use crate::hda::HdaSpec;
use crate::scheduler::{evaluate_with_plan, EvalError, FusionSetting, MappingConfig};

/// Change relative to the all-saved baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Delta {
    pub latency_cycles: i64,
    #[serde(rename = "energy_pJ")]
    pub energy_pj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    /// `(first, second)`: AC10 recomputes `first`, AC01 recomputes `second`.
    pub activations: (EdgeId, EdgeId),
    pub baseline_latency_cycles: u64,
    #[serde(rename = "baseline_energy_pJ")]
    pub baseline_energy_pj: f64,
    pub ac10: Delta,
    pub ac01: Delta,
    pub ac11: Delta,
}

impl ProbeReport {
    /// `Δ(AC11) - Δ(AC10) - Δ(AC01)`; zero if recompute costs were additive.
    pub fn interaction(&self) -> Delta {
        Delta {
            latency_cycles: self.ac11.latency_cycles
                - self.ac10.latency_cycles
                - self.ac01.latency_cycles,
            energy_pj: self.ac11.energy_pj - self.ac10.energy_pj - self.ac01.energy_pj,
        }
    }

    /// `|interaction latency|` as a fraction of the baseline latency.
    pub fn relative_latency_interaction(&self) -> f64 {
        self.interaction().latency_cycles.unsigned_abs() as f64
            / self.baseline_latency_cycles.max(1) as f64
    }
}

/// The first two activations with a producer, in topological order of
/// their producers. External inputs are skipped since discarding them
/// changes nothing.
pub fn default_probe_pair(tg: &TrainingGraph) -> Result<(EdgeId, EdgeId), CheckpointError> {
    let g = &tg.graph;
    let pos: BTreeMap<_, _> = topological_order(g)?
        .into_iter()
        .enumerate()
        .map(|(i, n)| (n, i))
        .collect();
    let mut produced: Vec<(usize, EdgeId)> = tg
        .activation_set()
        .iter()
        .filter_map(|a| g.edge(a.edge).producer.map(|p| (pos[&p], a.edge)))
        .collect();
    produced.sort();
    match produced[..] {
        [(_, a), (_, b), ..] => Ok((a, b)),
        _ => Err(CheckpointError::ProbeActivations(
            produced.iter().map(|p| p.1).collect(),
        )),
    }
}

/// Evaluates the all-saved plan and the three plans recomputing the first,
/// the second, and both activations, fusing each rewritten graph.
pub fn nonadditivity_probe(
    tg: &TrainingGraph,
    hda: &HdaSpec,
    mapping: &MappingConfig,
    limits: &FusionLimits,
    pair: Option<(EdgeId, EdgeId)>,
) -> Result<ProbeReport, EvalError> {
    let (a, b) = match pair {
        Some(p) => p,
        None => default_probe_pair(tg)?,
    };
    let acts = tg.activation_set();
    if a == b || !acts.iter().any(|x| x.edge == a) || !acts.iter().any(|x| x.edge == b) {
        return Err(CheckpointError::ProbeActivations(vec![a, b]).into());
    }
    let base = CheckpointPlan::all_saved(tg);
    let fusion = FusionSetting::Auto(*limits);
    let run = |drop: &[EdgeId]| {
        let mut plan = base.clone();
        for e in drop {
            plan.decisions.insert(*e, false);
        }
        evaluate_with_plan(tg, &plan, hda, mapping, &fusion)
    };
    let b0 = run(&[])?;
    let delta = |drop: &[EdgeId]| -> Result<Delta, EvalError> {
        let r = run(drop)?;
        Ok(Delta {
            latency_cycles: r.latency_cycles as i64 - b0.latency_cycles as i64,
            energy_pj: r.energy_pj - b0.energy_pj,
        })
    };
    Ok(ProbeReport {
        activations: (a, b),
        baseline_latency_cycles: b0.latency_cycles,
        baseline_energy_pj: b0.energy_pj,
        ac10: delta(&[a])?,
        ac01: delta(&[b])?,
        ac11: delta(&[a, b])?,
    })
}

/// `x -> Gemm -> Gelu -> Gelu -> Gemm` with SGD. Recomputing the first
/// Gemm output and the first Gelu output together lets the cloned chain
/// fuse with its backward consumers in a way neither clone does alone.
pub fn chain_workload() -> TrainingGraph {
    let mut g = ComputationGraph::default();
    let x = g.add_input(&[64, 64], 2, EdgeKind::Input);
    let w1 = g.add_input(&[64, 64], 2, EdgeKind::Weight);
    let w2 = g.add_input(&[64, 16], 2, EdgeKind::Weight);
    let h = g
        .add_node(OpKind::Gemm, &[x, w1], EdgeKind::Activation, Phase::Forward)
        .expect("valid");
    let a = g
        .add_node(OpKind::Gelu, &[h], EdgeKind::Activation, Phase::Forward)
        .expect("valid");
    let b = g
        .add_node(OpKind::Gelu, &[a], EdgeKind::Activation, Phase::Forward)
        .expect("valid");
    let y = g
        .add_node(OpKind::Gemm, &[b, w2], EdgeKind::Activation, Phase::Forward)
        .expect("valid");
    g.graph_outputs.push(y);
    build_training_graph(&g, LossSpec::default(), Some(OptimizerSpec::sgd())).expect("valid chain")
}
