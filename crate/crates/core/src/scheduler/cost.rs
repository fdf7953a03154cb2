use serde::Serialize;

use super::ScheduleError;
use crate::graph::{tensor_bytes, ComputationGraph, NodeId, OpKind, OperatorNode};
use crate::hda::{CoreSpec, Dataflow, Operand};

/// How a node is divided over several cores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    None,
    /// Output channels over `n` cores.
    Channels(u32),
    /// Batch over `n` cores.
    Batch(u32),
}

impl Split {
    pub fn ways(self) -> u32 {
        match self {
            Split::None => 1,
            Split::Channels(n) | Split::Batch(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelTraffic {
    pub level: String,
    pub read_bytes: u64,
    pub write_bytes: u64,
}

/// Roofline cost of one node on one core. With a split, cycles and traffic
/// are per participating core and energies cover all of them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeCost {
    pub compute_cycles: u64,
    pub memory_cycles: u64,
    pub cycles: u64,
    pub traffic: Vec<LevelTraffic>,
    pub compute_energy_pj: f64,
    pub on_chip_energy_pj: f64,
}

impl NodeCost {
    pub fn energy_pj(&self) -> f64 {
        self.compute_energy_pj + self.on_chip_energy_pj
    }
}

pub fn compatible(kind: &OpKind, core: &CoreSpec) -> bool {
    !kind.needs_array() || core.dataflow.is_array()
}

/// Output axis divided by a channel split.
pub fn channel_axis(kind: &OpKind, rank: usize) -> Option<usize> {
    match kind {
        OpKind::Conv { .. } | OpKind::ConvTranspose { .. } | OpKind::Gemm => Some(1),
        OpKind::ConvGradWeight { .. } => Some(0),
        OpKind::MatMul => Some(rank - 1),
        _ => None,
    }
}

/// Output axis divided by a batch split; weight gradients reduce over the
/// batch and cannot be split this way.
pub fn batch_axis(kind: &OpKind) -> Option<usize> {
    match kind {
        OpKind::Conv { .. } | OpKind::ConvTranspose { .. } | OpKind::Gemm | OpKind::MatMul => {
            Some(0)
        }
        _ => None,
    }
}

/// Inputs after the first of an array operator are its stationary operand
/// (weights, bias, or the second matrix).
fn is_stationary(n: &OperatorNode, idx: usize) -> bool {
    n.kind.needs_array() && idx >= 1
}

/// Roofline cost of `node` on `core` with `tiles` tiles along its outer loop.
pub fn node_cost(
    g: &ComputationGraph,
    node: NodeId,
    core: &CoreSpec,
    tiles: u32,
) -> Result<NodeCost, ScheduleError> {
    split_cost(g, g.node(node), core, tiles, Split::None)
}

pub(crate) fn split_cost(
    g: &ComputationGraph,
    n: &OperatorNode,
    core: &CoreSpec,
    tiles: u32,
    split: Split,
) -> Result<NodeCost, ScheduleError> {
    if !compatible(&n.kind, core) {
        return Err(ScheduleError::IncompatibleCore {
            node: n.id,
            core: core.id,
        });
    }
    if n.kind == OpKind::Reshape {
        return Ok(NodeCost {
            compute_cycles: 0,
            memory_cycles: 0,
            cycles: 0,
            traffic: vec![],
            compute_energy_pj: 0.0,
            on_chip_energy_pj: 0.0,
        });
    }
    let ways = split.ways() as u64;
    let share = |b: u64| b.div_ceil(ways);
    let tiles = tiles.max(1) as u64;
    let weight_reloads = if core.dataflow == Dataflow::WeightStationary {
        1
    } else {
        tiles
    };
    let (mut inputs, mut weights) = (0u64, 0u64);
    for (i, e) in n.inputs.iter().enumerate() {
        let b = tensor_bytes(g.edge(*e));
        match (is_stationary(n, i), split) {
            (true, Split::Channels(_)) => weights += share(b),
            (true, _) => weights += b,
            (false, Split::Batch(_)) => inputs += share(b),
            (false, _) => inputs += b,
        }
    }
    let outputs: u64 = n
        .outputs
        .iter()
        .map(|o| share(tensor_bytes(g.edge(*o))))
        .sum();
    let macs = share(n.macs);
    let compute_cycles = macs.div_ceil(core.parallelism());
    let mut memory_cycles = 0;
    let mut traffic = Vec::with_capacity(core.memory_levels.len());
    let mut on_chip = 0.0;
    for l in &core.memory_levels {
        let mut read = 0;
        if l.serves(Operand::Inputs) {
            read += inputs;
        }
        if l.serves(Operand::Weights) {
            read += weights * weight_reloads;
        }
        let write = if l.serves(Operand::Outputs) {
            outputs
        } else {
            0
        };
        let cyc = ((read as f64 / l.read_bandwidth_bytes_per_cycle).ceil() as u64)
            .max((write as f64 / l.write_bandwidth_bytes_per_cycle).ceil() as u64);
        memory_cycles = memory_cycles.max(cyc);
        on_chip +=
            read as f64 * l.read_energy_pj_per_byte + write as f64 * l.write_energy_pj_per_byte;
        traffic.push(LevelTraffic {
            level: l.name.clone(),
            read_bytes: read,
            write_bytes: write,
        });
    }
    Ok(NodeCost {
        compute_cycles,
        memory_cycles,
        cycles: compute_cycles.max(memory_cycles),
        traffic,
        compute_energy_pj: (macs * ways) as f64 * core.mac_energy_pj,
        on_chip_energy_pj: on_chip * ways as f64,
    })
}
