//! Analytical scheduling of a partitioned graph onto a heterogeneous
//! dataflow accelerator.
//!
//! Node costs follow a roofline over the core's compute parallelism and
//! memory-level bandwidths. Subgraphs are list-scheduled in topological
//! order; members of a fused subgraph run as a tile pipeline whose
//! intermediates never leave the chip, while every tensor crossing a
//! subgraph boundary makes a round trip through off-chip memory.

mod cost;
mod eval;
mod list;
mod mapping;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::graph::{GraphError, NodeId};
use crate::hda::CoreId;

pub use cost::{compatible, node_cost, LevelTraffic, NodeCost, Split};
pub use eval::{evaluate, evaluate_with_plan, EvalError, Evaluation, FusionSetting};
pub use list::{check_fits, schedule, working_set};
pub use mapping::{default_tiles, outer_extent, MappingConfig, Parallelism, DEFAULT_TILES};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("node {node} cannot run on core {core}")]
    IncompatibleCore { node: NodeId, core: CoreId },
    #[error("no core can run node {0}")]
    UnmappableNode(NodeId),
    #[error("subgraph {subgraph:?} needs {bytes} B on core {core}, which holds {capacity} B")]
    MemoryExceeded {
        core: CoreId,
        subgraph: Vec<NodeId>,
        bytes: u64,
        capacity: u64,
    },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid mapping: {0}")]
    InvalidMapping(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeTiming {
    pub node: NodeId,
    /// More than one core when the node is split.
    pub cores: Vec<CoreId>,
    pub start: u64,
    pub end: u64,
    /// Compute, on-chip, split synchronization and boundary transfers
    /// attributed to this node.
    #[serde(rename = "energy_pJ")]
    pub energy_pj: f64,
    pub subgraph: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    #[serde(rename = "compute_pJ")]
    pub compute_pj: f64,
    #[serde(rename = "on_chip_pJ")]
    pub on_chip_pj: f64,
    #[serde(rename = "off_chip_pJ")]
    pub off_chip_pj: f64,
    #[serde(rename = "link_pJ")]
    pub link_pj: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.compute_pj + self.on_chip_pj + self.off_chip_pj + self.link_pj
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleResult {
    /// Sorted by node id.
    pub nodes: Vec<NodeTiming>,
    pub latency_cycles: u64,
    #[serde(rename = "energy_pJ")]
    pub energy_pj: f64,
    pub energy: EnergyBreakdown,
    pub peak_core_memory_bytes: BTreeMap<CoreId, u64>,
    pub peak_activation_bytes: u64,
    pub offchip_bytes: u64,
    pub subgraph_count: usize,
}

impl ScheduleResult {
    /// `node_id,core,start,end,energy_pJ`, one row per node; split nodes
    /// list their cores joined by `+`.
    pub fn timeline_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record(["node_id", "core", "start", "end", "energy_pJ"])
            .expect("in-memory write");
        for t in &self.nodes {
            let cores: Vec<String> = t.cores.iter().map(u32::to_string).collect();
            w.write_record([
                t.node.0.to_string(),
                cores.join("+"),
                t.start.to_string(),
                t.end.to_string(),
                format!("{:.6}", t.energy_pj),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
    }
}
