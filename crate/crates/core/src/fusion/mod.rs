//! Layer-fusion partitioning: enumerate connected, convex candidate
//! subgraphs that satisfy the fusion constraints, keep the single-output
//! ones, and choose an exact cover with the fewest subgraphs.

mod enumerate;
mod solve;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::graph::{ComputationGraph, NodeId};
use crate::hda::{CoreId, HdaSpec};
use crate::scheduler::{MappingConfig, ScheduleError};

pub use enumerate::{enumerate_candidates, filter_single_output, is_convex, Adjacency};
pub use solve::{solve_partition, SolveOptions, DEFAULT_CANDIDATE_LIMIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionLimits {
    pub max_len: usize,
    pub max_conv: usize,
    pub max_gemm: usize,
}

impl Default for FusionLimits {
    fn default() -> Self {
        FusionLimits {
            max_len: 6,
            max_conv: 3,
            max_gemm: 2,
        }
    }
}

impl FusionLimits {
    pub fn with_max_len(max_len: usize) -> Self {
        FusionLimits {
            max_len,
            ..FusionLimits::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CandidateSubgraph {
    /// Ascending.
    pub nodes: Vec<NodeId>,
    pub working_set_bytes: u64,
    /// Core whose on-chip memory holds the working set.
    pub core: CoreId,
    /// Distinct tile counts of the members, ascending.
    pub tiling_set: Vec<u32>,
    pub conv_count: usize,
    pub gemm_count: usize,
    /// Members with an output leaving the subgraph.
    pub multi_output_nodes: usize,
    /// Bytes of tensors produced inside and consumed outside.
    pub cut_bytes: u64,
}

impl CandidateSubgraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FusedPartition {
    /// Each subgraph ascending; subgraphs ordered by their smallest node.
    pub subgraphs: Vec<Vec<NodeId>>,
    /// False when the heuristic fallback produced the partition.
    pub exact: bool,
}

impl FusedPartition {
    pub fn count(&self) -> usize {
        self.subgraphs.len()
    }

    pub fn layer_by_layer(g: &ComputationGraph) -> Self {
        FusedPartition {
            subgraphs: g.nodes.keys().map(|n| vec![*n]).collect(),
            exact: true,
        }
    }
}

/// The only properties of the accelerator that candidate enumeration and
/// the solver read: the largest on-chip capacity of any core and of any
/// array core. Equal keys give equal partitions.
pub fn capacity_key(hda: &HdaSpec) -> (Option<u64>, Option<u64>) {
    (
        hda.cores.iter().map(|c| c.on_chip_capacity()).max(),
        hda.array_cores().map(|c| c.on_chip_capacity()).max(),
    )
}

/// Enumerate, filter and solve with default solver options.
pub fn fuse(
    g: &ComputationGraph,
    hda: &HdaSpec,
    mapping: &MappingConfig,
    limits: &FusionLimits,
) -> Result<FusedPartition, ScheduleError> {
    let cands = filter_single_output(enumerate_candidates(g, hda, mapping, limits)?, g);
    Ok(solve_partition(&cands, g, &SolveOptions::default()))
}

/// Every constraint a selected subgraph must satisfy, re-checked from
/// scratch. Returns one message per violation.
pub fn check_partition(
    g: &ComputationGraph,
    hda: &HdaSpec,
    mapping: &MappingConfig,
    limits: &FusionLimits,
    partition: &[Vec<NodeId>],
) -> Vec<String> {
    let mut bad = vec![];
    let mut seen = BTreeSet::new();
    for p in partition {
        for n in p {
            if !seen.insert(*n) {
                bad.push(format!("{n} covered more than once"));
            }
        }
    }
    for n in g.nodes.keys().filter(|n| !seen.contains(n)) {
        bad.push(format!("{n} not covered"));
    }
    let adj = Adjacency::new(g);
    for p in partition {
        let set: BTreeSet<NodeId> = p.iter().copied().collect();
        if p.len() == 1 {
            continue;
        }
        if p.len() > limits.max_len {
            bad.push(format!("{p:?} longer than {}", limits.max_len));
        }
        if !adj.is_connected(&set) {
            bad.push(format!("{p:?} is not connected"));
        }
        if !is_convex(g, &set) {
            bad.push(format!("{p:?} is not convex"));
        }
        let count = |class| {
            p.iter()
                .filter(|n| g.node(**n).kind.class() == class)
                .count()
        };
        if count(crate::graph::OpClass::Convolution) > limits.max_conv {
            bad.push(format!("{p:?} has too many convolutions"));
        }
        if count(crate::graph::OpClass::Matrix) > limits.max_gemm {
            bad.push(format!("{p:?} has too many matrix products"));
        }
        let tiles: Vec<u32> = p.iter().map(|n| mapping.tiles(g, *n)).collect();
        for a in &tiles {
            for b in &tiles {
                if a % b != 0 && b % a != 0 {
                    bad.push(format!("{p:?} has incompatible tilings {a} and {b}"));
                }
            }
        }
        let t = tiles.iter().copied().max().unwrap_or(1) as u64;
        if let Err(e) = crate::scheduler::check_fits(g, &set, t, hda) {
            bad.push(e.to_string());
        }
        if enumerate::exiting_members(g, &set) > 1 {
            bad.push(format!("{p:?} has more than one exiting node"));
        }
    }
    bad
}
