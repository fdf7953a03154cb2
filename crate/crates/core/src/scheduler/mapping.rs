use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ScheduleError;
use crate::graph::{ComputationGraph, NodeId, OpKind, OperatorNode};
use crate::hda::{CoreId, HdaSpec};

/// Largest default tile count along a node's outer loop.
pub const DEFAULT_TILES: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Parallelism {
    None,
    /// Array operators split their batch extent over `splits` array cores,
    /// paying a weight broadcast per extra split.
    DataParallel {
        splits: u32,
    },
    /// Topological-order cut points; stage `k` runs on array core `k mod n`.
    Pipeline {
        boundaries: Vec<usize>,
    },
    /// Array operators split their output channels over up to `max_splits`
    /// array cores (all of them when absent), paying an output gather per
    /// extra split. The split count per node is the divisor of the channel
    /// extent with the lowest latency.
    TensorParallel {
        max_splits: Option<u32>,
    },
}

impl Default for Parallelism {
    fn default() -> Self {
        Parallelism::TensorParallel { max_splits: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingConfig {
    /// Fixed core per node; unlisted nodes are placed automatically.
    #[serde(default)]
    pub assignment: BTreeMap<NodeId, CoreId>,
    #[serde(default)]
    pub parallelism: Parallelism,
    /// Tile count per node along its outer loop; unlisted nodes use
    /// [`default_tiles`].
    #[serde(default)]
    pub intra_core_tiling: BTreeMap<NodeId, u32>,
}

/// Extent of the loop that intra-core tiling splits: output rows for
/// convolutions, `M` for matrix products, and the flattened outer dimension
/// (rows of a 4-d tensor) for everything else.
pub fn outer_extent(g: &ComputationGraph, n: &OperatorNode) -> u64 {
    match n.kind {
        OpKind::Conv { .. } | OpKind::ConvTranspose { .. } | OpKind::ConvGradWeight { .. } => {
            n.loop_dims["OY"]
        }
        OpKind::Gemm | OpKind::MatMul => n.loop_dims["M"],
        _ => {
            let s = &g.edge(n.outputs[0]).shape;
            match s.len() {
                4 => s[2] as u64,
                0 | 1 => 1,
                r => s[..r - 1].iter().product::<usize>() as u64,
            }
        }
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `gcd(outer extent, DEFAULT_TILES)`: a power of two, so defaults are
/// always mutually divisible.
pub fn default_tiles(g: &ComputationGraph, n: &OperatorNode) -> u32 {
    gcd(outer_extent(g, n).max(1), DEFAULT_TILES) as u32
}

impl MappingConfig {
    pub fn auto() -> Self {
        MappingConfig::default()
    }

    pub fn tiles(&self, g: &ComputationGraph, n: NodeId) -> u32 {
        self.intra_core_tiling
            .get(&n)
            .copied()
            .unwrap_or_else(|| default_tiles(g, g.node(n)))
    }

    pub fn tiling(&self, g: &ComputationGraph) -> BTreeMap<NodeId, u32> {
        g.nodes.keys().map(|&n| (n, self.tiles(g, n))).collect()
    }

    pub fn validate(&self, g: &ComputationGraph, hda: &HdaSpec) -> Result<(), ScheduleError> {
        let bad = |m: String| Err(ScheduleError::InvalidMapping(m));
        for (n, c) in &self.assignment {
            if !g.nodes.contains_key(n) {
                return bad(format!("assignment names unknown node {n}"));
            }
            if hda.core(*c).is_none() {
                return bad(format!("assignment names unknown core {c}"));
            }
        }
        for (n, t) in &self.intra_core_tiling {
            let Some(node) = g.nodes.get(n) else {
                return bad(format!("tiling names unknown node {n}"));
            };
            let e = outer_extent(g, node);
            if *t == 0 || !e.is_multiple_of(*t as u64) {
                return bad(format!(
                    "tiling {t} of {n} does not divide its outer extent {e}"
                ));
            }
        }
        match &self.parallelism {
            Parallelism::DataParallel { splits } if *splits == 0 => {
                bad("data-parallel splits must be positive".into())
            }
            Parallelism::TensorParallel {
                max_splits: Some(0),
            } => bad("tensor-parallel splits must be positive".into()),
            Parallelism::Pipeline { boundaries } => {
                if boundaries.windows(2).any(|w| w[0] >= w[1])
                    || boundaries.iter().any(|b| *b == 0 || *b >= g.nodes.len())
                {
                    return bad(
                        "pipeline boundaries must be increasing cut points inside the graph".into(),
                    );
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}
