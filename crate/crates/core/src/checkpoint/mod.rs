//! Activation checkpointing: the budgeted recompute-cost knapsack, the graph
//! rewrite that splices recomputation subgraphs into the backward pass, and a
//! probe showing that plan costs do not add up once fusion is involved.

mod milp;
mod probe;
mod rewrite;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Activation, TrainingGraph};
use crate::graph::{EdgeId, GraphError};

pub use milp::{
    solve_checkpoint_milp, solve_with, MilpInstance, MilpItem, MilpSolution, Solver, DP_GRID_LIMIT,
};
pub use probe::{chain_workload, default_probe_pair, nonadditivity_probe, Delta, ProbeReport};
pub use rewrite::{apply_checkpoint_plan, apply_to_training_graph};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckpointError {
    #[error(
        "plan does not cover the activation set: missing {missing:?}, unexpected {unexpected:?}"
    )]
    PlanMismatch {
        missing: Vec<EdgeId>,
        unexpected: Vec<EdgeId>,
    },
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("probe needs two distinct activations, got {0:?}")]
    ProbeActivations(Vec<EdgeId>),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Save (`true`) or recompute (`false`) for every activation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "Vec<(EdgeId, u8)>", try_from = "Vec<(EdgeId, u8)>")]
pub struct CheckpointPlan {
    pub decisions: BTreeMap<EdgeId, bool>,
}

impl From<CheckpointPlan> for Vec<(EdgeId, u8)> {
    fn from(p: CheckpointPlan) -> Self {
        p.decisions
            .into_iter()
            .map(|(e, s)| (e, u8::from(s)))
            .collect()
    }
}

impl TryFrom<Vec<(EdgeId, u8)>> for CheckpointPlan {
    type Error = String;

    fn try_from(v: Vec<(EdgeId, u8)>) -> Result<Self, String> {
        let mut decisions = BTreeMap::new();
        for (e, x) in v {
            let save = match x {
                0 => false,
                1 => true,
                _ => return Err(format!("decision for {e} must be 0 or 1, got {x}")),
            };
            if decisions.insert(e, save).is_some() {
                return Err(format!("duplicate decision for {e}"));
            }
        }
        Ok(CheckpointPlan { decisions })
    }
}

impl CheckpointPlan {
    pub fn uniform(acts: &[Activation], save: bool) -> Self {
        CheckpointPlan {
            decisions: acts.iter().map(|a| (a.edge, save)).collect(),
        }
    }

    pub fn all_saved(tg: &TrainingGraph) -> Self {
        Self::uniform(&tg.activation_set(), true)
    }

    /// Plan from one bit per activation, in activation-set order.
    pub fn from_bits(acts: &[Activation], bits: &[bool]) -> Self {
        assert_eq!(acts.len(), bits.len());
        CheckpointPlan {
            decisions: acts.iter().zip(bits).map(|(a, &b)| (a.edge, b)).collect(),
        }
    }

    pub fn discarded(&self) -> impl Iterator<Item = EdgeId> + '_ {
        self.decisions.iter().filter(|(_, s)| !**s).map(|(e, _)| *e)
    }

    pub fn saved(&self) -> impl Iterator<Item = EdgeId> + '_ {
        self.decisions.iter().filter(|(_, s)| **s).map(|(e, _)| *e)
    }

    /// Total bytes of the saved activations.
    pub fn saved_bytes(&self, acts: &[Activation]) -> u64 {
        acts.iter()
            .filter(|a| self.decisions.get(&a.edge) == Some(&true))
            .map(|a| a.bytes)
            .sum()
    }

    /// Recompute cost `sum r_a (1 - x_a)`.
    pub fn recompute_macs(&self, acts: &[Activation]) -> u64 {
        acts.iter()
            .filter(|a| self.decisions.get(&a.edge) == Some(&false))
            .map(|a| a.recompute_macs)
            .sum()
    }

    pub(crate) fn check_covers(&self, acts: &[Activation]) -> Result<(), CheckpointError> {
        let want: BTreeSet<EdgeId> = acts.iter().map(|a| a.edge).collect();
        let have: BTreeSet<EdgeId> = self.decisions.keys().copied().collect();
        if want == have {
            return Ok(());
        }
        Err(CheckpointError::PlanMismatch {
            missing: want.difference(&have).copied().collect(),
            unexpected: have.difference(&want).copied().collect(),
        })
    }
}
