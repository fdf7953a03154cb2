use std::collections::{BTreeMap, BTreeSet};

use super::{CheckpointError, CheckpointPlan};
use crate::autodiff::TrainingGraph;
use crate::graph::{ComputationGraph, EdgeId, NodeId, Phase};

/// Replaces every discarded activation's backward uses with a recomputed copy.
///
/// Recomputation clones forward nodes into the backward phase, walking back
/// from the discarded tensor and stopping at saved activations and external
/// tensors; discarded activations met on the way are recomputed as well. A
/// forward node is cloned at most once, so discarded tensors that share a
/// prefix share its clone. External tensors (inputs, labels) are read again
/// directly. An all-saved plan returns the graph unchanged.
pub fn apply_checkpoint_plan(
    tg: &TrainingGraph,
    plan: &CheckpointPlan,
) -> Result<ComputationGraph, CheckpointError> {
    let acts = tg.activation_set();
    plan.check_covers(&acts)?;
    let mut g = tg.graph.clone();
    let saved: BTreeSet<EdgeId> = plan.saved().collect();
    let amap = tg.activation_map();
    let mut cloner = Cloner {
        src: &tg.graph,
        saved: &saved,
        edge_map: BTreeMap::new(),
    };
    for a in plan.discarded() {
        if tg.graph.edge(a).producer.is_none() {
            continue;
        }
        let copy = cloner.edge(&mut g, a)?;
        for &c in &amap[&a] {
            let node = g.nodes.get_mut(&c).expect("consumer exists");
            for i in node.inputs.iter_mut().filter(|i| **i == a) {
                *i = copy;
            }
        }
    }
    g.relink();
    Ok(g)
}

/// [`apply_checkpoint_plan`] with the training bookkeeping carried over.
pub fn apply_to_training_graph(
    tg: &TrainingGraph,
    plan: &CheckpointPlan,
) -> Result<TrainingGraph, CheckpointError> {
    let g = apply_checkpoint_plan(tg, plan)?;
    Ok(TrainingGraph {
        graph: g,
        ..tg.clone()
    })
}

struct Cloner<'a> {
    src: &'a ComputationGraph,
    saved: &'a BTreeSet<EdgeId>,
    edge_map: BTreeMap<EdgeId, EdgeId>,
}

impl Cloner<'_> {
    /// The recomputed stand-in for forward edge `e`.
    fn edge(&mut self, g: &mut ComputationGraph, e: EdgeId) -> Result<EdgeId, CheckpointError> {
        if let Some(&c) = self.edge_map.get(&e) {
            return Ok(c);
        }
        let Some(p) = self.src.edge(e).producer else {
            return Ok(e);
        };
        if self.saved.contains(&e) {
            return Ok(e);
        }
        self.node(g, p)?;
        Ok(self.edge_map[&e])
    }

    fn node(&mut self, g: &mut ComputationGraph, n: NodeId) -> Result<(), CheckpointError> {
        let node = self.src.node(n).clone();
        debug_assert_eq!(node.phase, Phase::Forward);
        let mut inputs = Vec::with_capacity(node.inputs.len());
        for &i in &node.inputs {
            inputs.push(self.edge(g, i)?);
        }
        let shapes = node
            .outputs
            .iter()
            .map(|o| self.src.edge(*o).shape.clone())
            .collect();
        let kind = self.src.edge(node.outputs[0]).kind;
        let (_, outs) = g.add_node_with_shapes(
            node.kind.clone(),
            &inputs,
            Some(shapes),
            kind,
            Phase::Backward,
        )?;
        for (o, c) in node.outputs.iter().zip(outs) {
            g.edges.get_mut(&c).expect("just added").element_bytes =
                self.src.edge(*o).element_bytes;
            self.edge_map.insert(*o, c);
        }
        Ok(())
    }
}
