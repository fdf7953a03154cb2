//! Computation-graph IR: operator nodes connected by tensor edges.

mod ops;
mod validate;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ops::{
    broadcastable, conv_out, macs_of, numel, AttrValue, Attrs, LoopDims, LossKind, OpClass, OpKind,
};
pub use validate::{validate_graph, Diagnostic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Activation,
    Weight,
    Gradient,
    OptimizerState,
    Input,
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
    Optimizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEdge {
    pub id: EdgeId,
    pub shape: Vec<usize>,
    pub element_bytes: usize,
    /// `None` for externally supplied tensors.
    pub producer: Option<NodeId>,
    pub consumers: Vec<NodeId>,
    pub kind: EdgeKind,
}

impl TensorEdge {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// `element_bytes * prod(shape)`.
pub fn tensor_bytes(e: &TensorEdge) -> u64 {
    e.shape
        .iter()
        .fold(e.element_bytes as u64, |acc, &d| acc * d as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorNode {
    pub id: NodeId,
    pub kind: OpKind,
    pub inputs: Vec<EdgeId>,
    pub outputs: Vec<EdgeId>,
    pub loop_dims: LoopDims,
    pub macs: u64,
    pub phase: Phase,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComputationGraph {
    pub nodes: BTreeMap<NodeId, OperatorNode>,
    pub edges: BTreeMap<EdgeId, TensorEdge>,
    pub graph_inputs: Vec<EdgeId>,
    pub graph_outputs: Vec<EdgeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("cycle detected among nodes {0:?}")]
    CycleDetected(Vec<NodeId>),
    #[error("shape error at {node}: {msg}")]
    Shape { node: String, msg: String },
    #[error("unknown edge {0}")]
    UnknownEdge(EdgeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

impl ComputationGraph {
    pub fn node(&self, id: NodeId) -> &OperatorNode {
        &self.nodes[&id]
    }

    pub fn edge(&self, id: EdgeId) -> &TensorEdge {
        &self.edges[&id]
    }

    pub fn next_node_id(&self) -> NodeId {
        NodeId(self.nodes.keys().next_back().map_or(0, |n| n.0 + 1))
    }

    pub fn next_edge_id(&self) -> EdgeId {
        EdgeId(self.edges.keys().next_back().map_or(0, |e| e.0 + 1))
    }

    pub fn total_macs(&self) -> u64 {
        self.nodes.values().map(|n| n.macs).sum()
    }

    pub fn macs_in_phase(&self, phase: Phase) -> u64 {
        self.nodes
            .values()
            .filter(|n| n.phase == phase)
            .map(|n| n.macs)
            .sum()
    }

    pub fn edges_of_kind(&self, kind: EdgeKind) -> impl Iterator<Item = &TensorEdge> {
        self.edges.values().filter(move |e| e.kind == kind)
    }

    pub fn bytes_of_kind(&self, kind: EdgeKind) -> u64 {
        self.edges_of_kind(kind).map(tensor_bytes).sum()
    }

    /// Nodes in dependency order, ties broken by ascending id.
    pub fn topological_order(&self) -> Result<Vec<NodeId>, GraphError> {
        topological_order(self)
    }

    /// Rebuilds `producer`/`consumers` of every edge from the node lists.
    pub fn relink(&mut self) {
        for e in self.edges.values_mut() {
            e.producer = None;
            e.consumers.clear();
        }
        for n in self.nodes.values() {
            for &i in &n.inputs {
                if let Some(e) = self.edges.get_mut(&i) {
                    if !e.consumers.contains(&n.id) {
                        e.consumers.push(n.id);
                    }
                }
            }
            for &o in &n.outputs {
                if let Some(e) = self.edges.get_mut(&o) {
                    e.producer = Some(n.id);
                }
            }
        }
        for e in self.edges.values_mut() {
            e.consumers.sort_unstable();
        }
    }

    fn shape_err(id: impl fmt::Display, msg: impl Into<String>) -> GraphError {
        GraphError::Shape {
            node: id.to_string(),
            msg: msg.into(),
        }
    }

    /// Adds an external tensor (input, weight, label, state).
    pub fn add_input(&mut self, shape: &[usize], element_bytes: usize, kind: EdgeKind) -> EdgeId {
        let id = self.next_edge_id();
        self.edges.insert(
            id,
            TensorEdge {
                id,
                shape: shape.to_vec(),
                element_bytes,
                producer: None,
                consumers: vec![],
                kind,
            },
        );
        self.graph_inputs.push(id);
        id
    }

    /// Appends a node, creating its output edges. Output shapes are inferred
    /// unless `out_shapes` is given. Returns the node id and its output edges.
    pub fn add_node_with_shapes(
        &mut self,
        kind: OpKind,
        inputs: &[EdgeId],
        out_shapes: Option<Vec<Vec<usize>>>,
        out_kind: EdgeKind,
        phase: Phase,
    ) -> Result<(NodeId, Vec<EdgeId>), GraphError> {
        let id = self.next_node_id();
        for &i in inputs {
            if !self.edges.contains_key(&i) {
                return Err(GraphError::UnknownEdge(i));
            }
        }
        let in_shapes: Vec<&[usize]> = inputs
            .iter()
            .map(|i| self.edges[i].shape.as_slice())
            .collect();
        if !kind.arity().0.contains(&inputs.len()) {
            return Err(Self::shape_err(
                id,
                format!("{} cannot take {} inputs", kind.name(), inputs.len()),
            ));
        }
        let shapes = match out_shapes {
            Some(s) => s,
            None => match kind.infer_output_shapes(&in_shapes) {
                Some(r) => r.map_err(|m| Self::shape_err(id, m))?,
                None => {
                    return Err(Self::shape_err(
                        id,
                        format!("{} needs an explicit output shape", kind.name()),
                    ))
                }
            },
        };
        let out_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        kind.check_shapes(&in_shapes, &out_refs)
            .map_err(|m| Self::shape_err(id, m))?;
        let loop_dims = kind.loop_dims(&in_shapes, &out_refs);
        let macs = macs_of(&loop_dims);
        let element_bytes = inputs.first().map_or(4, |i| self.edges[i].element_bytes);
        let mut outputs = Vec::with_capacity(shapes.len());
        let mut next = self.next_edge_id().0;
        for shape in shapes {
            let eid = EdgeId(next);
            next += 1;
            self.edges.insert(
                eid,
                TensorEdge {
                    id: eid,
                    shape,
                    element_bytes,
                    producer: Some(id),
                    consumers: vec![],
                    kind: out_kind,
                },
            );
            outputs.push(eid);
        }
        for &i in inputs {
            let e = self.edges.get_mut(&i).expect("checked above");
            if !e.consumers.contains(&id) {
                e.consumers.push(id);
            }
        }
        self.nodes.insert(
            id,
            OperatorNode {
                id,
                kind,
                inputs: inputs.to_vec(),
                outputs: outputs.clone(),
                loop_dims,
                macs,
                phase,
            },
        );
        Ok((id, outputs))
    }

    /// Single-output convenience form of [`add_node_with_shapes`](Self::add_node_with_shapes).
    pub fn add_node(
        &mut self,
        kind: OpKind,
        inputs: &[EdgeId],
        out_kind: EdgeKind,
        phase: Phase,
    ) -> Result<EdgeId, GraphError> {
        Ok(self
            .add_node_with_shapes(kind, inputs, None, out_kind, phase)?
            .1[0])
    }

    /// Single-output node with an explicit output shape.
    pub fn add_node_shaped(
        &mut self,
        kind: OpKind,
        inputs: &[EdgeId],
        shape: Vec<usize>,
        out_kind: EdgeKind,
        phase: Phase,
    ) -> Result<EdgeId, GraphError> {
        Ok(self
            .add_node_with_shapes(kind, inputs, Some(vec![shape]), out_kind, phase)?
            .1[0])
    }

    /// Recomputes `loop_dims`/`macs` of a node from its current operand shapes.
    pub fn recompute_loop_dims(&self, n: &OperatorNode) -> LoopDims {
        let ins: Vec<&[usize]> = n
            .inputs
            .iter()
            .map(|i| self.edges[i].shape.as_slice())
            .collect();
        let outs: Vec<&[usize]> = n
            .outputs
            .iter()
            .map(|o| self.edges[o].shape.as_slice())
            .collect();
        n.kind.loop_dims(&ins, &outs)
    }

    pub fn successors(&self, id: NodeId) -> BTreeSet<NodeId> {
        let mut s = BTreeSet::new();
        for o in &self.nodes[&id].outputs {
            s.extend(self.edges[o].consumers.iter().copied());
        }
        s
    }

    pub fn predecessors(&self, id: NodeId) -> BTreeSet<NodeId> {
        self.nodes[&id]
            .inputs
            .iter()
            .filter_map(|i| self.edges[i].producer)
            .collect()
    }
}

/// Kahn's algorithm with a min-id ready queue. On failure returns the nodes
/// of one cycle.
pub fn topological_order(g: &ComputationGraph) -> Result<Vec<NodeId>, GraphError> {
    let mut indeg: BTreeMap<NodeId, usize> = g.nodes.keys().map(|&k| (k, 0)).collect();
    for n in g.nodes.values() {
        let preds: BTreeSet<NodeId> = n
            .inputs
            .iter()
            .filter_map(|i| g.edges.get(i).and_then(|e| e.producer))
            .filter(|p| g.nodes.contains_key(p))
            .collect();
        *indeg.get_mut(&n.id).unwrap() = preds.len();
    }
    let succ = |id: NodeId| -> BTreeSet<NodeId> {
        let mut s = BTreeSet::new();
        for o in &g.nodes[&id].outputs {
            if let Some(e) = g.edges.get(o) {
                s.extend(
                    e.consumers
                        .iter()
                        .copied()
                        .filter(|c| g.nodes.contains_key(c)),
                );
            }
        }
        s
    };
    let mut heap: BinaryHeap<Reverse<NodeId>> = indeg
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&k, _)| Reverse(k))
        .collect();
    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(Reverse(n)) = heap.pop() {
        order.push(n);
        for s in succ(n) {
            let d = indeg.get_mut(&s).unwrap();
            *d -= 1;
            if *d == 0 {
                heap.push(Reverse(s));
            }
        }
    }
    if order.len() == g.nodes.len() {
        return Ok(order);
    }
    let done: BTreeSet<NodeId> = order.into_iter().collect();
    Err(GraphError::CycleDetected(find_cycle(g, &done)))
}

/// Walks predecessor links among unsorted nodes until a node repeats.
fn find_cycle(g: &ComputationGraph, done: &BTreeSet<NodeId>) -> Vec<NodeId> {
    let start = *g
        .nodes
        .keys()
        .find(|k| !done.contains(k))
        .expect("cycle exists");
    let mut path = vec![start];
    let mut pos: BTreeMap<NodeId, usize> = BTreeMap::from([(start, 0)]);
    let mut cur = start;
    loop {
        let next = g.nodes[&cur]
            .inputs
            .iter()
            .filter_map(|i| g.edges.get(i).and_then(|e| e.producer))
            .find(|p| g.nodes.contains_key(p) && !done.contains(p))
            .expect("every unsorted node has an unsorted predecessor");
        if let Some(&p) = pos.get(&next) {
            let mut cyc = path[p..].to_vec();
            cyc.sort_unstable();
            return cyc;
        }
        pos.insert(next, path.len());
        path.push(next);
        cur = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> ComputationGraph {
        let mut g = ComputationGraph::default();
        let x = g.add_input(&[1, 4], 4, EdgeKind::Input);
        let a = g
            .add_node(OpKind::ReLU, &[x], EdgeKind::Activation, Phase::Forward)
            .unwrap();
        let b = g
            .add_node(OpKind::Gelu, &[a], EdgeKind::Activation, Phase::Forward)
            .unwrap();
        let c = g
            .add_node(OpKind::ReLU, &[b], EdgeKind::Activation, Phase::Forward)
            .unwrap();
        g.graph_outputs.push(c);
        g
    }

    #[test]
    fn chain_orders_in_sequence() {
        let g = chain();
        assert_eq!(
            topological_order(&g).unwrap(),
            vec![NodeId(0), NodeId(1), NodeId(2)]
        );
    }

    #[test]
    fn diamond_breaks_ties_by_id() {
        let mut g = ComputationGraph::default();
        let x = g.add_input(&[2, 2], 4, EdgeKind::Input);
        let a = g
            .add_node(OpKind::ReLU, &[x], EdgeKind::Activation, Phase::Forward)
            .unwrap();
        let b = g
            .add_node(OpKind::Gelu, &[a], EdgeKind::Activation, Phase::Forward)
            .unwrap();
        let c = g
            .add_node(OpKind::ReLU, &[a], EdgeKind::Activation, Phase::Forward)
            .unwrap();
        let d = g
            .add_node(OpKind::Add, &[b, c], EdgeKind::Activation, Phase::Forward)
            .unwrap();
        g.graph_outputs.push(d);
        assert_eq!(
            topological_order(&g).unwrap(),
            vec![NodeId(0), NodeId(1), NodeId(2), NodeId(3)]
        );
    }

    #[test]
    fn two_cycle_is_reported() {
        let mut g = ComputationGraph::default();
        let x = g.add_input(&[2], 4, EdgeKind::Input);
        let a = g
            .add_node(OpKind::Add, &[x, x], EdgeKind::Activation, Phase::Forward)
            .unwrap();
        let b = g
            .add_node(OpKind::ReLU, &[a], EdgeKind::Activation, Phase::Forward)
            .unwrap();
        // Feed B's output back into A.
        g.nodes.get_mut(&NodeId(0)).unwrap().inputs[1] = b;
        g.relink();
        assert_eq!(
            topological_order(&g),
            Err(GraphError::CycleDetected(vec![NodeId(0), NodeId(1)]))
        );
    }

    #[test]
    fn tensor_bytes_examples() {
        let e = |shape: &[usize], b| TensorEdge {
            id: EdgeId(0),
            shape: shape.to_vec(),
            element_bytes: b,
            producer: None,
            consumers: vec![],
            kind: EdgeKind::Activation,
        };
        assert_eq!(tensor_bytes(&e(&[1, 64, 56, 56], 2)), 401_408);
        assert_eq!(tensor_bytes(&e(&[1], 4)), 4);
        assert_eq!(tensor_bytes(&e(&[8, 512, 768], 2)), 6_291_456);
    }
}
