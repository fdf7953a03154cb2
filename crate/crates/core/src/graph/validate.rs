use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::{macs_of, topological_order, ComputationGraph, EdgeId, GraphError, NodeId};

/// One violated graph invariant, naming the offending id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    EmptyShape(EdgeId),
    ZeroDimension(EdgeId),
    ByteSizeOverflow(EdgeId),
    ZeroElementBytes(EdgeId),
    SelfLoop(EdgeId),
    /// The edge names a producer node that does not exist.
    MissingProducer(EdgeId),
    DuplicateProducer(EdgeId),
    /// Edge bookkeeping disagrees with the nodes' input/output lists.
    LinkMismatch(EdgeId),
    /// An edge without a producer that is not a graph input.
    UndeclaredExternal(EdgeId),
    /// A graph input that has a producer.
    ProducedGraphInput(EdgeId),
    /// An edge that is neither consumed nor a graph output.
    OrphanEdge(EdgeId),
    UnknownEdge {
        node: NodeId,
        edge: EdgeId,
    },
    UnknownGraphIo(EdgeId),
    DuplicateGraphIo(EdgeId),
    ArityMismatch(NodeId),
    ShapeMismatch {
        node: NodeId,
        msg: String,
    },
    LoopDimsMismatch(NodeId),
    MacsMismatch(NodeId),
    IdMismatch(String),
    CycleDetected(Vec<NodeId>),
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::EmptyShape(e) => write!(f, "{e}: shape is empty"),
            Diagnostic::ZeroDimension(e) => write!(f, "{e}: shape has a zero dimension"),
            Diagnostic::ByteSizeOverflow(e) => write!(f, "{e}: byte size overflows"),
            Diagnostic::ZeroElementBytes(e) => write!(f, "{e}: element_bytes is zero"),
            Diagnostic::SelfLoop(e) => write!(f, "{e}: producer is also a consumer"),
            Diagnostic::MissingProducer(e) => write!(f, "{e}: producer node does not exist"),
            Diagnostic::DuplicateProducer(e) => write!(f, "{e}: produced by more than one node"),
            Diagnostic::LinkMismatch(e) => {
                write!(f, "{e}: producer/consumer lists disagree with nodes")
            }
            Diagnostic::UndeclaredExternal(e) => {
                write!(f, "{e}: has no producer and is not a graph input")
            }
            Diagnostic::ProducedGraphInput(e) => write!(f, "{e}: graph input has a producer"),
            Diagnostic::OrphanEdge(e) => write!(f, "{e}: never consumed and not a graph output"),
            Diagnostic::UnknownEdge { node, edge } => {
                write!(f, "{node}: references unknown edge {edge}")
            }
            Diagnostic::UnknownGraphIo(e) => write!(f, "{e}: graph input/output does not exist"),
            Diagnostic::DuplicateGraphIo(e) => write!(f, "{e}: listed twice as graph input/output"),
            Diagnostic::ArityMismatch(n) => write!(f, "{n}: wrong number of inputs or outputs"),
            Diagnostic::ShapeMismatch { node, msg } => write!(f, "{node}: {msg}"),
            Diagnostic::LoopDimsMismatch(n) => {
                write!(f, "{n}: loop_dims disagree with operand shapes")
            }
            Diagnostic::MacsMismatch(n) => write!(f, "{n}: macs disagree with loop_dims"),
            Diagnostic::IdMismatch(what) => write!(f, "{what}: map key differs from stored id"),
            Diagnostic::CycleDetected(ns) => write!(f, "cycle through {ns:?}"),
        }
    }
}

/// Checks every structural invariant; an empty result means the graph is valid.
pub fn validate_graph(g: &ComputationGraph) -> Vec<Diagnostic> {
    let mut out = Vec::new();

    for (k, n) in &g.nodes {
        if *k != n.id {
            out.push(Diagnostic::IdMismatch(k.to_string()));
        }
    }
    for (k, e) in &g.edges {
        if *k != e.id {
            out.push(Diagnostic::IdMismatch(k.to_string()));
        }
    }

    for e in g.edges.values() {
        if e.shape.is_empty() {
            out.push(Diagnostic::EmptyShape(e.id));
        } else if e.shape.contains(&0) {
            out.push(Diagnostic::ZeroDimension(e.id));
        } else if e
            .shape
            .iter()
            .try_fold(e.element_bytes as u64, |acc, &d| acc.checked_mul(d as u64))
            .is_none()
        {
            out.push(Diagnostic::ByteSizeOverflow(e.id));
        }
        if e.element_bytes == 0 {
            out.push(Diagnostic::ZeroElementBytes(e.id));
        }
    }

    // Producers and consumers as implied by node lists.
    let mut producers: BTreeMap<EdgeId, Vec<NodeId>> = BTreeMap::new();
    let mut consumers: BTreeMap<EdgeId, BTreeSet<NodeId>> = BTreeMap::new();
    let mut structurally_ok = true;
    for n in g.nodes.values() {
        for &i in &n.inputs {
            if g.edges.contains_key(&i) {
                consumers.entry(i).or_default().insert(n.id);
            } else {
                out.push(Diagnostic::UnknownEdge {
                    node: n.id,
                    edge: i,
                });
                structurally_ok = false;
            }
        }
        for &o in &n.outputs {
            if g.edges.contains_key(&o) {
                producers.entry(o).or_default().push(n.id);
            } else {
                out.push(Diagnostic::UnknownEdge {
                    node: n.id,
                    edge: o,
                });
                structurally_ok = false;
            }
        }
    }

    let inputs: BTreeSet<EdgeId> = g.graph_inputs.iter().copied().collect();
    let outputs: BTreeSet<EdgeId> = g.graph_outputs.iter().copied().collect();
    for list in [&g.graph_inputs, &g.graph_outputs] {
        let mut seen = BTreeSet::new();
        for &e in list {
            if !g.edges.contains_key(&e) {
                out.push(Diagnostic::UnknownGraphIo(e));
            } else if !seen.insert(e) {
                out.push(Diagnostic::DuplicateGraphIo(e));
            }
        }
    }

    for e in g.edges.values() {
        let prods = producers.get(&e.id).map(Vec::as_slice).unwrap_or(&[]);
        let cons = consumers.get(&e.id).cloned().unwrap_or_default();
        match (e.producer, prods) {
            (Some(p), _) if !g.nodes.contains_key(&p) => {
                out.push(Diagnostic::MissingProducer(e.id));
                structurally_ok = false;
            }
            (_, [_, _, ..]) => {
                out.push(Diagnostic::DuplicateProducer(e.id));
                structurally_ok = false;
            }
            (Some(p), [q]) if p == *q => {}
            (None, []) => {
                if !inputs.contains(&e.id) {
                    out.push(Diagnostic::UndeclaredExternal(e.id));
                }
            }
            _ => {
                out.push(Diagnostic::LinkMismatch(e.id));
                structurally_ok = false;
            }
        }
        if e.producer.is_some() && inputs.contains(&e.id) {
            out.push(Diagnostic::ProducedGraphInput(e.id));
        }
        let listed: BTreeSet<NodeId> = e.consumers.iter().copied().collect();
        if listed.len() != e.consumers.len() || listed != cons {
            out.push(Diagnostic::LinkMismatch(e.id));
            structurally_ok = false;
        }
        if let Some(p) = e.producer {
            if cons.contains(&p) {
                out.push(Diagnostic::SelfLoop(e.id));
            }
        }
        if cons.is_empty() && !outputs.contains(&e.id) {
            out.push(Diagnostic::OrphanEdge(e.id));
        }
    }

    for n in g.nodes.values() {
        let (in_ar, out_ar) = n.kind.arity();
        if !in_ar.contains(&n.inputs.len()) || n.outputs.len() != out_ar {
            out.push(Diagnostic::ArityMismatch(n.id));
            continue;
        }
        let known = n
            .inputs
            .iter()
            .chain(&n.outputs)
            .all(|e| g.edges.contains_key(e));
        if !known {
            continue;
        }
        let ins: Vec<&[usize]> = n
            .inputs
            .iter()
            .map(|i| g.edges[i].shape.as_slice())
            .collect();
        let outs: Vec<&[usize]> = n
            .outputs
            .iter()
            .map(|o| g.edges[o].shape.as_slice())
            .collect();
        if ins.iter().chain(&outs).any(|s| s.is_empty()) {
            continue;
        }
        if let Err(msg) = n.kind.check_shapes(&ins, &outs) {
            out.push(Diagnostic::ShapeMismatch { node: n.id, msg });
            continue;
        }
        if n.kind.loop_dims(&ins, &outs) != n.loop_dims {
            out.push(Diagnostic::LoopDimsMismatch(n.id));
        }
        if macs_of(&n.loop_dims) != n.macs {
            out.push(Diagnostic::MacsMismatch(n.id));
        }
    }

    if structurally_ok {
        if let Err(GraphError::CycleDetected(c)) = topological_order(g) {
            out.push(Diagnostic::CycleDetected(c));
        }
    }
    out
}
