//! Forward graph to training graph: loss, backward primitives, optimizer
//! updates, and the set of forward tensors the backward pass depends on.

mod rules;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    tensor_bytes, topological_order, validate_graph, ComputationGraph, Diagnostic, EdgeId,
    EdgeKind, GraphError, LossKind, NodeId, OpKind, Phase,
};

pub(crate) use rules::backward_rule;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("no backward rule for operator {0}")]
    UnsupportedOperator(String),
    #[error("forward graph is invalid: {0:?}")]
    InvalidForward(Vec<Diagnostic>),
    #[error("forward graph must have exactly one output, found {0}")]
    OutputCount(usize),
    #[error("loss target {0} does not match the network output shape")]
    TargetMismatch(EdgeId),
    #[error("parameter {0} does not influence the loss")]
    NoGradient(EdgeId),
    #[error("invalid optimizer parameters: {0}")]
    InvalidOptimizer(String),
    #[error("not a training graph: {0}")]
    NotTrainingGraph(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Existing target edge; a fresh label input is created when absent.
    pub target: Option<EdgeId>,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            kind: LossKind::CrossEntropyWithSoftmax,
            target: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    SgdMomentum {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerSpec {
    pub fn sgd() -> Self {
        OptimizerSpec::SgdMomentum {
            lr: 0.01,
            momentum: 0.9,
        }
    }

    pub fn adam() -> Self {
        OptimizerSpec::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Optimizer state tensors kept per parameter.
    pub fn state_count(&self) -> usize {
        match self {
            OptimizerSpec::SgdMomentum { .. } => 1,
            OptimizerSpec::Adam { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<(), AutodiffError> {
        let bad = |m: &str| Err(AutodiffError::InvalidOptimizer(m.into()));
        match *self {
            OptimizerSpec::SgdMomentum { lr, momentum } => {
                if !(lr > 0.0) {
                    return bad("learning rate must be positive");
                }
                if !(0.0..1.0).contains(&momentum) {
                    return bad("momentum must lie in [0, 1)");
                }
            }
            OptimizerSpec::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if !(lr > 0.0) {
                    return bad("learning rate must be positive");
                }
                if !(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0) {
                    return bad("betas must lie in (0, 1)");
                }
                if !(eps >= 0.0) {
                    return bad("eps must be non-negative");
                }
            }
        }
        Ok(())
    }

    fn op_kind(&self) -> OpKind {
        match *self {
            OptimizerSpec::SgdMomentum { lr, momentum } => OpKind::SgdUpdate { lr, momentum },
            OptimizerSpec::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => OpKind::AdamUpdate {
                lr,
                beta1,
                beta2,
                eps,
                step: 1,
            },
        }
    }

    fn from_op(kind: &OpKind) -> Option<Self> {
        match *kind {
            OpKind::SgdUpdate { lr, momentum } => Some(OptimizerSpec::SgdMomentum { lr, momentum }),
            OpKind::AdamUpdate {
                lr,
                beta1,
                beta2,
                eps,
                ..
            } => Some(OptimizerSpec::Adam {
                lr,
                beta1,
                beta2,
                eps,
            }),
            _ => None,
        }
    }
}

/// A forward graph extended with loss, backward and (optionally) optimizer nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingGraph {
    pub graph: ComputationGraph,
    /// Network output fed to the loss.
    pub prediction: EdgeId,
    pub target: EdgeId,
    pub loss: EdgeId,
    /// Trainable weight edges in id order.
    pub params: Vec<EdgeId>,
    /// Final (accumulated) gradient edge per parameter.
    pub param_grads: BTreeMap<EdgeId, EdgeId>,
    /// Optimizer state inputs per parameter.
    pub state_edges: BTreeMap<EdgeId, Vec<EdgeId>>,
    pub update_nodes: BTreeMap<EdgeId, NodeId>,
    pub optimizer: Option<OptimizerSpec>,
}

/// One entry of the activation set: a forward tensor read by the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activation {
    pub edge: EdgeId,
    pub bytes: u64,
    pub recompute_macs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub parameters: u64,
    pub gradients: u64,
    pub activations: u64,
    pub optimizer_states: u64,
}

impl MemoryBreakdown {
    pub fn total(&self) -> u64 {
        self.parameters + self.gradients + self.activations + self.optimizer_states
    }
}

/// Backward graph construction state.
pub(crate) struct Backward {
    pub g: ComputationGraph,
    pub grads: BTreeMap<EdgeId, Vec<EdgeId>>,
}

impl Backward {
    pub fn node(&mut self, kind: OpKind, inputs: &[EdgeId]) -> Result<EdgeId, AutodiffError> {
        Ok(self
            .g
            .add_node(kind, inputs, EdgeKind::Gradient, Phase::Backward)?)
    }

    pub fn shaped(
        &mut self,
        kind: OpKind,
        inputs: &[EdgeId],
        shape: &[usize],
    ) -> Result<EdgeId, AutodiffError> {
        Ok(self.g.add_node_shaped(
            kind,
            inputs,
            shape.to_vec(),
            EdgeKind::Gradient,
            Phase::Backward,
        )?)
    }

    pub fn push(&mut self, edge: EdgeId, grad: EdgeId) {
        self.grads.entry(edge).or_default().push(grad);
    }

    /// Sums every pending contribution with a left-to-right chain of `Add`s.
    pub fn accumulate(&mut self, edge: EdgeId) -> Result<Option<EdgeId>, AutodiffError> {
        let Some(parts) = self.grads.remove(&edge) else {
            return Ok(None);
        };
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.node(OpKind::Add, &[acc, p])?;
        }
        self.grads.insert(edge, vec![acc]);
        Ok(Some(acc))
    }
}

fn requires_grad(g: &ComputationGraph, order: &[NodeId]) -> BTreeSet<EdgeId> {
    let mut rg: BTreeSet<EdgeId> = g
        .edges
        .values()
        .filter(|e| e.kind == EdgeKind::Weight && e.producer.is_none())
        .map(|e| e.id)
        .collect();
    for &n in order {
        let node = g.node(n);
        if node.inputs.iter().any(|i| rg.contains(i)) {
            rg.extend(node.outputs.iter().copied());
        }
    }
    rg
}

/// Appends the loss, the backward pass and one optimizer update per parameter.
pub fn build_training_graph(
    fwd: &ComputationGraph,
    loss: LossSpec,
    opt: Option<OptimizerSpec>,
) -> Result<TrainingGraph, AutodiffError> {
    let diags = validate_graph(fwd);
    if !diags.is_empty() {
        return Err(AutodiffError::InvalidForward(diags));
    }
    if let Some(o) = &opt {
        o.validate()?;
    }
    if fwd.graph_outputs.len() != 1 {
        return Err(AutodiffError::OutputCount(fwd.graph_outputs.len()));
    }
    let order = topological_order(fwd)?;
    let prediction = fwd.graph_outputs[0];
    let mut g = fwd.clone();
    let pred_edge = g.edge(prediction).clone();
    let target = match loss.target {
        Some(t) => {
            if g.edges.get(&t).map(|e| &e.shape) != Some(&pred_edge.shape) {
                return Err(AutodiffError::TargetMismatch(t));
            }
            t
        }
        None => g.add_input(&pred_edge.shape, pred_edge.element_bytes, EdgeKind::Label),
    };
    let loss_edge = g.add_node(
        OpKind::Loss { kind: loss.kind },
        &[prediction, target],
        EdgeKind::Activation,
        Phase::Forward,
    )?;
    g.graph_outputs = vec![loss_edge];

    let rg = requires_grad(fwd, &order);
    let params: Vec<EdgeId> = fwd
        .edges
        .values()
        .filter(|e| e.kind == EdgeKind::Weight && e.producer.is_none() && !e.consumers.is_empty())
        .map(|e| e.id)
        .collect();

    let mut bw = Backward {
        g,
        grads: BTreeMap::new(),
    };
    let seed = bw.node(OpKind::LossGrad { kind: loss.kind }, &[prediction, target])?;
    bw.push(prediction, seed);

    for &n in order.iter().rev() {
        let node = fwd.node(n).clone();
        let out = node.outputs[0];
        let Some(gy) = bw.accumulate(out)? else {
            continue;
        };
        let needs: Vec<bool> = node.inputs.iter().map(|i| rg.contains(i)).collect();
        if !needs.iter().any(|&b| b) {
            continue;
        }
        backward_rule(&mut bw, &node, gy, &needs)?;
    }

    let mut param_grads = BTreeMap::new();
    for &p in &params {
        match bw.accumulate(p)? {
            Some(gp) => {
                param_grads.insert(p, gp);
            }
            None => return Err(AutodiffError::NoGradient(p)),
        }
    }

    let mut tg = TrainingGraph {
        graph: bw.g,
        prediction,
        target,
        loss: loss_edge,
        params,
        param_grads,
        state_edges: BTreeMap::new(),
        update_nodes: BTreeMap::new(),
        optimizer: None,
    };
    if let Some(o) = opt {
        insert_optimizer(&mut tg, o)?;
    }
    Ok(tg)
}

/// Adds one elementwise update node per parameter reading `(theta, grad, states)`.
pub fn insert_optimizer(tg: &mut TrainingGraph, opt: OptimizerSpec) -> Result<(), AutodiffError> {
    opt.validate()?;
    if tg.optimizer.is_some() {
        return Err(AutodiffError::NotTrainingGraph(
            "optimizer already present".into(),
        ));
    }
    let g = &mut tg.graph;
    for &p in &tg.params {
        let grad = tg.param_grads[&p];
        let (shape, eb) = (g.edge(p).shape.clone(), g.edge(p).element_bytes);
        let states: Vec<EdgeId> = (0..opt.state_count())
            .map(|_| g.add_input(&shape, eb, EdgeKind::OptimizerState))
            .collect();
        let mut inputs = vec![p, grad];
        inputs.extend(&states);
        let (nid, outs) = g.add_node_with_shapes(
            opt.op_kind(),
            &inputs,
            None,
            EdgeKind::OptimizerState,
            Phase::Optimizer,
        )?;
        g.edges.get_mut(&outs[0]).unwrap().kind = EdgeKind::Weight;
        g.graph_outputs.extend(&outs);
        tg.state_edges.insert(p, states);
        tg.update_nodes.insert(p, nid);
    }
    tg.optimizer = Some(opt);
    Ok(())
}

impl TrainingGraph {
    /// Recovers the training-graph bookkeeping from a plain graph, e.g. one
    /// loaded from a workload file.
    pub fn from_graph(g: ComputationGraph) -> Result<Self, AutodiffError> {
        let err = |m: &str| AutodiffError::NotTrainingGraph(m.into());
        let losses: Vec<_> = g
            .nodes
            .values()
            .filter(|n| matches!(n.kind, OpKind::Loss { .. }))
            .collect();
        let [loss_node] = losses.as_slice() else {
            return Err(err("expected exactly one Loss node"));
        };
        let (prediction, target, loss) = (
            loss_node.inputs[0],
            loss_node.inputs[1],
            loss_node.outputs[0],
        );
        let mut params: Vec<EdgeId> = g
            .edges
            .values()
            .filter(|e| {
                e.kind == EdgeKind::Weight
                    && e.producer.is_none()
                    && e.consumers
                        .iter()
                        .any(|c| g.node(*c).phase == Phase::Forward)
            })
            .map(|e| e.id)
            .collect();
        params.sort_unstable();
        let mut tg = TrainingGraph {
            prediction,
            target,
            loss,
            params,
            param_grads: BTreeMap::new(),
            state_edges: BTreeMap::new(),
            update_nodes: BTreeMap::new(),
            optimizer: None,
            graph: ComputationGraph::default(),
        };
        for n in g.nodes.values().filter(|n| n.phase == Phase::Optimizer) {
            let spec =
                OptimizerSpec::from_op(&n.kind).ok_or_else(|| err("unknown optimizer node"))?;
            if tg.optimizer.is_some_and(|o| o != spec) {
                return Err(err("mixed optimizer settings"));
            }
            tg.optimizer = Some(spec);
            let p = n.inputs[0];
            tg.param_grads.insert(p, n.inputs[1]);
            tg.state_edges.insert(p, n.inputs[2..].to_vec());
            tg.update_nodes.insert(p, n.id);
        }
        tg.graph = g;
        Ok(tg)
    }

    pub fn forward_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.graph
            .nodes
            .values()
            .filter(|n| n.phase == Phase::Forward)
            .map(|n| n.id)
    }

    /// Is `e` a forward-side tensor (forward-produced or an input/label)?
    pub fn is_forward_edge(&self, e: EdgeId) -> bool {
        let edge = self.graph.edge(e);
        match edge.producer {
            Some(p) => self.graph.node(p).phase == Phase::Forward,
            None => matches!(edge.kind, EdgeKind::Input | EdgeKind::Label),
        }
    }

    /// Forward tensors mapped to the backward nodes that read them.
    pub fn activation_map(&self) -> BTreeMap<EdgeId, Vec<NodeId>> {
        let mut map = BTreeMap::new();
        for e in self.graph.edges.values() {
            if !self.is_forward_edge(e.id) {
                continue;
            }
            let bw: Vec<NodeId> = e
                .consumers
                .iter()
                .copied()
                .filter(|c| self.graph.node(*c).phase == Phase::Backward)
                .collect();
            if !bw.is_empty() {
                map.insert(e.id, bw);
            }
        }
        map
    }

    /// The activation set in topological order of the producing node
    /// (external tensors first), each with its bytes and the MACs needed to
    /// regenerate it from the other activations, weights and inputs.
    pub fn activation_set(&self) -> Vec<Activation> {
        let map = self.activation_map();
        let members: BTreeSet<EdgeId> = map.keys().copied().collect();
        let order = topological_order(&self.graph).expect("training graph is acyclic");
        let pos: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let mut out: Vec<Activation> = members
            .iter()
            .map(|&e| Activation {
                edge: e,
                bytes: tensor_bytes(self.graph.edge(e)),
                recompute_macs: self
                    .recompute_subgraph(e, &members)
                    .iter()
                    .map(|n| self.graph.node(*n).macs)
                    .sum(),
            })
            .collect();
        out.sort_by_key(|a| {
            let p = self.graph.edge(a.edge).producer.map_or(0, |n| pos[&n] + 1);
            (p, a.edge)
        });
        out
    }

    /// Forward nodes needed to regenerate `e` when every edge in `stop`
    /// (other than `e` itself), every weight and every graph input is available.
    pub fn recompute_subgraph(&self, e: EdgeId, stop: &BTreeSet<EdgeId>) -> BTreeSet<NodeId> {
        let mut nodes = BTreeSet::new();
        let mut stack = vec![e];
        while let Some(t) = stack.pop() {
            let Some(p) = self.graph.edge(t).producer else {
                continue;
            };
            if self.graph.node(p).phase != Phase::Forward || !nodes.insert(p) {
                continue;
            }
            for &i in &self.graph.node(p).inputs {
                if !stop.contains(&i) {
                    stack.push(i);
                }
            }
        }
        nodes
    }
}

pub fn activation_set(tg: &TrainingGraph) -> Vec<Activation> {
    tg.activation_set()
}

pub fn training_memory_breakdown(tg: &TrainingGraph) -> MemoryBreakdown {
    let g = &tg.graph;
    let parameters = tg.params.iter().map(|p| tensor_bytes(g.edge(*p))).sum();
    let gradients = tg
        .param_grads
        .values()
        .map(|p| tensor_bytes(g.edge(*p)))
        .sum();
    let optimizer_states = tg
        .state_edges
        .values()
        .flatten()
        .map(|s| tensor_bytes(g.edge(*s)))
        .sum();
    let activations = tg.activation_set().iter().map(|a| a.bytes).sum();
    MemoryBreakdown {
        parameters,
        gradients,
        activations,
        optimizer_states,
    }
}
