//! Reference numeric executor for computation graphs.
//!
//! Used only to check graph transformations, never as a performance model.

mod gradcheck;
pub mod kernels;
pub mod reference;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::graph::{topological_order, ComputationGraph, EdgeId, GraphError, NodeId};
use crate::Scalar;

pub use gradcheck::{
    check_training_graph, finite_difference_grad, random_bindings, GradReport, ParamReport,
    FD_STEP, GRAD_FLOOR,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> TensorValue<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, InterpError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(InterpError::BufferLength {
                expected: shape.iter().product(),
                got: data.len(),
            });
        }
        Ok(TensorValue { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        TensorValue {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        TensorValue {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }
}

pub type Bindings<T> = BTreeMap<EdgeId, TensorValue<T>>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InterpError {
    #[error("graph input {0} is not bound")]
    UnboundInput(EdgeId),
    #[error("edge {edge}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        edge: EdgeId,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("buffer of length {got} for {expected} elements")]
    BufferLength { expected: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Evaluates every node in topological order and returns all edge values.
pub fn execute<T: Scalar>(
    g: &ComputationGraph,
    bindings: &Bindings<T>,
) -> Result<Bindings<T>, InterpError> {
    let order = topological_order(g)?;
    let mut values = Bindings::new();
    for &e in &g.graph_inputs {
        let v = bindings.get(&e).ok_or(InterpError::UnboundInput(e))?;
        check_shape(g, e, v)?;
        values.insert(e, v.clone());
    }
    for n in order {
        let outs = eval_node(g, n, |e| values.get(&e))?;
        for (e, v) in g.node(n).outputs.iter().zip(outs) {
            values.insert(*e, v);
        }
    }
    Ok(values)
}

fn check_shape<T>(g: &ComputationGraph, e: EdgeId, v: &TensorValue<T>) -> Result<(), InterpError> {
    let expected = &g.edge(e).shape;
    if &v.shape != expected {
        return Err(InterpError::ShapeMismatch {
            edge: e,
            expected: expected.clone(),
            got: v.shape.clone(),
        });
    }
    Ok(())
}

fn eval_node<'a, T: Scalar>(
    g: &ComputationGraph,
    n: NodeId,
    lookup: impl Fn(EdgeId) -> Option<&'a TensorValue<T>>,
) -> Result<Vec<TensorValue<T>>, InterpError> {
    let node = g.node(n);
    let mut ins = Vec::with_capacity(node.inputs.len());
    for &e in &node.inputs {
        let v = lookup(e).ok_or(InterpError::UnboundInput(e))?;
        check_shape(g, e, v)?;
        ins.push(v);
    }
    let shapes: Vec<Vec<usize>> = node
        .outputs
        .iter()
        .map(|o| g.edge(*o).shape.clone())
        .collect();
    kernels::eval(&node.kind, &ins, &shapes)
}

/// Re-evaluates a subset of nodes after some edges have been overridden,
/// reading every other edge from a base evaluation.
pub(crate) struct Incremental<'g, T> {
    pub g: &'g ComputationGraph,
    pub base: &'g Bindings<T>,
    order: Vec<NodeId>,
}

impl<'g, T: Scalar> Incremental<'g, T> {
    pub fn new(g: &'g ComputationGraph, base: &'g Bindings<T>) -> Result<Self, InterpError> {
        Ok(Incremental {
            g,
            base,
            order: topological_order(g)?,
        })
    }

    /// Nodes downstream of `e` restricted to `allowed`, in topological order.
    pub fn downstream(&self, e: EdgeId, allowed: &BTreeSet<NodeId>) -> Vec<NodeId> {
        let mut dirty: BTreeSet<EdgeId> = BTreeSet::from([e]);
        let mut out = vec![];
        for &n in &self.order {
            let node = self.g.node(n);
            if allowed.contains(&n) && node.inputs.iter().any(|i| dirty.contains(i)) {
                dirty.extend(node.outputs.iter().copied());
                out.push(n);
            }
        }
        out
    }

    pub fn run(
        &self,
        mut overlay: Bindings<T>,
        nodes: &[NodeId],
    ) -> Result<Bindings<T>, InterpError> {
        for &n in nodes {
            let outs = eval_node(self.g, n, |e| overlay.get(&e).or_else(|| self.base.get(&e)))?;
            for (e, v) in self.g.node(n).outputs.iter().zip(outs) {
                overlay.insert(*e, v);
            }
        }
        Ok(overlay)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EdgeKind, OpKind, Phase};

    fn one_op(kind: OpKind, shapes: &[&[usize]], data: &[&[f64]]) -> Vec<f64> {
        let mut g = ComputationGraph::default();
        let ins: Vec<EdgeId> = shapes
            .iter()
            .map(|s| g.add_input(s, 8, EdgeKind::Input))
            .collect();
        let y = g
            .add_node(kind, &ins, EdgeKind::Activation, Phase::Forward)
            .unwrap();
        g.graph_outputs.push(y);
        let b: Bindings<f64> = ins
            .iter()
            .zip(shapes.iter().zip(data))
            .map(|(e, (s, d))| (*e, TensorValue::new(s.to_vec(), d.to_vec()).unwrap()))
            .collect();
        execute(&g, &b).unwrap()[&y].data.clone()
    }

    #[test]
    fn relu_clamps_negatives() {
        assert_eq!(
            one_op(OpKind::ReLU, &[&[2]], &[&[-1.0, 2.0]]),
            vec![0.0, 2.0]
        );
    }

    #[test]
    fn gemm_with_identity_weight_is_identity() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let i3 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(
            one_op(OpKind::Gemm, &[&[2, 3], &[3, 3]], &[&x, &i3]),
            x.to_vec()
        );
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        assert_eq!(
            one_op(OpKind::Softmax, &[&[2]], &[&[0.0, 0.0]]),
            vec![0.5, 0.5]
        );
    }

    #[test]
    fn unbound_input_is_reported() {
        let mut g = ComputationGraph::default();
        let x = g.add_input(&[2], 8, EdgeKind::Input);
        let y = g
            .add_node(OpKind::ReLU, &[x], EdgeKind::Activation, Phase::Forward)
            .unwrap();
        g.graph_outputs.push(y);
        assert_eq!(
            execute::<f64>(&g, &Bindings::new()),
            Err(InterpError::UnboundInput(x))
        );
        let bad = Bindings::from([(x, TensorValue::<f64>::zeros(&[3]))]);
        assert!(matches!(
            execute(&g, &bad),
            Err(InterpError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn single_precision_path_runs() {
        let mut g = ComputationGraph::default();
        let x = g.add_input(&[3], 4, EdgeKind::Input);
        let y = g
            .add_node(OpKind::Gelu, &[x], EdgeKind::Activation, Phase::Forward)
            .unwrap();
        g.graph_outputs.push(y);
        let b = Bindings::from([(
            x,
            TensorValue::<f32>::new(vec![3], vec![-1.0, 0.0, 1.0]).unwrap(),
        )]);
        let out = execute(&g, &b).unwrap();
        assert_eq!(out[&y].data[1], 0.0f32);
        assert!((out[&y].data[2] - 0.841_192).abs() < 1e-5);
    }
}
